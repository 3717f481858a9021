#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "decifr/unet.hpp"

// Checkpoint archive: one file holding the named-tensor map plus a JSON
// header (model config, round number, seed). Doubles, little-endian.
//
//   "DCFRCKPT" | u32 version | u64 header_len | header JSON | raw f64 data
//
// A separate flat export writes the parameter vector as little-endian f32
// with a JSON sidecar mapping name -> (offset, shape), offsets in elements.

namespace decifr::nn {

using json = nlohmann::json;

inline json config_to_json(const UNetConfig& cfg) {
  return json{{"depth_down", cfg.depth_down},
              {"base_filters", cfg.base_filters},
              {"max_filters", cfg.max_filters},
              {"image_size", cfg.image_size},
              {"norm", to_cstr(cfg.norm)}};
}

inline UNetConfig config_from_json(const json& j) {
  UNetConfig cfg;
  cfg.depth_down = j.at("depth_down").get<int>();
  cfg.base_filters = j.at("base_filters").get<int>();
  cfg.max_filters = j.at("max_filters").get<int>();
  cfg.image_size = j.at("image_size").get<int>();
  cfg.norm = norm_from_string(j.at("norm").get<std::string>());
  return cfg;
}

struct CheckpointMeta {
  UNetConfig config;
  int round = 0;
  uint64_t seed = 0;
};

namespace detail {
inline constexpr char kCkptMagic[8] = {'D', 'C', 'F', 'R', 'C', 'K', 'P', 'T'};
inline constexpr uint32_t kCkptVersion = 1;

static_assert(sizeof(double) == 8);

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}
}  // namespace detail

inline void save_checkpoint(const std::string& path, const ModelParams& params,
                            const CheckpointMeta& meta) {
  if (!params.all_finite()) throw InvalidInput("save_checkpoint: non-finite parameters");
  json tensors = json::array();
  int64_t offset = 0;
  for (const auto& t : params.tensors) {
    tensors.push_back({{"name", t.name}, {"offset", offset}, {"shape", t.value.shape}});
    offset += t.value.numel();
  }
  json header{{"config", config_to_json(meta.config)},
              {"round", meta.round},
              {"seed", meta.seed},
              {"dtype", "f64le"},
              {"total", offset},
              {"tensors", tensors}};
  const std::string hs = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open for write: " + path);
  os.write(detail::kCkptMagic, sizeof(detail::kCkptMagic));
  detail::write_pod<uint32_t>(os, detail::kCkptVersion);
  detail::write_pod<uint64_t>(os, hs.size());
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& t : params.tensors)
    os.write(reinterpret_cast<const char*>(t.value.data.data()),
             static_cast<std::streamsize>(t.value.numel() * sizeof(double)));
  if (!os) throw Error("write failed: " + path);
}

inline ModelParams load_checkpoint(const std::string& path, CheckpointMeta* meta_out = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw NotFoundError("checkpoint not found: " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
    throw InvalidInput("not a checkpoint file: " + path);
  const auto version = detail::read_pod<uint32_t>(is);
  if (version != detail::kCkptVersion) throw InvalidInput("unsupported checkpoint version");
  const auto hlen = detail::read_pod<uint64_t>(is);
  std::string hs(hlen, '\0');
  is.read(hs.data(), static_cast<std::streamsize>(hlen));
  json header = json::parse(hs);

  if (meta_out) {
    meta_out->config = config_from_json(header.at("config"));
    meta_out->round = header.at("round").get<int>();
    meta_out->seed = header.at("seed").get<uint64_t>();
  }
  ModelParams params;
  for (const auto& tj : header.at("tensors")) {
    NamedTensor nt;
    nt.name = tj.at("name").get<std::string>();
    nt.value = ad::Tensor(tj.at("shape").get<ad::Shape>());
    is.read(reinterpret_cast<char*>(nt.value.data.data()),
            static_cast<std::streamsize>(nt.value.numel() * sizeof(double)));
    params.tensors.push_back(std::move(nt));
  }
  if (!is) throw InvalidInput("truncated checkpoint: " + path);
  if (!params.all_finite()) throw InvalidInput("non-finite parameters in " + path);
  return params;
}

// Flat-vector export for gradient analysis: f32 little-endian binary plus a
// JSON sidecar with the name -> (offset, shape) table.
inline void export_flat_f32(const ModelParams& params, const std::string& bin_path,
                            const std::string& sidecar_path) {
  std::ofstream os(bin_path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open for write: " + bin_path);
  json table = json::object();
  int64_t offset = 0;
  for (const auto& t : params.tensors) {
    table[t.name] = {{"offset", offset}, {"shape", t.value.shape}};
    offset += t.value.numel();
    for (double v : t.value.data) {
      float f = static_cast<float>(v);
      os.write(reinterpret_cast<const char*>(&f), sizeof(float));
    }
  }
  std::ofstream js(sidecar_path, std::ios::trunc);
  js << json{{"dtype", "f32le"}, {"total", offset}, {"tensors", table}}.dump(2) << "\n";
}

}  // namespace decifr::nn
