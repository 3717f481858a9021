#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "decifr/grid.hpp"
#include "decifr/png_io.hpp"
#include "decifr/rng.hpp"

// Synthetic stand-in for foundry layout data: parametric Manhattan-geometry
// masks in two styles (thin metal routing vs blocky diffusion regions, at a
// coarse or fine feature scale) rendered into noisy SEM-style images. The
// attack only needs the classes to be geometrically distinct.

namespace decifr::synth {

enum class LayerClass { metal, diffusion };
enum class NodeClass { fine, coarse };

inline const char* to_cstr(LayerClass c) { return c == LayerClass::metal ? "metal" : "diffusion"; }
inline const char* to_cstr(NodeClass c) { return c == NodeClass::fine ? "fine" : "coarse"; }

inline LayerClass layer_from_string(const std::string& s) {
  if (s == "metal") return LayerClass::metal;
  if (s == "diffusion") return LayerClass::diffusion;
  throw ConfigError("unknown layer class: " + s);
}

inline NodeClass node_from_string(const std::string& s) {
  if (s == "fine") return NodeClass::fine;
  if (s == "coarse") return NodeClass::coarse;
  throw ConfigError("unknown node class: " + s);
}

struct ClassSpec {
  LayerClass layer = LayerClass::metal;
  NodeClass node = NodeClass::coarse;

  std::string str() const { return std::string(to_cstr(layer)) + "-" + to_cstr(node); }
  bool operator==(const ClassSpec&) const = default;
};

struct LayoutMask {
  MaskGrid pixels;  // values in {0,1}
  LayerClass layer_class = LayerClass::metal;
  NodeClass node_class = NodeClass::coarse;
  std::string cell_id;
};

struct SemImage {
  ImageGrid pixels;  // intensities in [0,255]
  std::string source_cell_id;
};

struct SynthesisParams {
  double bg_mean = 75.0;
  double fg_mean = 135.0;
  double intensity_std = 20.0;
  double shot_noise_level = 20.0;
  double dwell_time_us_per_px = 10.0;
  int image_size = 256;
  uint64_t rng_seed = 0;

  void validate() const {
    if (fg_mean <= bg_mean) throw ConfigError("fg_mean must exceed bg_mean");
    if (intensity_std < 0.0) throw ConfigError("intensity_std must be non-negative");
    if (shot_noise_level < 0.0 || dwell_time_us_per_px <= 0.0)
      throw ConfigError("bad shot-noise parameters");
    if (image_size < 32 || (image_size & (image_size - 1)) != 0)
      throw ConfigError("image_size must be a power of two >= 32");
  }
};

// Generator feature-size limits (pixels at 64x64 scale; widths scale with
// image size, fine node halves everything).
inline int metal_max_width(NodeClass node) { return node == NodeClass::coarse ? 6 : 3; }
inline int diffusion_min_side(NodeClass node, int size) {
  const int base = node == NodeClass::coarse ? 8 : 4;
  return std::max(2, base * size / 64);
}

namespace detail {

inline void check_size(int size) {
  if (size < 32 || (size & (size - 1)) != 0)
    throw ConfigError("layout size must be a power of two >= 32");
}

struct Painter {
  MaskGrid mask;
  MaskGrid occupied;  // mask dilated by the required spacing

  explicit Painter(int size) : mask(size, size, 0), occupied(size, size, 0) {}

  // Region plus margin must be unoccupied, except inside the exempt rect
  // (a bend stub is allowed to sit diagonally against its own arm).
  bool free_rect(int y0, int x0, int h, int w, int margin, int ey0 = 0, int ex0 = 0, int eh = 0,
                 int ew = 0) const {
    if (y0 < 0 || x0 < 0 || y0 + h > mask.height() || x0 + w > mask.width()) return false;
    const int ya = std::max(0, y0 - margin), yb = std::min(mask.height(), y0 + h + margin);
    const int xa = std::max(0, x0 - margin), xb = std::min(mask.width(), x0 + w + margin);
    for (int y = ya; y < yb; ++y)
      for (int x = xa; x < xb; ++x) {
        if (y >= ey0 && y < ey0 + eh && x >= ex0 && x < ex0 + ew) continue;
        if (occupied.at(y, x)) return false;
      }
    return true;
  }

  void fill_rect(int y0, int x0, int h, int w) {
    for (int y = y0; y < y0 + h; ++y)
      for (int x = x0; x < x0 + w; ++x) {
        mask.at(y, x) = 1;
        occupied.at(y, x) = 1;
      }
  }

  double coverage() const { return foreground_fraction(mask); }
};

// Thin axis-aligned wires, occasionally with an L-bend. The bend stub is a
// separate rectangle touching the arm only diagonally, so every feature keeps
// its thin cross-section (no thick junction block).
inline MaskGrid gen_metal(NodeClass node, int size, Rng& rng) {
  Painter p(size);
  const int wmax = metal_max_width(node);
  const int wmin = node == NodeClass::coarse ? 3 : 2;
  const int spacing = std::max(2, wmax / 2);
  const int target_wires = rng.uniform_int(3, 12);
  const double min_cover = 0.06, max_cover = 0.45;

  int placed = 0;
  for (int attempt = 0; attempt < 400 && (placed < target_wires || p.coverage() < min_cover);
       ++attempt) {
    if (p.coverage() >= max_cover) break;
    const int w = rng.uniform_int(wmin, wmax);
    const int len = rng.uniform_int(size / 2, (size * 15) / 16);
    const bool horizontal = rng.uniform() < 0.5;
    const int h = horizontal ? w : len;
    const int wd = horizontal ? len : w;
    const int y0 = rng.uniform_int(0, size - h);
    const int x0 = rng.uniform_int(0, size - wd);
    const double projected =
        p.coverage() + static_cast<double>(h * wd) / (static_cast<double>(size) * size);
    if (projected > 0.48 || !p.free_rect(y0, x0, h, wd, spacing)) continue;
    p.fill_rect(y0, x0, h, wd);
    ++placed;

    if (rng.uniform() < 0.35) {
      // L-bend: perpendicular stub off one end, diagonal corner contact.
      const int stub_len = rng.uniform_int(size / 8, size / 3);
      const bool at_end = rng.uniform() < 0.5;
      int sy, sx, sh, sw;
      if (horizontal) {
        sh = stub_len;
        sw = w;
        sx = at_end ? x0 + wd : x0 - sw;
        sy = rng.uniform() < 0.5 ? y0 + h : y0 - sh;
      } else {
        sh = w;
        sw = stub_len;
        sy = at_end ? y0 + h : y0 - sh;
        sx = rng.uniform() < 0.5 ? x0 + wd : x0 - sw;
      }
      if (p.free_rect(sy, sx, sh, sw, 1, y0, x0, h, wd)) p.fill_rect(sy, sx, sh, sw);
    }
  }
  if (placed == 0) p.fill_rect(size / 4, size / 8, wmin, size / 2);  // never all-background
  return p.mask;
}

// Large blocky regions; rectangles may overlap into unions.
inline MaskGrid gen_diffusion(NodeClass node, int size, Rng& rng) {
  MaskGrid mask(size, size, 0);
  const int smin = diffusion_min_side(node, size);
  const int smax = std::max(smin + 1, (size * 7) / 16);
  const int target = rng.uniform_int(2, 6);
  const double max_cover = 0.55;

  auto cover = [&]() { return foreground_fraction(mask); };
  int placed = 0;
  for (int attempt = 0; attempt < 200 && (placed < target || cover() < 0.08); ++attempt) {
    if (cover() >= max_cover) break;
    const int h = rng.uniform_int(smin, smax);
    const int w = rng.uniform_int(smin, smax);
    const int y0 = rng.uniform_int(0, size - h);
    const int x0 = rng.uniform_int(0, size - w);
    for (int y = y0; y < y0 + h; ++y)
      for (int x = x0; x < x0 + w; ++x) mask.at(y, x) = 1;
    ++placed;
  }
  return mask;
}

}  // namespace detail

// Deterministic mask for a given (class, size, seed).
inline LayoutMask generate_layout(LayerClass layer, NodeClass node, int size, uint64_t rng_seed) {
  detail::check_size(size);
  Rng rng(derive_seed(rng_seed, layer == LayerClass::metal ? "layout-metal" : "layout-diff"));
  LayoutMask out;
  out.layer_class = layer;
  out.node_class = node;
  out.pixels = layer == LayerClass::metal ? detail::gen_metal(node, size, rng)
                                          : detail::gen_diffusion(node, size, rng);
  const double f = foreground_fraction(out.pixels);
  if (f <= 0.0 || f >= 1.0) throw Error("generated mask violates foreground invariant");
  return out;
}

// Render a mask into an SEM-style image: Gaussian intensity per class plus a
// Poisson shot-noise term with variance ~ intensity * shot/dwell, clamped to
// [0,255]. Noise-free when intensity_std == 0 and shot_noise_level == 0.
inline SemImage synthesize_sem(const LayoutMask& mask, const SynthesisParams& params,
                               uint64_t rng_seed) {
  params.validate();
  if (mask.pixels.height() != params.image_size || mask.pixels.width() != params.image_size)
    throw InvalidInput("synthesize_sem: mask dimensions do not match params.image_size");
  Rng rng(derive_seed(rng_seed, "sem"));
  SemImage out;
  out.source_cell_id = mask.cell_id;
  out.pixels = ImageGrid(params.image_size, params.image_size);
  const double shot_scale = params.shot_noise_level > 0.0
                                ? params.shot_noise_level / params.dwell_time_us_per_px
                                : 0.0;
  for (size_t i = 0; i < mask.pixels.size(); ++i) {
    double v = (mask.pixels.raw()[i] ? params.fg_mean : params.bg_mean);
    if (params.intensity_std > 0.0) v += params.intensity_std * rng.normal();
    if (shot_scale > 0.0) {
      const double lambda = std::max(v, 0.0) / shot_scale;
      v = static_cast<double>(rng.poisson(lambda)) * shot_scale;
    }
    out.pixels.raw()[i] = std::clamp(v, 0.0, 255.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset builder.

inline constexpr int kDiversityBudget = 4096;  // distinct cells per class per dataset

struct DatasetConfig {
  int image_size = 64;
  int clients = 2;
  int per_client = 20;
  int holdout_per_class = 8;
  std::vector<ClassSpec> client_classes;  // one entry per client
  SynthesisParams synth;
  uint64_t master_seed = 1;

  void validate() const {
    if (clients < 1 || per_client < 1 || holdout_per_class < 0)
      throw ConfigError("dataset counts must be positive");
    if (static_cast<int>(client_classes.size()) != clients)
      throw ConfigError("client_classes must list one class per client");
    SynthesisParams s = synth;
    s.image_size = image_size;
    s.validate();
  }
};

struct DatasetCell {
  std::string cell_id;
  LayoutMask mask;
  SemImage image;
  int client = -1;  // -1 = held-out pool
  uint64_t seed = 0;
};

struct Dataset {
  DatasetConfig config;
  std::vector<DatasetCell> cells;

  std::vector<const DatasetCell*> client_cells(int client) const {
    std::vector<const DatasetCell*> out;
    for (const auto& c : cells)
      if (c.client == client) out.push_back(&c);
    return out;
  }
  std::vector<const DatasetCell*> holdout_cells() const { return client_cells(-1); }
};

inline ClassSpec complementary_class(const ClassSpec& c) {
  return {c.layer == LayerClass::metal ? LayerClass::diffusion : LayerClass::metal, c.node};
}

// Deterministic function of (config, master_seed): per-client member pairs
// plus a held-out pool covering each client class and its complementary
// class. Cell ids are globally unique; no cell appears in two clients.
inline Dataset build_dataset(const DatasetConfig& cfg) {
  cfg.validate();
  SynthesisParams synth = cfg.synth;
  synth.image_size = cfg.image_size;

  // Diversity budget per class.
  std::vector<std::pair<ClassSpec, int>> demand;
  auto add_demand = [&](const ClassSpec& cls, int n) {
    for (auto& d : demand)
      if (d.first == cls) {
        d.second += n;
        return;
      }
    demand.push_back({cls, n});
  };
  for (int k = 0; k < cfg.clients; ++k) add_demand(cfg.client_classes[k], cfg.per_client);
  std::vector<ClassSpec> holdout_classes;
  for (const auto& cls : cfg.client_classes) {
    for (const ClassSpec& h : {cls, complementary_class(cls)}) {
      if (std::find(holdout_classes.begin(), holdout_classes.end(), h) == holdout_classes.end())
        holdout_classes.push_back(h);
    }
  }
  for (const auto& h : holdout_classes) add_demand(h, cfg.holdout_per_class);
  for (const auto& d : demand)
    if (d.second > kDiversityBudget)
      throw ConfigError("requested " + std::to_string(d.second) + " cells of class " +
                        d.first.str() + " exceeds the generator diversity budget of " +
                        std::to_string(kDiversityBudget));

  Dataset ds;
  ds.config = cfg;
  std::vector<std::pair<ClassSpec, int>> class_counter;
  auto next_index = [&](const ClassSpec& cls) {
    for (auto& c : class_counter)
      if (c.first == cls) return c.second++;
    class_counter.push_back({cls, 1});
    return 0;
  };
  auto make_cell = [&](const ClassSpec& cls, int client) {
    const int idx = next_index(cls);
    char suffix[8];
    std::snprintf(suffix, sizeof(suffix), "%04d", idx);
    DatasetCell cell;
    cell.cell_id = cls.str() + "-" + suffix;
    cell.client = client;
    cell.seed = derive_seed(cfg.master_seed, "cell-" + cls.str(), static_cast<uint64_t>(idx));
    cell.mask = generate_layout(cls.layer, cls.node, cfg.image_size, cell.seed);
    cell.mask.cell_id = cell.cell_id;
    cell.image = synthesize_sem(cell.mask, synth, derive_seed(cell.seed, "render"));
    ds.cells.push_back(std::move(cell));
  };

  for (int k = 0; k < cfg.clients; ++k)
    for (int i = 0; i < cfg.per_client; ++i) make_cell(cfg.client_classes[k], k);
  for (const auto& h : holdout_classes)
    for (int i = 0; i < cfg.holdout_per_class; ++i) make_cell(h, -1);
  return ds;
}

// ---------------------------------------------------------------------------
// On-disk form: <dir>/client<k>/<cell_id>_{img,mask}.png, holdout cells under
// <dir>/holdout/, and a dataset.json manifest.

inline Grid<uint8_t> image_to_u8(const ImageGrid& img) {
  return img.map<uint8_t>([](double v) {
    return static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
  });
}

inline Grid<uint8_t> mask_to_u8(const MaskGrid& m) {
  return m.map<uint8_t>([](uint8_t v) { return v ? uint8_t{255} : uint8_t{0}; });
}

inline void write_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& cell : ds.cells) {
    const std::string sub = cell.client >= 0 ? "client" + std::to_string(cell.client) : "holdout";
    fs::create_directories(fs::path(dir) / sub);
    const fs::path base = fs::path(dir) / sub / cell.cell_id;
    write_png_gray8(base.string() + "_img.png", image_to_u8(cell.image.pixels));
    write_png_gray8(base.string() + "_mask.png", mask_to_u8(cell.mask.pixels));
    cells.push_back({{"cell_id", cell.cell_id},
                     {"layer_class", to_cstr(cell.mask.layer_class)},
                     {"node_class", to_cstr(cell.mask.node_class)},
                     {"client", cell.client},
                     {"seed", cell.seed}});
  }
  nlohmann::json manifest{{"image_size", ds.config.image_size},
                          {"clients", ds.config.clients},
                          {"per_client", ds.config.per_client},
                          {"master_seed", ds.config.master_seed},
                          {"cells", cells}};
  std::ofstream os(fs::path(dir) / "dataset.json");
  os << manifest.dump(2) << "\n";
}

struct LoadedCell {
  std::string cell_id;
  ClassSpec cls;
  int client = -1;
  ImageGrid image;   // [0,255]
  MaskGrid mask;     // {0,1}
};

inline std::vector<LoadedCell> load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream is(fs::path(dir) / "dataset.json");
  if (!is) throw NotFoundError("dataset.json not found under " + dir);
  nlohmann::json manifest = nlohmann::json::parse(is);
  std::vector<LoadedCell> out;
  for (const auto& cj : manifest.at("cells")) {
    LoadedCell cell;
    cell.cell_id = cj.at("cell_id").get<std::string>();
    cell.cls.layer = layer_from_string(cj.at("layer_class").get<std::string>());
    cell.cls.node = node_from_string(cj.at("node_class").get<std::string>());
    cell.client = cj.at("client").get<int>();
    const std::string sub = cell.client >= 0 ? "client" + std::to_string(cell.client) : "holdout";
    const fs::path base = fs::path(dir) / sub / cell.cell_id;
    Grid<uint8_t> img = read_png_gray8(base.string() + "_img.png");
    Grid<uint8_t> msk = read_png_gray8(base.string() + "_mask.png");
    cell.image = img.map<double>([](uint8_t v) { return static_cast<double>(v); });
    cell.mask = msk.map<uint8_t>([](uint8_t v) { return v > 127 ? uint8_t{1} : uint8_t{0}; });
    out.push_back(std::move(cell));
  }
  return out;
}

}  // namespace decifr::synth
