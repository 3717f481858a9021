#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "decifr/autodiff.hpp"
#include "decifr/grid.hpp"
#include "decifr/rng.hpp"

// Pix2Pix-style U-Net generator: depth_down strided 4x4 convolutions in the
// encoder, depth_down-1 skip-connected upsampling blocks plus an output
// transpose convolution in the decoder. Filter counts double per level up to
// max_filters. Encoder activations are leaky-relu(0.2), decoder relu; the
// network emits logits.

namespace decifr::nn {

using ad::Shape;
using ad::Tensor;
using ad::Var;

enum class Norm { none, instance };

inline const char* to_cstr(Norm n) { return n == Norm::none ? "none" : "instance"; }

inline Norm norm_from_string(const std::string& s) {
  if (s == "none") return Norm::none;
  if (s == "instance") return Norm::instance;
  throw ConfigError("unknown norm kind: " + s);
}

struct UNetConfig {
  int depth_down = 4;
  int base_filters = 16;
  int max_filters = 512;
  int image_size = 64;
  Norm norm = Norm::none;

  int depth_up() const { return depth_down - 1; }
  int filters(int level) const {
    int64_t f = static_cast<int64_t>(base_filters) << level;
    return static_cast<int>(std::min<int64_t>(f, max_filters));
  }

  void validate() const {
    if (depth_down < 2) throw ConfigError("depth_down must be >= 2");
    if (base_filters < 1 || max_filters < base_filters)
      throw ConfigError("bad filter counts");
    if (image_size < (1 << depth_down))
      throw ConfigError("image_size must be >= 2^depth_down");
  }

  // 8 down / 7 up blocks at 256x256, filters 64..512, ~54M parameters.
  static UNetConfig paper_preset() { return {8, 64, 512, 256, Norm::instance}; }
  // Desk-scale preset: small enough for CPU-bound experiments.
  static UNetConfig desk_preset() { return {4, 16, 512, 64, Norm::none}; }
  // Minimal model used by finite-difference oracles in tests.
  static UNetConfig tiny_preset() { return {2, 4, 512, 8, Norm::none}; }

  static UNetConfig preset(const std::string& name) {
    if (name == "paper") return paper_preset();
    if (name == "desk") return desk_preset();
    if (name == "tiny") return tiny_preset();
    throw ConfigError("unknown model preset: " + name);
  }

  bool operator==(const UNetConfig&) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

// Ordered parameter set; flattening concatenates tensors in declaration
// order, and the round trip is exact.
struct ModelParams {
  std::vector<NamedTensor> tensors;

  int64_t total_params() const {
    int64_t n = 0;
    for (const auto& t : tensors) n += t.value.numel();
    return n;
  }

  std::vector<double> flatten() const {
    std::vector<double> flat;
    flat.reserve(total_params());
    for (const auto& t : tensors) flat.insert(flat.end(), t.value.data.begin(), t.value.data.end());
    return flat;
  }

  void unflatten(const std::vector<double>& flat) {
    if (static_cast<int64_t>(flat.size()) != total_params())
      throw InvalidInput("unflatten: length mismatch");
    size_t off = 0;
    for (auto& t : tensors) {
      std::copy_n(flat.begin() + off, t.value.numel(), t.value.data.begin());
      off += t.value.numel();
    }
  }

  bool all_finite() const {
    for (const auto& t : tensors)
      if (!t.value.all_finite()) return false;
    return true;
  }
};

namespace detail {

enum class ParamKind { conv_w, convt_w, bias, gamma, beta };

struct ParamSpec {
  std::string name;
  Shape shape;
  ParamKind kind;
};

// The single source of truth for parameter order. init_model, the forward
// builder and the checkpoint code all walk this list.
inline std::vector<ParamSpec> param_specs(const UNetConfig& cfg) {
  cfg.validate();
  const int D = cfg.depth_down;
  std::vector<ParamSpec> specs;
  auto norm_pair = [&](const std::string& base, int ch) {
    specs.push_back({base + ".gamma", Shape{ch}, ParamKind::gamma});
    specs.push_back({base + ".beta", Shape{ch}, ParamKind::beta});
  };
  for (int k = 0; k < D; ++k) {
    const int in_ch = k == 0 ? 1 : cfg.filters(k - 1);
    const int out_ch = cfg.filters(k);
    specs.push_back({"down" + std::to_string(k) + ".w", Shape{out_ch, in_ch, 4, 4}, ParamKind::conv_w});
    specs.push_back({"down" + std::to_string(k) + ".b", Shape{out_ch}, ParamKind::bias});
    if (cfg.norm != Norm::none && k >= 1 && k <= D - 2)
      norm_pair("down" + std::to_string(k) + ".norm", out_ch);
  }
  for (int k = D - 1; k >= 0; --k) {
    const int in_ch = k == D - 1 ? cfg.filters(D - 1) : 2 * cfg.filters(k);
    const int out_ch = k == 0 ? 1 : cfg.filters(k - 1);
    specs.push_back({"up" + std::to_string(k) + ".w", Shape{in_ch, out_ch, 4, 4}, ParamKind::convt_w});
    specs.push_back({"up" + std::to_string(k) + ".b", Shape{out_ch}, ParamKind::bias});
    if (cfg.norm != Norm::none && k >= 1)
      norm_pair("up" + std::to_string(k) + ".norm", out_ch);
  }
  return specs;
}

}  // namespace detail

inline int64_t param_count(const UNetConfig& cfg) {
  int64_t n = 0;
  for (const auto& s : detail::param_specs(cfg)) n += ad::shape_numel(s.shape);
  return n;
}

// Deterministic initialization: He-scaled normals for convolution weights
// (fan-in = in_ch * k * k), zero biases, unit/zero norm affines.
inline ModelParams init_model(const UNetConfig& cfg, uint64_t seed) {
  Rng rng(derive_seed(seed, "unet-init"));
  ModelParams params;
  for (const auto& spec : detail::param_specs(cfg)) {
    Tensor t(spec.shape);
    switch (spec.kind) {
      case detail::ParamKind::conv_w:
      case detail::ParamKind::convt_w: {
        // convT weights are stored [from,to,k,k]; fan-in is the "from" side.
        const int fan_in = spec.kind == detail::ParamKind::conv_w
                               ? spec.shape[1] * spec.shape[2] * spec.shape[3]
                               : spec.shape[0] * spec.shape[2] * spec.shape[3];
        const double std = std::sqrt(2.0 / fan_in);
        for (double& v : t.data) v = rng.normal(0.0, std);
        break;
      }
      case detail::ParamKind::bias:
      case detail::ParamKind::beta:
        break;  // zeros
      case detail::ParamKind::gamma:
        std::fill(t.data.begin(), t.data.end(), 1.0);
        break;
    }
    params.tensors.push_back({spec.name, std::move(t)});
  }
  return params;
}

inline std::vector<Var> make_leaves(const ModelParams& params) {
  std::vector<Var> vars;
  vars.reserve(params.tensors.size());
  for (const auto& t : params.tensors) vars.push_back(ad::leaf(t.value));
  return vars;
}

inline std::vector<Var> make_constants(const ModelParams& params) {
  std::vector<Var> vars;
  vars.reserve(params.tensors.size());
  for (const auto& t : params.tensors) vars.push_back(ad::constant(t.value));
  return vars;
}

namespace detail {

inline Var instance_norm(const Var& x, const Var& gamma, const Var& beta) {
  const Shape& s = x->value.shape;
  const int N = s[0], H = s[2], W = s[3];
  const double inv_hw = 1.0 / (static_cast<double>(H) * W);
  Var mu = ad::mul_scalar(ad::sum_hw(x), inv_hw);
  Var centered = ad::sub(x, ad::broadcast_hw(mu, H, W));
  Var var = ad::mul_scalar(ad::sum_hw(ad::mul(centered, centered)), inv_hw);
  Var sd = ad::sqrt_op(ad::add_scalar(var, 1e-5));
  Var normed = ad::div(centered, ad::broadcast_hw(sd, H, W));
  Var scaled = ad::mul(normed, ad::broadcast_channels(gamma, N, H, W));
  return ad::add_bias(scaled, beta);
}

}  // namespace detail

// Build the forward graph. `params` must follow param_specs order (as
// produced by make_leaves/make_constants); x is [N,1,H,W]. Returns logits
// [N,1,H,W].
inline Var unet_forward(const UNetConfig& cfg, const std::vector<Var>& params, const Var& x) {
  cfg.validate();
  const Shape& sx = x->value.shape;
  if (sx.size() != 4 || sx[1] != 1 || sx[2] != cfg.image_size || sx[3] != cfg.image_size)
    throw InvalidInput("unet_forward: input shape does not match config image_size");

  const int D = cfg.depth_down;
  size_t idx = 0;
  auto next = [&]() -> const Var& {
    if (idx >= params.size()) throw InvalidInput("unet_forward: too few parameter tensors");
    return params[idx++];
  };

  std::vector<Var> down(D);
  Var h = x;
  for (int k = 0; k < D; ++k) {
    if (k > 0) h = ad::leaky_relu(h, 0.2);
    const Var& w = next();
    const Var& b = next();
    h = ad::add_bias(ad::conv2d(h, w, 2, 1), b);
    if (cfg.norm != Norm::none && k >= 1 && k <= D - 2) {
      const Var& gamma = next();
      const Var& beta = next();
      h = detail::instance_norm(h, gamma, beta);
    }
    down[k] = h;
  }

  Var up = h;
  for (int k = D - 1; k >= 0; --k) {
    Var in = (k == D - 1) ? down[D - 1] : ad::concat_channels(down[k], up);
    const Var& w = next();
    const Var& b = next();
    up = ad::add_bias(ad::conv_transpose2d(ad::relu(in), w, 2, 1), b);
    if (cfg.norm != Norm::none && k >= 1) {
      const Var& gamma = next();
      const Var& beta = next();
      up = detail::instance_norm(up, gamma, beta);
    }
  }
  if (idx != params.size()) throw InvalidInput("unet_forward: too many parameter tensors");
  return up;  // logits
}

}  // namespace decifr::nn
