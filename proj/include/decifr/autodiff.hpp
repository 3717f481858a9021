#pragma once

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "decifr/tensor.hpp"

// Reverse-mode autodiff on a dynamic tape. Backward functions are expressed
// in terms of tape ops, so gradients are themselves differentiable: calling
// grad() with create_graph=true yields gradient nodes that a second grad()
// can differentiate. That second-order path is what lets the inversion
// attack take d/dx of a loss built from d/dtheta terms.
//
// Activation-function masks (leaky-relu slopes, clamp windows, abs signs)
// enter the tape as constants; their second derivative is zero almost
// everywhere, which is the standard convention.

namespace decifr::ad {

class Node;
using Var = std::shared_ptr<Node>;

// Parent gradients; entries may be null when the corresponding `need` flag
// was false.
using Vjp = std::function<std::vector<Var>(const Var& self, const Var& gy,
                                           const std::vector<char>& need)>;

class Node {
 public:
  Tensor value;
  std::vector<Var> parents;
  Vjp vjp;
  bool requires_grad = false;

  explicit Node(Tensor v) : value(std::move(v)) {}
};

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

// RAII switch for gradient recording. GradMode(false) is a no-grad guard.
class GradMode {
 public:
  explicit GradMode(bool enabled) : prev_(detail::grad_enabled_flag()) {
    detail::grad_enabled_flag() = enabled;
  }
  ~GradMode() { detail::grad_enabled_flag() = prev_; }
  GradMode(const GradMode&) = delete;
  GradMode& operator=(const GradMode&) = delete;

 private:
  bool prev_;
};

inline Var constant(Tensor v) { return std::make_shared<Node>(std::move(v)); }

inline Var scalar(double v) { return constant(Tensor::scalar_of(v)); }

// A differentiable leaf (model parameter or attack image).
inline Var leaf(Tensor v) {
  Var n = std::make_shared<Node>(std::move(v));
  n->requires_grad = true;
  return n;
}

inline Var make_op(Tensor value, std::vector<Var> parents, Vjp vjp) {
  Var n = std::make_shared<Node>(std::move(value));
  if (grad_enabled()) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || (p && p->requires_grad);
    if (rg) {
      n->requires_grad = true;
      n->parents = std::move(parents);
      n->vjp = std::move(vjp);
    }
  }
  return n;
}

// ---------------------------------------------------------------------------
// Elementwise ops. Binary ops accept equal shapes or a scalar on either side.

namespace detail {

inline void check_binary(const Var& a, const Var& b) {
  if (!same_shape(a->value.shape, b->value.shape) && !a->value.is_scalar() &&
      !b->value.is_scalar())
    throw InvalidInput("elementwise op: shape mismatch");
}

template <typename F>
Tensor ew2(const Tensor& a, const Tensor& b, F&& f) {
  const bool as = a.is_scalar(), bs = b.is_scalar();
  Tensor out(as ? b.shape : a.shape);
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out.data[i] = f(a.data[as ? 0 : i], b.data[bs ? 0 : i]);
  return out;
}

template <typename F>
Tensor ew1(const Tensor& a, F&& f) {
  Tensor out(a.shape);
  for (int64_t i = 0; i < a.numel(); ++i) out.data[i] = f(a.data[i]);
  return out;
}

}  // namespace detail

Var add(const Var& a, const Var& b);
Var sum(const Var& a);

// Reduce gradient g to the shape of the corresponding operand (sum when the
// operand was scalar-broadcast).
inline Var reduce_to(const Var& g, const Shape& target) {
  if (same_shape(g->value.shape, target)) return g;
  if (shape_numel(target) == 1) return sum(g);
  throw InvalidInput("reduce_to: unsupported broadcast");
}

inline Var add(const Var& a, const Var& b) {
  detail::check_binary(a, b);
  return make_op(detail::ew2(a->value, b->value, [](double x, double y) { return x + y; }),
                 {a, b}, [](const Var& self, const Var& gy, const std::vector<char>& need) {
                   std::vector<Var> out(2);
                   if (need[0]) out[0] = reduce_to(gy, self->parents[0]->value.shape);
                   if (need[1]) out[1] = reduce_to(gy, self->parents[1]->value.shape);
                   return out;
                 });
}

inline Var neg(const Var& a) {
  return make_op(detail::ew1(a->value, [](double x) { return -x; }), {a},
                 [](const Var&, const Var& gy, const std::vector<char>&) {
                   return std::vector<Var>{neg(gy)};
                 });
}

inline Var sub(const Var& a, const Var& b) {
  detail::check_binary(a, b);
  return make_op(detail::ew2(a->value, b->value, [](double x, double y) { return x - y; }),
                 {a, b}, [](const Var& self, const Var& gy, const std::vector<char>& need) {
                   std::vector<Var> out(2);
                   if (need[0]) out[0] = reduce_to(gy, self->parents[0]->value.shape);
                   if (need[1]) out[1] = reduce_to(neg(gy), self->parents[1]->value.shape);
                   return out;
                 });
}

inline Var mul(const Var& a, const Var& b) {
  detail::check_binary(a, b);
  return make_op(detail::ew2(a->value, b->value, [](double x, double y) { return x * y; }),
                 {a, b}, [](const Var& self, const Var& gy, const std::vector<char>& need) {
                   const Var& pa = self->parents[0];
                   const Var& pb = self->parents[1];
                   std::vector<Var> out(2);
                   if (need[0]) out[0] = reduce_to(mul(gy, pb), pa->value.shape);
                   if (need[1]) out[1] = reduce_to(mul(gy, pa), pb->value.shape);
                   return out;
                 });
}

inline Var div(const Var& a, const Var& b) {
  detail::check_binary(a, b);
  return make_op(detail::ew2(a->value, b->value, [](double x, double y) { return x / y; }),
                 {a, b}, [](const Var& self, const Var& gy, const std::vector<char>& need) {
                   const Var& pa = self->parents[0];
                   const Var& pb = self->parents[1];
                   std::vector<Var> out(2);
                   if (need[0]) out[0] = reduce_to(div(gy, pb), pa->value.shape);
                   if (need[1])
                     out[1] = reduce_to(neg(mul(gy, div(pa, mul(pb, pb)))), pb->value.shape);
                   return out;
                 });
}

inline Var add_scalar(const Var& a, double c) {
  return make_op(detail::ew1(a->value, [c](double x) { return x + c; }), {a},
                 [](const Var&, const Var& gy, const std::vector<char>&) {
                   return std::vector<Var>{gy};
                 });
}

inline Var mul_scalar(const Var& a, double c) {
  return make_op(detail::ew1(a->value, [c](double x) { return x * c; }), {a},
                 [c](const Var&, const Var& gy, const std::vector<char>&) {
                   return std::vector<Var>{mul_scalar(gy, c)};
                 });
}

inline Var abs_op(const Var& a) {
  Tensor mask = detail::ew1(a->value, [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
  return make_op(detail::ew1(a->value, [](double x) { return std::fabs(x); }), {a},
                 [m = std::move(mask)](const Var&, const Var& gy, const std::vector<char>&) {
                   return std::vector<Var>{mul(gy, constant(m))};
                 });
}

inline Var log_op(const Var& a) {
  return make_op(detail::ew1(a->value, [](double x) { return std::log(x); }), {a},
                 [](const Var& self, const Var& gy, const std::vector<char>&) {
                   return std::vector<Var>{div(gy, self->parents[0])};
                 });
}

inline Var sqrt_op(const Var& a) {
  return make_op(detail::ew1(a->value, [](double x) { return std::sqrt(x); }), {a},
                 [](const Var& self, const Var& gy, const std::vector<char>&) {
                   return std::vector<Var>{mul_scalar(div(gy, self), 0.5)};
                 });
}

inline Var sigmoid(const Var& a) {
  auto sig = [](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
  };
  return make_op(detail::ew1(a->value, sig), {a},
                 [](const Var& self, const Var& gy, const std::vector<char>&) {
                   // d sigmoid = s*(1-s), phrased through the output node so
                   // the second-order path sees the full product rule.
                   Var one_minus = add_scalar(neg(self), 1.0);
                   return std::vector<Var>{mul(gy, mul(self, one_minus))};
                 });
}

inline Var leaky_relu(const Var& a, double slope) {
  Tensor mask = detail::ew1(a->value, [slope](double x) { return x > 0 ? 1.0 : slope; });
  return make_op(detail::ew1(a->value, [slope](double x) { return x > 0 ? x : slope * x; }), {a},
                 [m = std::move(mask)](const Var&, const Var& gy, const std::vector<char>&) {
                   return std::vector<Var>{mul(gy, constant(m))};
                 });
}

inline Var relu(const Var& a) { return leaky_relu(a, 0.0); }

inline Var clamp(const Var& a, double lo, double hi) {
  Tensor mask =
      detail::ew1(a->value, [lo, hi](double x) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
  return make_op(
      detail::ew1(a->value, [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); }), {a},
      [m = std::move(mask)](const Var&, const Var& gy, const std::vector<char>&) {
        return std::vector<Var>{mul(gy, constant(m))};
      });
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts.

inline Var broadcast_to(const Var& s, const Shape& shape);

inline Var sum(const Var& a) {
  double acc = 0.0;
  for (double v : a->value.data) acc += v;
  return make_op(Tensor::scalar_of(acc), {a},
                 [](const Var& self, const Var& gy, const std::vector<char>&) {
                   return std::vector<Var>{broadcast_to(gy, self->parents[0]->value.shape)};
                 });
}

inline Var mean(const Var& a) {
  return mul_scalar(sum(a), 1.0 / static_cast<double>(a->value.numel()));
}

inline Var broadcast_to(const Var& s, const Shape& shape) {
  if (!s->value.is_scalar()) throw InvalidInput("broadcast_to expects a scalar");
  return make_op(Tensor::full(shape, s->value.data[0]), {s},
                 [](const Var&, const Var& gy, const std::vector<char>&) {
                   return std::vector<Var>{sum(gy)};
                 });
}

inline Var dot(const Var& a, const Var& b) {
  if (!same_shape(a->value.shape, b->value.shape)) throw InvalidInput("dot: shape mismatch");
  return make_op(Tensor::scalar_of(dot_raw(a->value.data, b->value.data)), {a, b},
                 [](const Var& self, const Var& gy, const std::vector<char>& need) {
                   std::vector<Var> out(2);
                   if (need[0]) out[0] = mul(gy, self->parents[1]);
                   if (need[1]) out[1] = mul(gy, self->parents[0]);
                   return out;
                 });
}

// ---------------------------------------------------------------------------
// Structural ops on [N,C,H,W] activations.

namespace detail {
inline void check4d(const Var& x, const char* who) {
  if (x->value.shape.size() != 4) throw InvalidInput(std::string(who) + ": expected 4D tensor");
}
}  // namespace detail

inline Var sum_spatial(const Var& x);
inline Var broadcast_channels(const Var& b, int n, int h, int w);

// x[N,C,H,W] + b[C]
inline Var add_bias(const Var& x, const Var& b) {
  detail::check4d(x, "add_bias");
  const Shape& s = x->value.shape;
  const int N = s[0], C = s[1], H = s[2], W = s[3];
  if (b->value.shape != Shape{C}) throw InvalidInput("add_bias: bias shape mismatch");
  Tensor out = x->value;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      double bias = b->value.data[c];
      double* p = out.data.data() + (static_cast<int64_t>(n) * C + c) * H * W;
      for (int i = 0; i < H * W; ++i) p[i] += bias;
    }
  return make_op(std::move(out), {x, b},
                 [](const Var&, const Var& gy, const std::vector<char>& need) {
                   std::vector<Var> out(2);
                   if (need[0]) out[0] = gy;
                   if (need[1]) out[1] = sum_spatial(gy);
                   return out;
                 });
}

inline Var sum_spatial(const Var& x) {
  detail::check4d(x, "sum_spatial");
  const Shape& s = x->value.shape;
  const int N = s[0], C = s[1], HW = s[2] * s[3];
  Tensor out(Shape{C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* p = x->value.data.data() + (static_cast<int64_t>(n) * C + c) * HW;
      double acc = 0.0;
      for (int i = 0; i < HW; ++i) acc += p[i];
      out.data[c] += acc;
    }
  return make_op(std::move(out), {x},
                 [N = s[0], H = s[2], W = s[3]](const Var&, const Var& gy,
                                                const std::vector<char>&) {
                   return std::vector<Var>{broadcast_channels(gy, N, H, W)};
                 });
}

inline Var broadcast_channels(const Var& b, int n, int h, int w) {
  const int C = b->value.shape.at(0);
  Tensor out(Shape{n, C, h, w});
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < C; ++c) {
      double v = b->value.data[c];
      double* p = out.data.data() + (static_cast<int64_t>(i) * C + c) * h * w;
      for (int k = 0; k < h * w; ++k) p[k] = v;
    }
  return make_op(std::move(out), {b},
                 [](const Var&, const Var& gy, const std::vector<char>&) {
                   return std::vector<Var>{sum_spatial(gy)};
                 });
}

inline Var sum_hw(const Var& x);
inline Var broadcast_hw(const Var& t, int h, int w);

// [N,C,H,W] -> [N,C], summing spatial dims (instance-norm building block).
inline Var sum_hw(const Var& x) {
  detail::check4d(x, "sum_hw");
  const Shape& s = x->value.shape;
  const int N = s[0], C = s[1], HW = s[2] * s[3];
  Tensor out(Shape{N, C});
  for (int i = 0; i < N * C; ++i) {
    const double* p = x->value.data.data() + static_cast<int64_t>(i) * HW;
    double acc = 0.0;
    for (int k = 0; k < HW; ++k) acc += p[k];
    out.data[i] = acc;
  }
  return make_op(std::move(out), {x},
                 [H = s[2], W = s[3]](const Var&, const Var& gy, const std::vector<char>&) {
                   return std::vector<Var>{broadcast_hw(gy, H, W)};
                 });
}

inline Var broadcast_hw(const Var& t, int h, int w) {
  if (t->value.shape.size() != 2) throw InvalidInput("broadcast_hw expects [N,C]");
  const int N = t->value.shape[0], C = t->value.shape[1];
  Tensor out(Shape{N, C, h, w});
  for (int i = 0; i < N * C; ++i) {
    double v = t->value.data[i];
    double* p = out.data.data() + static_cast<int64_t>(i) * h * w;
    for (int k = 0; k < h * w; ++k) p[k] = v;
  }
  return make_op(std::move(out), {t},
                 [](const Var&, const Var& gy, const std::vector<char>&) {
                   return std::vector<Var>{sum_hw(gy)};
                 });
}

inline Var slice_channels(const Var& x, int c0, int c1);
inline Var pad_channels(const Var& x, int before, int after);

inline Var concat_channels(const Var& a, const Var& b) {
  detail::check4d(a, "concat_channels");
  detail::check4d(b, "concat_channels");
  const Shape& sa = a->value.shape;
  const Shape& sb = b->value.shape;
  if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
    throw InvalidInput("concat_channels: spatial/batch mismatch");
  const int N = sa[0], Ca = sa[1], Cb = sb[1], HW = sa[2] * sa[3];
  Tensor out(Shape{N, Ca + Cb, sa[2], sa[3]});
  for (int n = 0; n < N; ++n) {
    std::copy_n(a->value.data.data() + static_cast<int64_t>(n) * Ca * HW, Ca * HW,
                out.data.data() + static_cast<int64_t>(n) * (Ca + Cb) * HW);
    std::copy_n(b->value.data.data() + static_cast<int64_t>(n) * Cb * HW, Cb * HW,
                out.data.data() + (static_cast<int64_t>(n) * (Ca + Cb) + Ca) * HW);
  }
  return make_op(std::move(out), {a, b},
                 [Ca, Cb](const Var&, const Var& gy, const std::vector<char>& need) {
                   std::vector<Var> out(2);
                   if (need[0]) out[0] = slice_channels(gy, 0, Ca);
                   if (need[1]) out[1] = slice_channels(gy, Ca, Ca + Cb);
                   return out;
                 });
}

inline Var slice_channels(const Var& x, int c0, int c1) {
  detail::check4d(x, "slice_channels");
  const Shape& s = x->value.shape;
  const int N = s[0], C = s[1], HW = s[2] * s[3];
  if (c0 < 0 || c1 > C || c0 >= c1) throw InvalidInput("slice_channels: bad range");
  Tensor out(Shape{N, c1 - c0, s[2], s[3]});
  for (int n = 0; n < N; ++n)
    std::copy_n(x->value.data.data() + (static_cast<int64_t>(n) * C + c0) * HW,
                static_cast<int64_t>(c1 - c0) * HW,
                out.data.data() + static_cast<int64_t>(n) * (c1 - c0) * HW);
  return make_op(std::move(out), {x},
                 [c0, C, c1](const Var&, const Var& gy, const std::vector<char>&) {
                   return std::vector<Var>{pad_channels(gy, c0, C - c1)};
                 });
}

inline Var pad_channels(const Var& x, int before, int after) {
  detail::check4d(x, "pad_channels");
  const Shape& s = x->value.shape;
  const int N = s[0], C = s[1], HW = s[2] * s[3];
  Tensor out(Shape{N, before + C + after, s[2], s[3]});
  for (int n = 0; n < N; ++n)
    std::copy_n(x->value.data.data() + static_cast<int64_t>(n) * C * HW,
                static_cast<int64_t>(C) * HW,
                out.data.data() + (static_cast<int64_t>(n) * (before + C + after) + before) * HW);
  return make_op(std::move(out), {x},
                 [before, C](const Var&, const Var& gy, const std::vector<char>&) {
                   return std::vector<Var>{slice_channels(gy, before, before + C)};
                 });
}

inline Var pad2d(const Var& x, int top, int bottom, int left, int right);

inline Var crop2d(const Var& x, int top, int bottom, int left, int right) {
  detail::check4d(x, "crop2d");
  const Shape& s = x->value.shape;
  const int N = s[0], C = s[1], H = s[2], W = s[3];
  const int OH = H - top - bottom, OW = W - left - right;
  if (OH <= 0 || OW <= 0) throw InvalidInput("crop2d: empty result");
  Tensor out(Shape{N, C, OH, OW});
  for (int nc = 0; nc < N * C; ++nc)
    for (int y = 0; y < OH; ++y)
      std::copy_n(x->value.data.data() + (static_cast<int64_t>(nc) * H + y + top) * W + left, OW,
                  out.data.data() + (static_cast<int64_t>(nc) * OH + y) * OW);
  return make_op(std::move(out), {x},
                 [top, bottom, left, right](const Var&, const Var& gy, const std::vector<char>&) {
                   return std::vector<Var>{pad2d(gy, top, bottom, left, right)};
                 });
}

inline Var pad2d(const Var& x, int top, int bottom, int left, int right) {
  detail::check4d(x, "pad2d");
  const Shape& s = x->value.shape;
  const int N = s[0], C = s[1], H = s[2], W = s[3];
  const int OH = H + top + bottom, OW = W + left + right;
  Tensor out(Shape{N, C, OH, OW});
  for (int nc = 0; nc < N * C; ++nc)
    for (int y = 0; y < H; ++y)
      std::copy_n(x->value.data.data() + (static_cast<int64_t>(nc) * H + y) * W, W,
                  out.data.data() + (static_cast<int64_t>(nc) * OH + y + top) * OW + left);
  return make_op(std::move(out), {x},
                 [top, bottom, left, right](const Var&, const Var& gy, const std::vector<char>&) {
                   return std::vector<Var>{crop2d(gy, top, bottom, left, right)};
                 });
}

// ---------------------------------------------------------------------------
// Convolution family. Three kernels closed under differentiation:
//   conv2d          : x[N,Ci,H,W] * w[Co,Ci,K,K] -> y[N,Co,OH,OW]
//   conv_transpose2d: z[N,Cf,H,W] * w[Cf,Ct,K,K] -> y[N,Ct,(H-1)S-2P+K,..]
//   conv2d_wgrad    : (x, gy) -> dW[Co,Ci,K,K]
// with vjps expressed through each other.

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using CMapRM = Eigen::Map<const RowMat>;

// col[(c*K+kh)*K+kw, oh*OW+ow] over the conv-input geometry (C,H,W).
inline void im2col(const double* x, int C, int H, int W, int K, int S, int P, int OH, int OW,
                   double* col) {
  const int64_t cols = static_cast<int64_t>(OH) * OW;
  for (int c = 0; c < C; ++c)
    for (int kh = 0; kh < K; ++kh)
      for (int kw = 0; kw < K; ++kw) {
        double* row = col + ((static_cast<int64_t>(c) * K + kh) * K + kw) * cols;
        for (int oh = 0; oh < OH; ++oh) {
          const int ih = oh * S - P + kh;
          if (ih < 0 || ih >= H) {
            std::fill_n(row + static_cast<int64_t>(oh) * OW, OW, 0.0);
            continue;
          }
          const double* src = x + (static_cast<int64_t>(c) * H + ih) * W;
          for (int ow = 0; ow < OW; ++ow) {
            const int iw = ow * S - P + kw;
            row[static_cast<int64_t>(oh) * OW + ow] = (iw < 0 || iw >= W) ? 0.0 : src[iw];
          }
        }
      }
}

inline void col2im_acc(const double* col, int C, int H, int W, int K, int S, int P, int OH, int OW,
                       double* x) {
  const int64_t cols = static_cast<int64_t>(OH) * OW;
  for (int c = 0; c < C; ++c)
    for (int kh = 0; kh < K; ++kh)
      for (int kw = 0; kw < K; ++kw) {
        const double* row = col + ((static_cast<int64_t>(c) * K + kh) * K + kw) * cols;
        for (int oh = 0; oh < OH; ++oh) {
          const int ih = oh * S - P + kh;
          if (ih < 0 || ih >= H) continue;
          double* dst = x + (static_cast<int64_t>(c) * H + ih) * W;
          for (int ow = 0; ow < OW; ++ow) {
            const int iw = ow * S - P + kw;
            if (iw >= 0 && iw < W) dst[iw] += row[static_cast<int64_t>(oh) * OW + ow];
          }
        }
      }
}

inline int conv_out(int in, int K, int S, int P) { return (in + 2 * P - K) / S + 1; }
inline int convt_out(int in, int K, int S, int P) { return (in - 1) * S - 2 * P + K; }

}  // namespace detail

inline Var conv2d(const Var& x, const Var& w, int stride, int pad);
inline Var conv_transpose2d(const Var& z, const Var& w, int stride, int pad);
inline Var conv2d_wgrad(const Var& x, const Var& gy, int stride, int pad, int k);

inline Var conv2d(const Var& x, const Var& w, int stride, int pad) {
  detail::check4d(x, "conv2d");
  detail::check4d(w, "conv2d weights");
  const Shape& sx = x->value.shape;
  const Shape& sw = w->value.shape;
  const int N = sx[0], C = sx[1], H = sx[2], W = sx[3];
  const int O = sw[0], K = sw[2];
  if (sw[1] != C || sw[3] != K) throw InvalidInput("conv2d: weight shape mismatch");
  const int OH = detail::conv_out(H, K, stride, pad), OW = detail::conv_out(W, K, stride, pad);
  Tensor out(Shape{N, O, OH, OW});
  std::vector<double> col(static_cast<size_t>(C) * K * K * OH * OW);
  detail::CMapRM Wm(w->value.data.data(), O, static_cast<int64_t>(C) * K * K);
  for (int n = 0; n < N; ++n) {
    detail::im2col(x->value.data.data() + static_cast<int64_t>(n) * C * H * W, C, H, W, K, stride,
                   pad, OH, OW, col.data());
    detail::CMapRM Cm(col.data(), static_cast<int64_t>(C) * K * K, static_cast<int64_t>(OH) * OW);
    detail::MapRM Ym(out.data.data() + static_cast<int64_t>(n) * O * OH * OW, O,
                     static_cast<int64_t>(OH) * OW);
    Ym.noalias() = Wm * Cm;
  }
  return make_op(std::move(out), {x, w},
                 [stride, pad, K](const Var& self, const Var& gy, const std::vector<char>& need) {
                   const Var& px = self->parents[0];
                   const Var& pw = self->parents[1];
                   std::vector<Var> out(2);
                   if (need[0]) out[0] = conv_transpose2d(gy, pw, stride, pad);
                   if (need[1]) out[1] = conv2d_wgrad(px, gy, stride, pad, K);
                   return out;
                 });
}

inline Var conv_transpose2d(const Var& z, const Var& w, int stride, int pad) {
  detail::check4d(z, "conv_transpose2d");
  detail::check4d(w, "conv_transpose2d weights");
  const Shape& sz = z->value.shape;
  const Shape& sw = w->value.shape;
  const int N = sz[0], F = sz[1], H = sz[2], W = sz[3];
  const int T = sw[1], K = sw[2];
  if (sw[0] != F || sw[3] != K) throw InvalidInput("conv_transpose2d: weight shape mismatch");
  const int OH = detail::convt_out(H, K, stride, pad), OW = detail::convt_out(W, K, stride, pad);
  if (OH <= 0 || OW <= 0) throw InvalidInput("conv_transpose2d: empty output");
  Tensor out(Shape{N, T, OH, OW});
  std::vector<double> col(static_cast<size_t>(T) * K * K * H * W);
  detail::CMapRM Wm(w->value.data.data(), F, static_cast<int64_t>(T) * K * K);
  for (int n = 0; n < N; ++n) {
    detail::CMapRM Zm(z->value.data.data() + static_cast<int64_t>(n) * F * H * W, F,
                      static_cast<int64_t>(H) * W);
    detail::MapRM Cm(col.data(), static_cast<int64_t>(T) * K * K, static_cast<int64_t>(H) * W);
    Cm.noalias() = Wm.transpose() * Zm;
    detail::col2im_acc(col.data(), T, OH, OW, K, stride, pad, H, W,
                       out.data.data() + static_cast<int64_t>(n) * T * OH * OW);
  }
  return make_op(std::move(out), {z, w},
                 [stride, pad, K](const Var& self, const Var& gy, const std::vector<char>& need) {
                   const Var& pz = self->parents[0];
                   const Var& pw = self->parents[1];
                   // <g, convT(z,w)> = <conv(g,w), z> => dz = conv(g,w), dw = wgrad(g,z).
                   std::vector<Var> out(2);
                   if (need[0]) out[0] = conv2d(gy, pw, stride, pad);
                   if (need[1]) out[1] = conv2d_wgrad(gy, pz, stride, pad, K);
                   return out;
                 });
}

inline Var conv2d_wgrad(const Var& x, const Var& gy, int stride, int pad, int k) {
  detail::check4d(x, "conv2d_wgrad");
  detail::check4d(gy, "conv2d_wgrad");
  const Shape& sx = x->value.shape;
  const Shape& sg = gy->value.shape;
  const int N = sx[0], C = sx[1], H = sx[2], W = sx[3];
  const int O = sg[1], OH = sg[2], OW = sg[3];
  if (sg[0] != N) throw InvalidInput("conv2d_wgrad: batch mismatch");
  Tensor out(Shape{O, C, k, k});
  std::vector<double> col(static_cast<size_t>(C) * k * k * OH * OW);
  detail::MapRM Dw(out.data.data(), O, static_cast<int64_t>(C) * k * k);
  for (int n = 0; n < N; ++n) {
    detail::im2col(x->value.data.data() + static_cast<int64_t>(n) * C * H * W, C, H, W, k, stride,
                   pad, OH, OW, col.data());
    detail::CMapRM Cm(col.data(), static_cast<int64_t>(C) * k * k, static_cast<int64_t>(OH) * OW);
    detail::CMapRM Gm(gy->value.data.data() + static_cast<int64_t>(n) * O * OH * OW, O,
                      static_cast<int64_t>(OH) * OW);
    Dw.noalias() += Gm * Cm.transpose();
  }
  return make_op(std::move(out), {x, gy},
                 [stride, pad](const Var& self, const Var& g, const std::vector<char>& need) {
                   const Var& px = self->parents[0];
                   const Var& pgy = self->parents[1];
                   // dW = sum_n x (.) gy  =>  dx = convT(gy, G), dgy = conv(x, G).
                   std::vector<Var> out(2);
                   if (need[0]) out[0] = conv_transpose2d(pgy, g, stride, pad);
                   if (need[1]) out[1] = conv2d(px, g, stride, pad);
                   return out;
                 });
}

// ---------------------------------------------------------------------------
// Backward pass.

// Gradient of a scalar root w.r.t. each of `wrt`. With create_graph the
// returned nodes are differentiable again (double backprop). Branches of the
// graph that cannot reach any `wrt` node are skipped.
inline std::vector<Var> grad(const Var& root, const std::vector<Var>& wrt, bool create_graph) {
  if (!root) throw InvalidInput("grad: null root");
  if (root->value.numel() != 1) throw InvalidInput("grad: root must be scalar");

  // Post-order over the requires_grad subgraph: parents precede children.
  std::vector<Var> topo;
  std::unordered_set<const Node*> visited;
  if (root->requires_grad) {
    std::vector<std::pair<Var, size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root.get());
    while (!stack.empty()) {
      auto& [v, idx] = stack.back();
      if (idx < v->parents.size()) {
        Var p = v->parents[idx++];
        if (p && p->requires_grad && visited.insert(p.get()).second)
          stack.emplace_back(std::move(p), 0);
      } else {
        topo.push_back(v);
        stack.pop_back();
      }
    }
  }

  // A node is needed iff some wrt leaf is reachable from it.
  std::unordered_set<const Node*> wrt_set;
  for (const auto& w : wrt) wrt_set.insert(w.get());
  std::unordered_map<const Node*, char> needed;
  needed.reserve(topo.size());
  for (const auto& v : topo) {
    char n = wrt_set.count(v.get()) ? 1 : 0;
    if (!n)
      for (const auto& p : v->parents)
        if (p && needed.count(p.get()) && needed[p.get()]) {
          n = 1;
          break;
        }
    needed[v.get()] = n;
  }

  std::unordered_map<const Node*, Var> gmap;
  {
    GradMode guard(create_graph);
    gmap[root.get()] = constant(Tensor::full(root->value.shape, 1.0));
    std::vector<char> need;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
      const Var& v = *it;
      if (!needed[v.get()] || !v->vjp) continue;
      auto gi = gmap.find(v.get());
      if (gi == gmap.end()) continue;
      need.assign(v->parents.size(), 0);
      bool any = false;
      for (size_t i = 0; i < v->parents.size(); ++i) {
        const Var& p = v->parents[i];
        need[i] = (p && p->requires_grad && needed[p.get()]) ? 1 : 0;
        any = any || need[i];
      }
      if (!any) continue;
      std::vector<Var> pg = v->vjp(v, gi->second, need);
      if (pg.size() != v->parents.size()) throw Error("vjp arity mismatch");
      for (size_t i = 0; i < v->parents.size(); ++i) {
        if (!need[i] || !pg[i]) continue;
        const Var& p = v->parents[i];
        auto [pi, inserted] = gmap.try_emplace(p.get(), pg[i]);
        if (!inserted) pi->second = add(pi->second, pg[i]);
      }
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto it = gmap.find(w.get());
    out.push_back(it != gmap.end() ? it->second : constant(Tensor::zeros(w->value.shape)));
  }
  return out;
}

}  // namespace decifr::ad
