#pragma once

#include <functional>
#include <span>
#include <vector>

#include "decifr/unet.hpp"

namespace decifr::nn {

inline constexpr double kBceEps = 1e-7;

struct Prediction {
  ImageGrid logits;
  ImageGrid probs;  // sigmoid of logits, in (0,1)
};

struct Sample {
  ImageGrid image01;  // intensities scaled to [0,1]
  MaskGrid mask;
};

// [H,W] grid -> [1,1,H,W] tensor.
inline Tensor image_to_tensor(const ImageGrid& img) {
  Tensor t(Shape{1, 1, img.height(), img.width()});
  std::copy(img.raw().begin(), img.raw().end(), t.data.begin());
  return t;
}

inline ImageGrid tensor_to_image(const Tensor& t) {
  const Shape& s = t.shape;
  if (s.size() != 4 || s[0] != 1 || s[1] != 1) throw InvalidInput("tensor_to_image: expected [1,1,H,W]");
  ImageGrid img(s[2], s[3]);
  std::copy(t.data.begin(), t.data.end(), img.raw().begin());
  return img;
}

// Stack samples into a batch tensor [N,1,H,W] (+ the matching mask tensor).
inline Tensor batch_images(std::span<const Sample> batch) {
  const int H = batch[0].image01.height(), W = batch[0].image01.width();
  Tensor t(Shape{static_cast<int>(batch.size()), 1, H, W});
  for (size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].image01.height() != H || batch[i].image01.width() != W)
      throw InvalidInput("batch_images: inconsistent sample shapes");
    std::copy(batch[i].image01.raw().begin(), batch[i].image01.raw().end(),
              t.data.begin() + static_cast<int64_t>(i) * H * W);
  }
  return t;
}

inline Tensor batch_masks(std::span<const Sample> batch) {
  const int H = batch[0].mask.height(), W = batch[0].mask.width();
  Tensor t(Shape{static_cast<int>(batch.size()), 1, H, W});
  for (size_t i = 0; i < batch.size(); ++i)
    for (size_t j = 0; j < batch[i].mask.size(); ++j)
      t.data[static_cast<int64_t>(i) * H * W + j] = batch[i].mask.raw()[j];
  return t;
}

inline Tensor mask_to_tensor(const MaskGrid& m) {
  Tensor t(Shape{1, 1, m.height(), m.width()});
  for (size_t j = 0; j < m.size(); ++j) t.data[j] = m.raw()[j];
  return t;
}

// Mean pixel-wise binary cross-entropy on probabilities clamped to
// [eps, 1-eps]. Graph form, differentiable (twice) in `logits`.
inline Var bce_from_logits(const Var& logits, const Tensor& mask) {
  if (!ad::same_shape(logits->value.shape, mask.shape))
    throw InvalidInput("bce_from_logits: shape mismatch");
  Var p = ad::clamp(ad::sigmoid(logits), kBceEps, 1.0 - kBceEps);
  Var y = ad::constant(mask);
  Tensor ones_minus(mask.shape);
  for (int64_t i = 0; i < mask.numel(); ++i) ones_minus.data[i] = 1.0 - mask.data[i];
  Var term = ad::add(ad::mul(y, ad::log_op(p)),
                     ad::mul(ad::constant(std::move(ones_minus)), ad::log_op(ad::add_scalar(ad::neg(p), 1.0))));
  return ad::neg(ad::mean(term));
}

// Value-level forward pass for a single image.
inline Prediction forward(const UNetConfig& cfg, const ModelParams& params, const ImageGrid& image01) {
  ad::GradMode off(false);
  Var logits = unet_forward(cfg, make_constants(params), ad::constant(image_to_tensor(image01)));
  Prediction pred;
  pred.logits = tensor_to_image(logits->value);
  pred.probs = pred.logits.map<double>([](double z) {
    return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  });
  return pred;
}

// Value-level segmentation loss on a prediction's probability map.
inline double seg_loss(const Prediction& pred, const MaskGrid& mask) {
  if (pred.probs.height() != mask.height() || pred.probs.width() != mask.width())
    throw InvalidInput("seg_loss: shape mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < mask.size(); ++i) {
    double p = std::clamp(pred.probs.raw()[i], kBceEps, 1.0 - kBceEps);
    double y = mask.raw()[i];
    acc += y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
  }
  return -acc / static_cast<double>(mask.size());
}

// Mean gradient of the segmentation loss over a batch, flattened to one
// vector of length P (parameter order of param_specs).
inline std::vector<double> param_grad(const UNetConfig& cfg, const ModelParams& params,
                                      std::span<const Sample> batch) {
  if (batch.empty()) throw InvalidInput("param_grad: empty batch");
  std::vector<Var> leaves = make_leaves(params);
  Var x = ad::constant(batch_images(batch));
  Var loss = bce_from_logits(unet_forward(cfg, leaves, x), batch_masks(batch));
  std::vector<Var> grads = ad::grad(loss, leaves, /*create_graph=*/false);
  std::vector<double> flat;
  flat.reserve(params.total_params());
  for (const auto& g : grads) flat.insert(flat.end(), g->value.data.begin(), g->value.data.end());
  return flat;
}

// Batch loss value (used by the training loop's loss trace).
inline double batch_loss(const UNetConfig& cfg, const ModelParams& params,
                         std::span<const Sample> batch) {
  ad::GradMode off(false);
  Var loss = bce_from_logits(unet_forward(cfg, make_constants(params), ad::constant(batch_images(batch))),
                             batch_masks(batch));
  return loss->value.scalar();
}

// Gradient of a scalar-valued function of the dummy image with respect to
// the image pixels. The callable may itself evaluate parameter gradients
// (built with create_graph) -- that is the second-order contract the
// inversion attack relies on.
inline Tensor input_gradient(const std::function<Var(const Var&)>& scalar_fn, const Tensor& x0) {
  Var x = ad::leaf(x0);
  Var y = scalar_fn(x);
  if (y->value.numel() != 1) throw InvalidInput("input_gradient: function must return a scalar");
  if (!y->requires_grad)
    throw InvalidInput(
        "input_gradient: result does not depend differentiably on the input; "
        "an inner gradient may have been taken without create_graph");
  return ad::grad(y, {x}, /*create_graph=*/false)[0]->value;
}

}  // namespace decifr::nn
