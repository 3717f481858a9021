#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "decifr/grid.hpp"

// Phase 3: reconstruction quality as the membership signal. Reconstructions
// are binarized (Gaussian blur, Otsu threshold, morphological opening then
// closing), Dice-scored against their guiding layout, classified against the
// pooled mean threshold, and summarized into attack metrics.

namespace decifr::mia {

struct PostprocConfig {
  int blur_kernel = 5;
  double blur_sigma = 1.0;
  int morph_kernel = 3;
};

struct BinarizeResult {
  MaskGrid mask;
  int otsu_threshold = 0;  // histogram bin; foreground iff bin > threshold
  int morph_kernel = 3;
  bool degenerate = false;  // constant input; mask forced all-background
};

namespace detail {

// Separable Gaussian blur, replicate border.
inline ImageGrid gaussian_blur(const ImageGrid& img, int ksize, double sigma) {
  const int r = ksize / 2;
  std::vector<double> w(ksize);
  double norm = 0.0;
  for (int i = 0; i < ksize; ++i) {
    const double d = i - r;
    w[i] = std::exp(-0.5 * d * d / (sigma * sigma));
    norm += w[i];
  }
  for (double& v : w) v /= norm;

  const int H = img.height(), W = img.width();
  ImageGrid tmp(H, W), out(H, W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double acc = 0.0;
      for (int k = -r; k <= r; ++k) acc += w[k + r] * img.at(y, std::clamp(x + k, 0, W - 1));
      tmp.at(y, x) = acc;
    }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double acc = 0.0;
      for (int k = -r; k <= r; ++k) acc += w[k + r] * tmp.at(std::clamp(y + k, 0, H - 1), x);
      out.at(y, x) = acc;
    }
  return out;
}

// Otsu's threshold over a 256-bin histogram: the cut t maximizing the
// between-class variance, class 0 = bins <= t. First maximizer wins.
inline int otsu_threshold(const std::array<int64_t, 256>& hist) {
  int64_t total = 0;
  double sum_all = 0.0;
  for (int i = 0; i < 256; ++i) {
    total += hist[i];
    sum_all += static_cast<double>(i) * hist[i];
  }
  int best_t = 0;
  double best_var = -1.0;
  int64_t w0 = 0;
  double sum0 = 0.0;
  for (int t = 0; t < 255; ++t) {
    w0 += hist[t];
    sum0 += static_cast<double>(t) * hist[t];
    const int64_t w1 = total - w0;
    if (w0 == 0 || w1 == 0) continue;
    const double mu0 = sum0 / w0;
    const double mu1 = (sum_all - sum0) / w1;
    const double var = static_cast<double>(w0) * static_cast<double>(w1) * (mu0 - mu1) * (mu0 - mu1);
    if (var > best_var) {
      best_var = var;
      best_t = t;
    }
  }
  return best_t;
}

// Morphology with a square structuring element. Out-of-bounds neighbors are
// ignored for erosion (treated as foreground) and contribute nothing to
// dilation.
inline MaskGrid erode(const MaskGrid& m, int k) {
  const int r = k / 2, H = m.height(), W = m.width();
  MaskGrid out(H, W, 0);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      uint8_t keep = 1;
      for (int dy = -r; dy <= r && keep; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
          if (!m.at(yy, xx)) {
            keep = 0;
            break;
          }
        }
      out.at(y, x) = keep && m.at(y, x);
    }
  return out;
}

inline MaskGrid dilate(const MaskGrid& m, int k) {
  const int r = k / 2, H = m.height(), W = m.width();
  MaskGrid out(H, W, 0);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      uint8_t on = 0;
      for (int dy = -r; dy <= r && !on; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
          if (m.at(yy, xx)) {
            on = 1;
            break;
          }
        }
      out.at(y, x) = on;
    }
  return out;
}

inline MaskGrid opening(const MaskGrid& m, int k) { return dilate(erode(m, k), k); }
inline MaskGrid closing(const MaskGrid& m, int k) { return erode(dilate(m, k), k); }

}  // namespace detail

// Reconstruction image (values in [0,1] or [0,255]) to binary mask:
// 5x5 Gaussian blur, Otsu threshold on the 256-bin histogram, morphological
// opening then closing (3x3 square element). A constant input has no Otsu
// cut; it maps to an all-background mask flagged degenerate.
inline BinarizeResult binarize(const ImageGrid& img, const PostprocConfig& cfg = {}) {
  double maxv = 0.0;
  for (double v : img.raw()) maxv = std::max(maxv, v);
  const double scale = maxv <= 1.0 ? 255.0 : 1.0;

  ImageGrid blurred = detail::gaussian_blur(img, cfg.blur_kernel, cfg.blur_sigma);

  std::array<int64_t, 256> hist{};
  std::vector<int> bins(blurred.size());
  for (size_t i = 0; i < blurred.size(); ++i) {
    const int b = static_cast<int>(std::clamp(std::lround(blurred.raw()[i] * scale), 0L, 255L));
    bins[i] = b;
    ++hist[b];
  }

  BinarizeResult out;
  out.morph_kernel = cfg.morph_kernel;
  int nonzero_bins = 0;
  for (int64_t h : hist) nonzero_bins += (h > 0);
  if (nonzero_bins <= 1) {
    out.mask = MaskGrid(img.height(), img.width(), 0);
    out.degenerate = true;
    return out;
  }

  out.otsu_threshold = detail::otsu_threshold(hist);
  MaskGrid m(img.height(), img.width(), 0);
  for (size_t i = 0; i < bins.size(); ++i) m.raw()[i] = bins[i] > out.otsu_threshold ? 1 : 0;
  out.mask = detail::closing(detail::opening(m, cfg.morph_kernel), cfg.morph_kernel);
  return out;
}

// Dice coefficient 2|A^B| / (|A|+|B|); 1.0 when both masks are empty.
inline double dice(const MaskGrid& a, const MaskGrid& b) {
  if (!a.same_shape(b)) throw InvalidInput("dice: shape mismatch");
  int64_t inter = 0, size_a = 0, size_b = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    const bool va = a.raw()[i] != 0, vb = b.raw()[i] != 0;
    inter += (va && vb);
    size_a += va;
    size_b += vb;
  }
  if (size_a + size_b == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(size_a + size_b);
}

struct ScoredItem {
  std::string id;
  double score = 0.0;
  bool member_truth = false;
};

struct Verdict {
  std::string id;
  double score = 0.0;
  bool member_pred = false;
  bool member_truth = false;
};

struct ClassifyResult {
  double threshold = 0.0;  // pooled mean T
  std::vector<Verdict> verdicts;
};

// Mean-threshold rule: T = arithmetic mean of all pooled scores; member iff
// score > T (strict; ties classify as non-member).
inline ClassifyResult mean_threshold_classify(const std::vector<ScoredItem>& items) {
  if (items.size() < 2) throw InsufficientData("mean_threshold_classify needs >= 2 scores");
  double sum = 0.0;
  for (const auto& s : items) sum += s.score;
  ClassifyResult out;
  out.threshold = sum / static_cast<double>(items.size());
  for (const auto& s : items)
    out.verdicts.push_back({s.id, s.score, s.score > out.threshold, s.member_truth});
  return out;
}

struct AttackReport {
  double threshold = 0.0;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double auc = 0.0;
  std::vector<std::pair<double, double>> roc;  // (fpr, tpr), fpr non-decreasing
  int64_t tp = 0, fp = 0, tn = 0, fn = 0;
};

// ROC by sweeping the decision threshold over all unique score values
// (member iff score > theta), AUC by trapezoidal integration. Confusion
// metrics are taken at the mean-threshold verdicts.
inline AttackReport attack_metrics(const ClassifyResult& classified) {
  int64_t pos = 0, neg = 0;
  for (const auto& v : classified.verdicts) (v.member_truth ? pos : neg) += 1;
  if (pos == 0 || neg == 0)
    throw InsufficientData("attack_metrics: AUC undefined with a single ground-truth class");

  AttackReport rep;
  rep.threshold = classified.threshold;
  for (const auto& v : classified.verdicts) {
    if (v.member_pred && v.member_truth) ++rep.tp;
    else if (v.member_pred && !v.member_truth) ++rep.fp;
    else if (!v.member_pred && v.member_truth) ++rep.fn;
    else ++rep.tn;
  }
  const double n = static_cast<double>(classified.verdicts.size());
  rep.accuracy = static_cast<double>(rep.tp + rep.tn) / n;
  rep.precision = (rep.tp + rep.fp) > 0
                      ? static_cast<double>(rep.tp) / static_cast<double>(rep.tp + rep.fp)
                      : 0.0;
  rep.recall = static_cast<double>(rep.tp) / static_cast<double>(pos);

  std::vector<Verdict> sorted = classified.verdicts;
  std::sort(sorted.begin(), sorted.end(),
            [](const Verdict& a, const Verdict& b) { return a.score > b.score; });
  rep.roc.emplace_back(0.0, 0.0);
  int64_t tp = 0, fp = 0;
  size_t i = 0;
  while (i < sorted.size()) {
    const double s = sorted[i].score;
    while (i < sorted.size() && sorted[i].score == s) {
      (sorted[i].member_truth ? tp : fp) += 1;
      ++i;
    }
    rep.roc.emplace_back(static_cast<double>(fp) / neg, static_cast<double>(tp) / pos);
  }
  double auc = 0.0;
  for (size_t j = 1; j < rep.roc.size(); ++j)
    auc += (rep.roc[j].first - rep.roc[j - 1].first) *
           (rep.roc[j].second + rep.roc[j - 1].second) * 0.5;
  rep.auc = auc;
  return rep;
}

}  // namespace decifr::mia
