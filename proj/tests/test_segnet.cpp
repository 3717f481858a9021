#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "decifr/checkpoint.hpp"
#include "decifr/segnet.hpp"
#include "decifr/unet.hpp"
#include "test_util.hpp"

using namespace decifr;
using ad::Tensor;
using ad::Var;
using nn::UNetConfig;
using testutil::rel_err;
using testutil::rel_l2_err;

namespace {

// Golden value recorded at first build (tiny preset, seeds 2024/77).
constexpr double kGoldenTinyMeanAbsLogit = 0.23767381729793438;

ImageGrid random_image(int size, uint64_t seed) {
  Rng rng(seed);
  ImageGrid img(size, size);
  for (double& v : img.raw()) v = rng.uniform();
  return img;
}

MaskGrid random_mask(int size, uint64_t seed) {
  Rng rng(seed);
  MaskGrid m(size, size);
  for (auto& v : m.raw()) v = rng.uniform() < 0.3 ? 1 : 0;
  return m;
}

}  // namespace

TEST(UNetConfig, ValidationRejectsBadShapes) {
  UNetConfig cfg = UNetConfig::desk_preset();
  cfg.image_size = 8;  // < 2^4
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_THROW(UNetConfig::preset("giant"), ConfigError);
  EXPECT_EQ(UNetConfig::paper_preset().depth_up(), 7);
  EXPECT_EQ(UNetConfig::desk_preset().depth_up(), 3);
}

TEST(UNetParams, PaperPresetParameterCountNearFiftyFourMillion) {
  const int64_t count = nn::param_count(UNetConfig::paper_preset());
  EXPECT_GE(count, 50'000'000);
  EXPECT_LE(count, 58'000'000);
}

TEST(UNetParams, DeskPresetParameterCountFrozen) {
  const int64_t count = nn::param_count(UNetConfig::desk_preset());
  EXPECT_EQ(count, 386'145);
  EXPECT_LT(count, 2'000'000);
  nn::ModelParams p = nn::init_model(UNetConfig::desk_preset(), 1);
  EXPECT_EQ(p.total_params(), count);
}

TEST(UNetParams, InitIsDeterministicUnderSeed) {
  const UNetConfig cfg = UNetConfig::tiny_preset();
  nn::ModelParams a = nn::init_model(cfg, 99);
  nn::ModelParams b = nn::init_model(cfg, 99);
  nn::ModelParams c = nn::init_model(cfg, 100);
  ASSERT_EQ(a.tensors.size(), b.tensors.size());
  for (size_t i = 0; i < a.tensors.size(); ++i)
    EXPECT_EQ(a.tensors[i].value.data, b.tensors[i].value.data) << a.tensors[i].name;
  bool any_diff = false;
  for (size_t i = 0; i < a.tensors.size(); ++i)
    any_diff = any_diff || a.tensors[i].value.data != c.tensors[i].value.data;
  EXPECT_TRUE(any_diff);
}

TEST(UNetParams, FlattenUnflattenRoundTripsExactly) {
  const UNetConfig cfg = UNetConfig::tiny_preset();
  nn::ModelParams p = nn::init_model(cfg, 7);
  std::vector<double> flat = p.flatten();
  ASSERT_EQ(static_cast<int64_t>(flat.size()), p.total_params());
  nn::ModelParams q = nn::init_model(cfg, 8);
  q.unflatten(flat);
  for (size_t i = 0; i < p.tensors.size(); ++i)
    EXPECT_EQ(p.tensors[i].value.data, q.tensors[i].value.data);
  std::vector<double> bad(flat.size() + 1, 0.0);
  EXPECT_THROW(q.unflatten(bad), InvalidInput);
}

TEST(UNetForward, ZeroFinalLayerGivesZeroLogitsAndHalfProbabilities) {
  const UNetConfig cfg = UNetConfig::tiny_preset();
  nn::ModelParams p = nn::init_model(cfg, 3);
  for (auto& t : p.tensors)
    if (t.name == "up0.w" || t.name == "up0.b")
      std::fill(t.value.data.begin(), t.value.data.end(), 0.0);
  nn::Prediction pred = nn::forward(cfg, p, random_image(cfg.image_size, 5));
  for (double v : pred.logits.raw()) EXPECT_EQ(v, 0.0);
  for (double v : pred.probs.raw()) EXPECT_EQ(v, 0.5);
}

TEST(UNetForward, OutputShapeMatchesInputAndRejectsMismatch) {
  const UNetConfig cfg = UNetConfig::tiny_preset();
  nn::ModelParams p = nn::init_model(cfg, 3);
  nn::Prediction pred = nn::forward(cfg, p, random_image(cfg.image_size, 6));
  EXPECT_EQ(pred.logits.height(), cfg.image_size);
  EXPECT_EQ(pred.logits.width(), cfg.image_size);
  for (double v : pred.logits.raw()) EXPECT_TRUE(std::isfinite(v));
  for (double v : pred.probs.raw()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  EXPECT_THROW(nn::forward(cfg, p, random_image(cfg.image_size * 2, 6)), InvalidInput);
}

TEST(UNetForward, BitStableAcrossRunsAndGoldenRegression) {
  const UNetConfig cfg = UNetConfig::tiny_preset();
  nn::ModelParams p = nn::init_model(cfg, 2024);
  ImageGrid img = random_image(cfg.image_size, 77);
  nn::Prediction a = nn::forward(cfg, p, img);
  nn::Prediction b = nn::forward(cfg, p, img);
  EXPECT_EQ(a.logits.raw(), b.logits.raw());

  double mean_abs = 0.0;
  for (double v : a.logits.raw()) mean_abs += std::fabs(v);
  mean_abs /= static_cast<double>(a.logits.size());
  EXPECT_NEAR(mean_abs, kGoldenTinyMeanAbsLogit, 1e-9);
}

TEST(UNetForward, InstanceNormVariantRunsAndStaysFinite) {
  UNetConfig cfg = UNetConfig::tiny_preset();
  cfg.norm = nn::Norm::instance;
  nn::ModelParams p = nn::init_model(cfg, 4);
  EXPECT_GT(p.total_params(), nn::param_count(UNetConfig::tiny_preset()));
  nn::Prediction pred = nn::forward(cfg, p, random_image(cfg.image_size, 9));
  for (double v : pred.logits.raw()) EXPECT_TRUE(std::isfinite(v));
}

TEST(SegLoss, PerfectPredictionHasNearZeroLoss) {
  MaskGrid mask = random_mask(8, 11);
  nn::Prediction pred;
  pred.probs = mask.map<double>([](uint8_t v) { return static_cast<double>(v); });
  pred.logits = pred.probs;  // unused by seg_loss
  EXPECT_LE(nn::seg_loss(pred, mask), 1e-6);
}

TEST(SegLoss, UniformHalfProbabilityGivesLn2) {
  MaskGrid mask = random_mask(8, 13);
  nn::Prediction pred;
  pred.probs = ImageGrid(8, 8, 0.5);
  pred.logits = ImageGrid(8, 8, 0.0);
  EXPECT_NEAR(nn::seg_loss(pred, mask), std::log(2.0), 1e-12);
}

TEST(SegLoss, HandComputedTwoByTwoCase) {
  // p=[[0.9,0.1],[0.8,0.2]], y=[[1,0],[1,0]] -> -mean(ln .9, ln .9, ln .8, ln .8)
  nn::Prediction pred;
  pred.probs = ImageGrid(2, 2);
  pred.probs.at(0, 0) = 0.9;
  pred.probs.at(0, 1) = 0.1;
  pred.probs.at(1, 0) = 0.8;
  pred.probs.at(1, 1) = 0.2;
  pred.logits = pred.probs;
  MaskGrid y(2, 2, 0);
  y.at(0, 0) = 1;
  y.at(1, 0) = 1;
  const double oracle = -(std::log(0.9) + std::log(0.9) + std::log(0.8) + std::log(0.8)) / 4.0;
  EXPECT_NEAR(nn::seg_loss(pred, y), oracle, 1e-12);
  EXPECT_NEAR(oracle, 0.1642, 1e-4);
}

TEST(SegLoss, NonNegativeOnRandomInputs) {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    nn::Prediction pred;
    pred.probs = ImageGrid(4, 4);
    for (double& v : pred.probs.raw()) v = rng.uniform();
    pred.logits = pred.probs;
    EXPECT_GE(nn::seg_loss(pred, random_mask(4, trial)), 0.0);
  }
}

TEST(ParamGrad, ExactPredictionHasTinyGradient) {
  // Saturated-correct model: final layer forced to a large negative bias and
  // an all-background mask. The clamp window zeroes the gradient.
  const UNetConfig cfg = UNetConfig::tiny_preset();
  nn::ModelParams p = nn::init_model(cfg, 21);
  for (auto& t : p.tensors) {
    if (t.name == "up0.w") std::fill(t.value.data.begin(), t.value.data.end(), 0.0);
    if (t.name == "up0.b") std::fill(t.value.data.begin(), t.value.data.end(), -40.0);
  }
  nn::Sample s{random_image(cfg.image_size, 23), MaskGrid(cfg.image_size, cfg.image_size, 0)};
  std::vector<double> g = nn::param_grad(cfg, p, std::span<const nn::Sample>(&s, 1));
  EXPECT_LE(ad::l2_norm(g), 1e-5);
}

TEST(ParamGrad, MatchesCentralFiniteDifferences) {
  const UNetConfig cfg = UNetConfig::tiny_preset();
  nn::ModelParams p = nn::init_model(cfg, 29);
  std::vector<nn::Sample> batch{{random_image(cfg.image_size, 31), random_mask(cfg.image_size, 33)}};
  std::vector<double> g = nn::param_grad(cfg, p, batch);
  std::vector<double> flat = p.flatten();

  Rng pick(35);
  nn::ModelParams scratch = p;
  auto loss_at = [&](const std::vector<double>& theta) {
    scratch.unflatten(theta);
    return nn::batch_loss(cfg, scratch, batch);
  };
  for (int k = 0; k < 20; ++k) {
    const int64_t i = pick.uniform_int(0, static_cast<int>(flat.size() - 1));
    std::vector<double> t = flat;
    t[i] = flat[i] + 1e-4;
    const double fp = loss_at(t);
    t[i] = flat[i] - 1e-4;
    const double fm = loss_at(t);
    const double fd = (fp - fm) / 2e-4;
    EXPECT_LT(std::fabs(g[i] - fd), 1e-3 * std::max(1.0, std::fabs(fd))) << "param " << i;
  }
}

TEST(ParamGrad, DuplicatedSampleEqualsSingletonBatch) {
  const UNetConfig cfg = UNetConfig::tiny_preset();
  nn::ModelParams p = nn::init_model(cfg, 37);
  nn::Sample s{random_image(cfg.image_size, 39), random_mask(cfg.image_size, 41)};
  std::vector<nn::Sample> one{s};
  std::vector<nn::Sample> two{s, s};
  std::vector<double> g1 = nn::param_grad(cfg, p, one);
  std::vector<double> g2 = nn::param_grad(cfg, p, two);
  ASSERT_EQ(g1.size(), g2.size());
  for (size_t i = 0; i < g1.size(); ++i) EXPECT_DOUBLE_EQ(g1[i], g2[i]);
}

TEST(ParamGrad, LinearInBatchWeighting) {
  const UNetConfig cfg = UNetConfig::tiny_preset();
  nn::ModelParams p = nn::init_model(cfg, 43);
  nn::Sample a{random_image(cfg.image_size, 45), random_mask(cfg.image_size, 47)};
  nn::Sample b{random_image(cfg.image_size, 49), random_mask(cfg.image_size, 51)};
  std::vector<nn::Sample> ab{a, b};
  std::vector<double> gab = nn::param_grad(cfg, p, ab);
  std::vector<double> ga = nn::param_grad(cfg, p, std::span<const nn::Sample>(&a, 1));
  std::vector<double> gb = nn::param_grad(cfg, p, std::span<const nn::Sample>(&b, 1));
  std::vector<double> mean(ga.size());
  for (size_t i = 0; i < ga.size(); ++i) mean[i] = 0.5 * (ga[i] + gb[i]);
  EXPECT_LT(rel_l2_err(gab, mean), 1e-12);
}

TEST(InputGrad, SumOfPixelsHasUnitGradient) {
  Tensor x0 = Tensor::full({1, 1, 4, 4}, 0.3);
  Tensor g = nn::input_gradient([](const Var& x) { return ad::sum(x); }, x0);
  for (double v : g.data) EXPECT_EQ(v, 1.0);
}

TEST(InputGrad, ConstantImageHasZeroTotalVariationGradient) {
  Tensor x0 = Tensor::full({1, 1, 6, 6}, 0.42);
  auto tv = [](const Var& x) {
    Var dv = ad::sub(ad::crop2d(x, 1, 0, 0, 0), ad::crop2d(x, 0, 1, 0, 0));
    Var dh = ad::sub(ad::crop2d(x, 0, 0, 1, 0), ad::crop2d(x, 0, 0, 0, 1));
    return ad::add(ad::mean(ad::abs_op(dv)), ad::mean(ad::abs_op(dh)));
  };
  Tensor g = nn::input_gradient(tv, x0);
  for (double v : g.data) EXPECT_EQ(v, 0.0);
}

TEST(InputGrad, RejectsNonDifferentiableResult) {
  Tensor x0 = Tensor::full({1, 1, 4, 4}, 0.5);
  EXPECT_THROW(nn::input_gradient([](const Var&) { return ad::scalar(1.0); }, x0), InvalidInput);
  EXPECT_THROW(nn::input_gradient([](const Var& x) { return ad::mul(x, x); }, x0), InvalidInput);
}

// Gradient of a gradient-matching term w.r.t. the input image, validated
// against finite differences (the second-order contract).
TEST(InputGrad, GradMatchingTermMatchesFiniteDifferences) {
  const UNetConfig cfg = UNetConfig::tiny_preset();
  nn::ModelParams params = nn::init_model(cfg, 53);
  MaskGrid guide = random_mask(cfg.image_size, 55);
  nn::Sample target_sample{random_image(cfg.image_size, 57), guide};
  std::vector<double> target =
      nn::param_grad(cfg, params, std::span<const nn::Sample>(&target_sample, 1));

  auto l_grad = [&](const Var& x) {
    std::vector<Var> leaves = nn::make_leaves(params);
    Var loss = nn::bce_from_logits(nn::unet_forward(cfg, leaves, x), nn::mask_to_tensor(guide));
    std::vector<Var> gs = ad::grad(loss, leaves, /*create_graph=*/true);
    Var acc = ad::scalar(0.0);
    size_t off = 0;
    for (const auto& g : gs) {
      Tensor t(g->value.shape);
      std::copy_n(target.begin() + off, t.numel(), t.data.begin());
      off += t.numel();
      Var d = ad::sub(g, ad::constant(std::move(t)));
      acc = ad::add(acc, ad::sum(ad::mul(d, d)));
    }
    return ad::mul_scalar(acc, 1.0 / static_cast<double>(target.size()));
  };

  Tensor x0 = nn::image_to_tensor(random_image(cfg.image_size, 59));
  Tensor gx = nn::input_gradient(l_grad, x0);

  auto value = [&](const Tensor& t) {
    Var x = ad::leaf(t);
    return l_grad(x)->value.scalar();
  };
  Rng pick(61);
  for (int k = 0; k < 10; ++k) {
    const int64_t i = pick.uniform_int(0, static_cast<int>(x0.numel() - 1));
    const double fd = testutil::central_diff(value, x0, i, 1e-3);
    EXPECT_LT(rel_err(gx.data[i], fd), 1e-2) << "pixel " << i;
  }
}

TEST(Checkpoint, SaveLoadRoundTripsBitExactly) {
  const UNetConfig cfg = UNetConfig::tiny_preset();
  nn::ModelParams p = nn::init_model(cfg, 63);
  nn::CheckpointMeta meta{cfg, 17, 63};
  const std::string path = ::testing::TempDir() + "roundtrip.ckpt";
  nn::save_checkpoint(path, p, meta);
  nn::CheckpointMeta got;
  nn::ModelParams q = nn::load_checkpoint(path, &got);
  EXPECT_EQ(got.round, 17);
  EXPECT_EQ(got.config, cfg);
  ASSERT_EQ(p.tensors.size(), q.tensors.size());
  for (size_t i = 0; i < p.tensors.size(); ++i) {
    EXPECT_EQ(p.tensors[i].name, q.tensors[i].name);
    EXPECT_EQ(p.tensors[i].value.data, q.tensors[i].value.data);
  }
}

TEST(Checkpoint, FlatExportWritesSidecarTable) {
  const UNetConfig cfg = UNetConfig::tiny_preset();
  nn::ModelParams p = nn::init_model(cfg, 65);
  const std::string bin = ::testing::TempDir() + "flat.f32";
  const std::string sidecar = ::testing::TempDir() + "flat.json";
  nn::export_flat_f32(p, bin, sidecar);
  std::ifstream is(bin, std::ios::binary | std::ios::ate);
  ASSERT_TRUE(is.good());
  EXPECT_EQ(is.tellg(), static_cast<std::streamoff>(p.total_params() * sizeof(float)));
  std::ifstream js(sidecar);
  nlohmann::json j = nlohmann::json::parse(js);
  EXPECT_EQ(j.at("total").get<int64_t>(), p.total_params());
  EXPECT_TRUE(j.at("tensors").contains("down0.w"));
}
