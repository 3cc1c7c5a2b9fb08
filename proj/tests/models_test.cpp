#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "morphdiff/backbone.hpp"
#include "morphdiff/bae.hpp"
#include "morphdiff/ftie.hpp"
#include "morphdiff/gradcheck.hpp"

using namespace morphdiff;
using T = Tensor<double>;

namespace {

T random_image(Rng& rng, std::int64_t h = 16, std::int64_t w = 16) { return rng.uniform_tensor<double>({1, h, w}, 0.0, 1.0); }

double max_abs_diff(const T& a, const T& b) {
  double m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

// ------------------------------------------------------------------ F-TIE

TEST(Ftie, NoAuxImagesGivesProjectionBias) {
  Rng rng(3);
  FtieModule<double> ftie(FtieConfig{}, rng);
  const T c2 = ftie.build_guidance({});
  ASSERT_EQ(c2.shape(), (Shape{64}));
  const T bias = ftie.projection().bias();
  for (std::int64_t i = 0; i < 64; ++i) EXPECT_EQ(c2[i], bias[i]);
}

TEST(Ftie, ProjectionMatchesHandAffineMap) {
  Rng rng(4);
  FtieModule<double> ftie(FtieConfig{}, rng);
  const std::vector<T> imgs{random_image(rng), random_image(rng)};
  std::vector<double> z;
  for (const auto& img : imgs) {
    const T f = ftie.encode_image(img);
    z.insert(z.end(), f.data().begin(), f.data().end());
  }
  z.resize(96, 0.0);
  const T w = ftie.projection().weight(), b = ftie.projection().bias();
  const T c2 = ftie.build_guidance(imgs);
  for (std::int64_t o = 0; o < 64; ++o) {
    double expect = b[o];
    for (std::int64_t i = 0; i < 96; ++i) expect += w[o * 96 + i] * z[static_cast<std::size_t>(i)];
    EXPECT_NEAR(c2[o], expect, 1e-12);
  }
}

TEST(Ftie, GuidanceIsAffineInEachSlot) {
  // c2({a, b}) - c2({}) == (c2({a}) - c2({})) + (c2({_, b}) - c2({}))
  Rng rng(5);
  FtieModule<double> ftie(FtieConfig{}, rng);
  const T a = random_image(rng), b = random_image(rng);
  const T none = ftie.build_guidance({});
  const T both = ftie.build_guidance({a, b});
  const T only_a = ftie.build_guidance_slots({a, std::nullopt, std::nullopt});
  const T only_b = ftie.build_guidance_slots({std::nullopt, b, std::nullopt});
  for (std::int64_t i = 0; i < 64; ++i) EXPECT_NEAR(both[i] - none[i], (only_a[i] - none[i]) + (only_b[i] - none[i]), 1e-5);
}

TEST(Ftie, TooManyImagesNamesTheLimit) {
  Rng rng(6);
  FtieModule<double> ftie(FtieConfig{}, rng);
  std::vector<T> imgs(4, random_image(rng));
  try {
    ftie.build_guidance(imgs);
    FAIL() << "expected DomainError";
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("N = 3"), std::string::npos) << e.what();
  }
}

TEST(Ftie, RejectsBadImageShape) {
  Rng rng(7);
  FtieModule<double> ftie(FtieConfig{}, rng);
  EXPECT_THROW(ftie.encode_image(rng.uniform_tensor<double>({2, 16, 16}, 0, 1)), ShapeError);
  EXPECT_THROW(ftie.encode_image(rng.uniform_tensor<double>({1, 18, 16}, 0, 1)), ShapeError);
}

TEST(Ftie, DeterministicForSeed) {
  Rng r1(8), r2(8), data(9);
  FtieModule<double> f1(FtieConfig{}, r1), f2(FtieConfig{}, r2);
  const std::vector<T> imgs{random_image(data), random_image(data), random_image(data)};
  const T a = f1.build_guidance(imgs), b = f2.build_guidance(imgs);
  EXPECT_EQ(a.shape(), (Shape{64}));
  EXPECT_EQ(max_abs_diff(a, b), 0.0);
}

TEST(Ftie, EncoderGradients) {
  Rng rng(10);
  FtieModule<double> ftie(FtieConfig{}, rng);
  const T img = random_image(rng, 8, 8);
  const T w = rng.normal_tensor<double>({64});
  NamedParams<double> params;
  ftie.collect(params);
  std::vector<T> leaves{img};
  for (auto& [name, p] : params) leaves.push_back(p);
  const auto r = check_gradients<double>([&] { return sum(mul(ftie.build_guidance({img}), w)); }, leaves, 1e-5, 0.3, 1);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Ftie, ParameterNames) {
  Rng rng(11);
  FtieModule<double> ftie(FtieConfig{}, rng);
  NamedParams<double> params;
  ftie.collect(params);
  std::set<std::string> names;
  for (const auto& [name, p] : params) names.insert(name);
  for (const char* n : {"ftie.enc.conv1.w", "ftie.enc.conv2.b", "ftie.enc.head.w", "ftie.proj.w", "ftie.proj.b"}) {
    EXPECT_TRUE(names.count(n)) << n;
  }
}

// -------------------------------------------------------------- embedding

TEST(Embedding, ZeroStepAlternatesZeroOne) {
  const T e = sinusoidal_embedding<double>(0.0, 8);
  for (std::int64_t i = 0; i < 8; ++i) EXPECT_EQ(e[i], i % 2 == 0 ? 0.0 : 1.0);
}

TEST(Embedding, FrequenciesFollowGeometricLadder) {
  const T e = sinusoidal_embedding<double>(3.0, 6);
  for (int i = 0; i < 3; ++i) {
    const double f = std::pow(10000.0, -2.0 * i / 6.0);
    EXPECT_NEAR(e[2 * i], std::sin(3.0 * f), 1e-15);
    EXPECT_NEAR(e[2 * i + 1], std::cos(3.0 * f), 1e-15);
  }
  EXPECT_THROW(sinusoidal_embedding<double>(1.0, 5), ShapeError);
}

TEST(Embedding, DistinctStepAgePairsGiveDistinctEmbeddings) {
  Rng rng(12);
  UnetConfig cfg;
  cfg.base = 4;
  DiffKanUnet<double> net(cfg, rng);
  std::vector<T> seen;
  std::set<std::pair<int, double>> pairs;
  while (pairs.size() < 100) pairs.insert({static_cast<int>(rng.uniform_int(1, 1000)), rng.uniform()});
  for (const auto& [t, age] : pairs) {
    const T e = net.embed_step_age(t, age);
    for (const auto& prev : seen) ASSERT_GT(max_abs_diff(e, prev), 1e-9);
    seen.push_back(e);
  }
}

// -------------------------------------------------------------- attention

TEST(CrossAttention, IdentityAtInit) {
  Rng rng(13);
  CrossAttention<double> attn(4, 6, rng);
  const T x = rng.normal_tensor<double>({4, 3, 5});
  const T c2 = rng.normal_tensor<double>({6});
  EXPECT_EQ(max_abs_diff(attn(x, c2), x), 0.0);
}

TEST(CrossAttention, SingleTokenHandFormula) {
  // One key means every pixel attends fully to it: out = x + Wo Wv c2 + bo.
  Rng rng(14);
  CrossAttention<double> attn(2, 2, rng);
  auto& o = attn.output_projection();
  const double wo[4] = {0.5, -1.0, 2.0, 0.25}, bo[2] = {0.1, -0.2};
  for (int i = 0; i < 4; ++i) o.weight().mutable_data()[i] = wo[i];
  for (int i = 0; i < 2; ++i) o.bias().mutable_data()[i] = bo[i];
  NamedParams<double> params;
  attn.collect(params, "a");
  T wv;
  for (auto& [name, p] : params) {
    if (name == "a.v.w") wv = p;
  }
  ASSERT_TRUE(wv.defined());
  const T x({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  const T c2({2}, {0.3, -0.7});
  const double v[2] = {wv[0] * 0.3 + wv[1] * -0.7, wv[2] * 0.3 + wv[3] * -0.7};
  const double add[2] = {wo[0] * v[0] + wo[1] * v[1] + bo[0], wo[2] * v[0] + wo[3] * v[1] + bo[1]};
  const T y = attn(x, c2);
  for (int c = 0; c < 2; ++c) {
    for (int p = 0; p < 4; ++p) EXPECT_NEAR(y[c * 4 + p], x[c * 4 + p] + add[c], 1e-12);
  }
}

TEST(CrossAttention, GradientWrtGuidance) {
  Rng rng(15);
  CrossAttention<double> attn(4, 6, rng);
  for (auto& w : attn.output_projection().weight().mutable_data()) w = rng.normal();
  const T x = rng.normal_tensor<double>({4, 3, 3});
  const T c2 = rng.normal_tensor<double>({6});
  const T w = rng.normal_tensor<double>({4, 3, 3});
  const auto r = check_gradients<double>([&] { return sum(mul(attn(x, c2), w)); }, {c2, x}, 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-5);
}

// --------------------------------------------------------------- denoiser

TEST(Denoiser, OutputShapeAt64) {
  Rng rng(16);
  DiffKanUnet<float> net(UnetConfig{}, rng);
  const Tensor<float> phi = rng.normal_tensor<float>({2, 64, 64});
  const Tensor<float> c1 = rng.uniform_tensor<float>({1, 64, 64}, 0, 1);
  NoGradGuard no_grad;
  const Tensor<float> eps = net(phi, c1, 10, 0.4, rng.normal_tensor<float>({64}));
  EXPECT_EQ(eps.shape(), (Shape{2, 64, 64}));
  EXPECT_TRUE(all_finite(eps));
}

TEST(Denoiser, DependsOnSourceImage) {
  Rng rng(17);
  UnetConfig cfg;
  cfg.base = 8;
  DiffKanUnet<double> net(cfg, rng);
  const T phi = rng.normal_tensor<double>({2, 16, 16});
  const T c2 = rng.normal_tensor<double>({64});
  const T a = net(phi, random_image(rng), 5, 0.5, c2);
  const T b = net(phi, random_image(rng), 5, 0.5, c2);
  EXPECT_GT(max_abs_diff(a, b), 1e-6);
}

TEST(Denoiser, ShapeErrors) {
  Rng rng(18);
  UnetConfig cfg;
  cfg.base = 4;
  DiffKanUnet<double> net(cfg, rng);
  const T c2 = rng.normal_tensor<double>({64});
  EXPECT_THROW(net(rng.normal_tensor<double>({3, 16, 16}), random_image(rng), 1, 0.5, c2), ShapeError);
  EXPECT_THROW(net(rng.normal_tensor<double>({2, 16, 16}), random_image(rng, 8, 8), 1, 0.5, c2), ShapeError);
  EXPECT_THROW(net(rng.normal_tensor<double>({2, 18, 18}), random_image(rng, 18, 18), 1, 0.5, c2), ShapeError);
  EXPECT_THROW(net(rng.normal_tensor<double>({2, 16, 16}), random_image(rng), 1, 0.5), ShapeError);
}

TEST(Denoiser, PlainVariantIgnoresGuidance) {
  Rng rng(19);
  UnetConfig cfg;
  cfg.base = 4;
  cfg.use_kan = false;
  cfg.use_ftie = false;
  DiffKanUnet<double> net(cfg, rng);
  NamedParams<double> params;
  net.collect(params);
  for (const auto& [name, p] : params) {
    EXPECT_EQ(name.find(".kan."), std::string::npos) << name;
    EXPECT_EQ(name.find(".attn."), std::string::npos) << name;
  }
  const T y = net(rng.normal_tensor<double>({2, 8, 8}), random_image(rng, 8, 8), 3, 0.2);
  EXPECT_EQ(y.shape(), (Shape{2, 8, 8}));
}

TEST(Denoiser, SampledParameterGradients) {
  Rng rng(20);
  UnetConfig cfg;
  cfg.base = 8;
  DiffKanUnet<double> net(cfg, rng);
  // A non-zero output projection so the attention path carries gradient.
  for (auto& w : net.attention().output_projection().weight().mutable_data()) w = 0.1 * rng.normal();
  const T phi = rng.normal_tensor<double>({2, 16, 16});
  const T c1 = random_image(rng);
  const T c2 = rng.normal_tensor<double>({64});
  const T w = rng.normal_tensor<double>({2, 16, 16});
  NamedParams<double> params;
  net.collect(params);
  std::vector<T> leaves{phi, c2};
  for (auto& [name, p] : params) leaves.push_back(p);
  const auto r = check_gradients<double>([&] { return sum(mul(net(phi, c1, 7, 0.3, c2), w)); }, leaves, 1e-5, 0.01, 2);
  EXPECT_LT(r.max_rel_error, 1e-2) << "worst analytic " << r.worst_analytic << " numeric " << r.worst_numeric;
}

// ------------------------------------------------------------- age critic

TEST(AgeCritic, DeterministicAndFinite) {
  Rng r1(21), r2(21);
  BaeModel<float> a(r1), b(r2);
  const Tensor<float> zero = Tensor<float>::zeros({1, 64, 64});
  EXPECT_TRUE(std::isfinite(a.predict_age(zero)));
  EXPECT_EQ(a.predict_age(zero), b.predict_age(zero));
  EXPECT_EQ(a(zero).shape(), Shape{});
  EXPECT_THROW(a(Tensor<float>::zeros({2, 8, 8})), ShapeError);
}

TEST(AgeCritic, FrozenCriticPassesGradientToInputOnly) {
  Rng rng(22);
  BaeModel<double> critic(rng);
  critic.freeze();
  EXPECT_TRUE(critic.frozen());
  NamedParams<double> params;
  critic.collect(params);
  const T img = random_image(rng).set_requires_grad(true);
  backward(critic(img));
  EXPECT_TRUE(img.has_grad());
  for (const auto& [name, p] : params) {
    EXPECT_FALSE(p.requires_grad()) << name;
    EXPECT_FALSE(p.has_grad()) << name;
  }
}

TEST(AgeCritic, InputGradientMatchesFiniteDifferences) {
  Rng rng(23);
  BaeModel<double> critic(rng);
  const double err = finite_difference_check<double>([&](const T& x) { return critic(x); }, random_image(rng, 8, 8), 1e-5);
  EXPECT_LT(err, 1e-4);
}

TEST(AgeCritic, TrainingLearnsSizeToAgeMap) {
  // Discs whose radius encodes age; a short run must beat the constant predictor.
  std::vector<AgeExample<float>> data;
  Rng rng(24);
  for (int s = 0; s < 20; ++s) {
    for (int k = 0; k < 3; ++k) {
      const double age = rng.uniform(40, 90);
      const double r = 2.0 + (age - 40) / 10.0;
      std::vector<float> v(16 * 16);
      for (int y = 0; y < 16; ++y) {
        for (int x = 0; x < 16; ++x) v[y * 16 + x] = std::hypot(x - 7.5, y - 7.5) < r ? 1.0f : 0.0f;
      }
      data.push_back({Tensor<float>({1, 16, 16}, v), age, "subj" + std::to_string(s)});
    }
  }
  BaeTrainOptions opt;
  opt.epochs = 30;
  opt.lr = 3e-3;
  opt.noise_levels = {0.0};
  opt.seed = 1;
  const auto res = train_bae(data, opt);
  EXPECT_EQ(res.train_size + res.val_size, data.size());
  EXPECT_EQ(res.val_size % 3, 0u);
  EXPECT_TRUE(res.model.frozen());
  EXPECT_LT(res.clean_mae, 8.0);
}
