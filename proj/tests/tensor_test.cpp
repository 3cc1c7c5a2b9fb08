#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "morphdiff/gradcheck.hpp"
#include "morphdiff/io.hpp"
#include "morphdiff/ops.hpp"
#include "morphdiff/rng.hpp"

using namespace morphdiff;
using T = Tensor<double>;
using F = Tensor<float>;

namespace {

std::vector<double> values(const T& t) { return {t.data().begin(), t.data().end()}; }

T random(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) { return rng.uniform_tensor<double>(shape, lo, hi); }

}  // namespace

TEST(Elementwise, AddsVectors) {
  const T a({2}, {1, 2});
  const T b({2}, {3, 4});
  EXPECT_EQ(values(add(a, b)), (std::vector<double>{4, 6}));
}

TEST(Elementwise, MultiplyByZeroGivesZeroGradient) {
  T x({3}, {1.5, -2.0, 4.0}, true);
  const T zero = T::scalar(0.0);
  const T y = mul(x, zero);
  EXPECT_EQ(values(y), (std::vector<double>{0, 0, 0}));
  backward(sum(y));
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Elementwise, SiluValues) {
  const T x({2}, {0.0, 10.0});
  const T y = silu(x);
  EXPECT_EQ(y[0], 0.0);
  // 10 * sigmoid(10) = 10 / (1 + e^-10)
  EXPECT_NEAR(y[1], 9.99955, 1e-5);
}

TEST(Elementwise, ShapeMismatchNamesBothShapes) {
  const T a({2, 3}, std::vector<double>(6, 1.0));
  const T b({3, 2}, std::vector<double>(6, 1.0));
  try {
    (void)add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos);
    EXPECT_NE(msg.find("[3, 2]"), std::string::npos);
  }
}

TEST(Elementwise, DomainErrors) {
  const T neg({2}, {1.0, -1.0});
  EXPECT_THROW((void)morphdiff::sqrt(neg), DomainError);
  EXPECT_THROW((void)morphdiff::log(neg), DomainError);
}

TEST(Elementwise, ScalarBroadcastIsAssociativeForPowersOfTwo) {
  Rng rng(3);
  const T a = random(rng, {17});
  for (double s : {0.25, 2.0, 8.0}) {
    for (double t : {0.5, 4.0}) {
      const T lhs = mul(mul(a, T::scalar(s)), T::scalar(t));
      const T rhs = mul(a, mul(T::scalar(s), T::scalar(t)));
      EXPECT_EQ(values(lhs), values(rhs));
    }
  }
}

TEST(Matmul, IdentityAndHandProduct) {
  const T eye({2, 2}, {1, 0, 0, 1});
  const T x({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(values(matmul(eye, x)), values(x));
  const T a({2, 2}, {1, 2, 3, 4});
  const T ones({2, 1}, {1, 1});
  const T y = matmul(a, ones);
  EXPECT_EQ(y.shape(), (Shape{2, 1}));
  EXPECT_EQ(values(y), (std::vector<double>{3, 7}));
}

TEST(Matmul, DimensionMismatchThrows) {
  const T a({2, 3}, std::vector<double>(6, 1.0));
  EXPECT_THROW((void)matmul(a, a), ShapeError);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  T a = random(rng, {3, 4});
  T b = random(rng, {4, 2});
  const auto r = check_gradients<double>([&] { return sum(square(matmul(a, b))); }, {a, b});
  EXPECT_LT(r.max_rel_error, 1e-3);
}

TEST(Conv2d, IdentityKernelLeavesInputUnchanged) {
  Rng rng(1);
  const T x = random(rng, {1, 3, 3});
  const T k({1, 1, 1, 1}, {1.0});
  EXPECT_EQ(values(conv2d(x, k, 1, 0)), values(x));
}

TEST(Conv2d, StridedOnesKernel) {
  const T x = T::full({1, 4, 4}, 1.0);
  const T k = T::full({1, 1, 2, 2}, 1.0);
  const T y = conv2d(x, k, 2, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 2, 2}));
  EXPECT_EQ(values(y), (std::vector<double>{4, 4, 4, 4}));
}

TEST(Conv2d, NonIntegralOutputThrows) {
  const T x = T::full({1, 5, 5}, 1.0);
  const T k = T::full({1, 1, 2, 2}, 1.0);
  EXPECT_THROW((void)conv2d(x, k, 2, 0), ShapeError);
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  T x = random(rng, {2, 5, 5});
  T k = random(rng, {3, 2, 3, 3});
  const T w = random(rng, {3, 5, 5});
  const auto r = check_gradients<double>([&] { return sum(mul(conv2d(x, k, 1, 1), w)); }, {x, k});
  EXPECT_LT(r.max_rel_error, 1e-3);
  const T w2 = random(rng, {3, 2, 2});
  const auto strided = check_gradients<double>([&] { return sum(mul(conv2d(x, k, 2, 0), w2)); }, {x, k});
  EXPECT_LT(strided.max_rel_error, 1e-3);
}

TEST(Resample, DownUpExamples) {
  const T x({1, 2, 2}, {1, 3, 5, 7});
  EXPECT_EQ(values(resample2x(x, Resample::down)), (std::vector<double>{4}));
  const T y({1, 1, 1}, {2});
  const T up = resample2x(y, Resample::up);
  EXPECT_EQ(up.shape(), (Shape{1, 2, 2}));
  EXPECT_EQ(values(up), (std::vector<double>{2, 2, 2, 2}));
  const T c = T::full({2, 6, 4}, 0.375);
  EXPECT_EQ(values(resample2x(resample2x(c, Resample::down), Resample::up)), values(c));
  EXPECT_THROW((void)resample2x(T::full({1, 3, 4}, 1.0), Resample::down), ShapeError);
}

TEST(Backward, LinearAndQuadratic) {
  T x({3}, {1, -2, 5}, true);
  backward(sum(x));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 1, 1}));
  T y({2}, {1, 2}, true);
  backward(sum(square(y)));
  EXPECT_EQ(std::vector<double>(y.grad().begin(), y.grad().end()), (std::vector<double>{2, 4}));
}

TEST(Backward, NonScalarAndRepeatedCallsFail) {
  T x({3}, {1, 2, 3}, true);
  const T y = square(x);
  EXPECT_THROW(backward(y), ShapeError);
  const T loss = sum(y);
  backward(loss);
  EXPECT_THROW(backward(loss), TapeError);
  const T constant = sum(T({2}, {1, 2}));
  EXPECT_THROW(backward(constant), TapeError);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  T x({2}, {3, -1}, true);
  const T y = mul(x, x);
  backward(sum(add(y, y)));  // d/dx 2x^2 = 4x
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -4.0);
}

TEST(Tape, OpsAreTopologicalAndUnique) {
  Rng rng(2);
  T x = random(rng, {2, 3});
  x.set_requires_grad(true);
  const T a = silu(x);
  const T b = mul(a, a);
  const T loss = sum(add(b, a));
  const auto tape = Tape<double>::collect(loss);
  EXPECT_TRUE(tape.topologically_ordered());
  EXPECT_EQ(tape.size(), 4u);  // silu, mul, add, sum
  EXPECT_EQ(tape.op_names().back(), "sum");
}

TEST(Gradcheck, ExactForLinearFunctions) {
  Rng rng(7);
  const T x = random(rng, {10});
  EXPECT_LT(finite_difference_check<double>([](const T& v) { return sum(v); }, x), 1e-9);
  EXPECT_LT(finite_difference_check<double>([](const T& v) { return sum(morphdiff::sin(v)); }, x), 1e-3);
}

// Every differentiable op against central differences on ten seeds.
TEST(Gradcheck, AllElementwiseOpsOnTenSeeds) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(100 + seed);
    const T pos = random(rng, {2, 3}, 0.5, 2.0);
    const T any = random(rng, {2, 3});
    const T w = random(rng, {2, 3});
    const T s = random(rng, {1}, 0.5, 1.5);
    auto weighted = [&](const T& v) { return sum(mul(v, w)); };
    const std::vector<std::pair<const char*, std::function<T(const T&)>>> cases = {
        {"add", [&](const T& v) { return weighted(add(v, any)); }},
        {"sub", [&](const T& v) { return weighted(sub(any, v)); }},
        {"mul", [&](const T& v) { return weighted(mul(v, any)); }},
        {"div", [&](const T& v) { return weighted(div(any, v)); }},
        {"scalar-broadcast", [&](const T& v) { return weighted(mul(v, s)); }},
        {"scale", [&](const T& v) { return weighted(scale(v, 1.7)); }},
        {"silu", [&](const T& v) { return weighted(silu(v)); }},
        {"square", [&](const T& v) { return weighted(square(v)); }},
        {"sqrt", [&](const T& v) { return weighted(morphdiff::sqrt(v)); }},
        {"log", [&](const T& v) { return weighted(morphdiff::log(v)); }},
        {"exp", [&](const T& v) { return weighted(morphdiff::exp(v)); }},
        {"mean", [&](const T& v) { return mean(square(v)); }},
        {"softmax", [&](const T& v) { return weighted(softmax_columns(v)); }},
        {"transpose", [&](const T& v) { return sum(mul(transpose(v), transpose(w))); }},
        {"channel_mean", [&](const T& v) { return sum(square(channel_mean(v))); }},
    };
    for (const auto& [name, f] : cases) {
      EXPECT_LT(finite_difference_check<double>(f, pos), 1e-3) << name << " seed " << seed;
    }
    // the scalar operand of a broadcast receives a reduced gradient
    T sv = s.detach();
    const auto r = check_gradients<double>([&] { return weighted(mul(any, sv)); }, {sv});
    EXPECT_LT(r.max_rel_error, 1e-3);
  }
}

TEST(Gradcheck, ShapeOpsOnTenSeeds) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(200 + seed);
    T a = random(rng, {2, 2, 4});
    T b = random(rng, {3, 2, 4});
    T bias = random(rng, {5});
    const T w = random(rng, {5, 2, 4});
    const auto r = check_gradients<double>(
        [&] {
          const T joined = add_channelwise(concat<double>({a, b}), bias);
          const T part = slice(joined, 1, 4);
          const T pooled = resample2x(resample2x(reshape(joined, {5, 2, 4}), Resample::down), Resample::up);
          return add(sum(mul(pooled, w)), sum(square(part)));
        },
        {a, b, bias});
    EXPECT_LT(r.max_rel_error, 1e-3) << "seed " << seed;
  }
}

TEST(Determinism, ForwardIsBitIdentical) {
  auto run = [] {
    Rng rng(42);
    const F x = rng.normal_tensor<float>({4, 8, 8});
    const F k = rng.normal_tensor<float>({6, 4, 3, 3});
    const F y = silu(conv2d(x, k, 1, 1));
    return std::vector<float>(y.data().begin(), y.data().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Dftn, HeaderLayoutAndRoundTrip) {
  const F t({2, 3}, {1, 2, 3, 4, 5, 6.5f});
  std::stringstream ss;
  write_dftn(ss, t);
  const std::string bytes = ss.str();
  ASSERT_EQ(bytes.size(), 4u + 4u + 1u + 2u * 4u + 6u * 4u);
  EXPECT_EQ(bytes.substr(0, 4), "DFTN");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1u);  // version, little-endian
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 2u);  // rank
  EXPECT_EQ(static_cast<unsigned char>(bytes[9]), 2u);  // first dim
  const F back = read_dftn(ss);
  EXPECT_EQ(back.shape(), t.shape());
  EXPECT_EQ(std::vector<float>(back.data().begin(), back.data().end()),
            std::vector<float>(t.data().begin(), t.data().end()));
}

TEST(Dftn, RoundTripPropertyOnRandomShapes) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    Shape shape;
    const auto rank = rng.uniform_int(0, 4);
    for (int d = 0; d < rank; ++d) shape.push_back(rng.uniform_int(1, 5));
    const F t = rng.normal_tensor<float>(shape);
    std::stringstream ss;
    write_dftn(ss, t);
    const F back = read_dftn(ss);
    ASSERT_EQ(back.shape(), t.shape());
    for (std::int64_t i = 0; i < t.numel(); ++i) ASSERT_EQ(back[i], t[i]);
  }
}

TEST(Dftn, RejectsBadMagicAndTruncation) {
  std::stringstream bad("DFTX\x01\x00\x00\x00");
  EXPECT_THROW((void)read_dftn(bad), IoError);
  const F t({4}, {1, 2, 3, 4});
  std::stringstream ss;
  write_dftn(ss, t);
  std::stringstream cut(ss.str().substr(0, ss.str().size() - 3));
  EXPECT_THROW((void)read_dftn(cut), IoError);
}

TEST(KeyValues, ParsesCommentsAndRejectsGarbage) {
  const auto kv = parse_key_values("# header\n a = 1 \nname=x # trailing\n\n");
  EXPECT_EQ(kv.at("a"), "1");
  EXPECT_EQ(kv.at("name"), "x");
  EXPECT_THROW((void)parse_key_values("novalue\n"), IoError);
}
