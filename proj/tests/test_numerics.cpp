#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "protoseg/numerics.hpp"
#include "protoseg/tape.hpp"
#include "test_support.hpp"

namespace protoseg {
namespace {

using testing::check_op;
using testing::param;
using testing::random_tensor;

TEST(Tensor, RejectsZeroExtentsAndLengthMismatch) {
  EXPECT_THROW(Tensor({2, 0}), std::invalid_argument);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), std::invalid_argument);
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
}

TEST(Softmax, Examples) {
  const double a[] = {0.0, 0.0};
  auto p = softmax(a);
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
  const double b[] = {std::log(2.0), 0.0};
  p = softmax(b);
  EXPECT_NEAR(p[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(p[1], 1.0 / 3.0, 1e-15);
}

TEST(Softmax, EmptyInputIsAnError) { EXPECT_THROW(softmax(std::span<const double>{}), std::invalid_argument); }

TEST(Softmax, SumsToOneShiftInvariantOrderPreserving) {
  Rng rng(3);
  for (std::size_t n = 1; n <= 64; ++n) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(-20.0, 20.0);
    const double c = rng.uniform(-50.0, 50.0);
    std::vector<double> shifted(v);
    for (double& x : shifted) x += c;
    const auto p = softmax(v), q = softmax(shifted);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      s += p[i];
      EXPECT_GE(p[i], 0.0);
      EXPECT_NEAR(p[i], q[i], 1e-12);
      for (std::size_t j = 0; j < n; ++j)
        if (v[i] < v[j]) {
          EXPECT_LE(p[i], p[j]);
        }
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Cosine, Examples) {
  const double u[] = {3, 4};
  EXPECT_DOUBLE_EQ(cosine(u, u).value, 1.0);
  const double e1[] = {1, 0}, e2[] = {0, 1};
  EXPECT_DOUBLE_EQ(cosine(e1, e2).value, 0.0);
  const double a[] = {1, 2, 3}, b[] = {4, 5, 6};
  EXPECT_NEAR(cosine(a, b).value, 0.974631, 1e-6);
  EXPECT_NEAR(cosine(a, b).value, 32.0 / std::sqrt(14.0 * 77.0), 1e-15);
}

TEST(Cosine, ZeroNormFallsBackToFlaggedZero) {
  const double z[] = {0, 0, 0}, a[] = {1, 2, 3};
  const Cosine c = cosine(z, a);
  EXPECT_TRUE(c.degenerate);
  EXPECT_EQ(c.value, 0.0);
  EXPECT_FALSE(cosine(a, a).degenerate);
}

TEST(Cosine, SymmetricBoundedScaleInvariant) {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.index(10);
    std::vector<double> u(n), v(n), su(n);
    const double alpha = rng.uniform(0.01, 100.0);
    for (std::size_t i = 0; i < n; ++i) {
      u[i] = rng.uniform(-1, 1);
      v[i] = rng.uniform(-1, 1);
      su[i] = alpha * u[i];
    }
    const double c = cosine(u, v).value;
    EXPECT_EQ(c, cosine(v, u).value);
    EXPECT_GE(c, -1.0);
    EXPECT_LE(c, 1.0);
    EXPECT_NEAR(cosine(su, v).value, c, 1e-12);
  }
}

TEST(AvgPool, Examples) {
  Tensor m = Tensor::matrix(2, 2, {1, 2, 3, 4});
  EXPECT_EQ(avg_pool2d(m, 2, 2), Tensor::matrix(1, 1, {2.5}));
  EXPECT_EQ(avg_pool2d(m, 1, 1), m);
  Tensor c({6, 4}, 0.375);
  EXPECT_EQ(avg_pool2d(c, 3, 2), Tensor({2, 2}, 0.375));
}

TEST(AvgPool, Errors) {
  Tensor m({4, 4}, 1.0);
  EXPECT_THROW(avg_pool2d(m, 5, 1), std::invalid_argument);
  EXPECT_THROW(avg_pool2d(m, 3, 2), std::invalid_argument);
}

TEST(AvgPool, MatchesLoopOracleExactly) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t wh = 1 + rng.index(3), ww = 1 + rng.index(3);
    const std::size_t gh = 1 + rng.index(4), gw = 1 + rng.index(4);
    Tensor m = random_tensor({wh * gh, ww * gw}, rng);
    Tensor p = avg_pool2d(m, wh, ww);
    for (std::size_t i = 0; i < gh; ++i)
      for (std::size_t j = 0; j < gw; ++j) {
        double s = 0.0;
        for (std::size_t y = 0; y < wh; ++y)
          for (std::size_t x = 0; x < ww; ++x) s += m.at(i * wh + y, j * ww + x);
        EXPECT_EQ(p.at(i, j), s / static_cast<double>(wh * ww));
      }
  }
}

TEST(Backward, DotGradientIsOtherVector) {
  ParamStore p;
  p.set("u", Tensor::matrix(3, 1, {1, -2, 0.5}));
  p.set("v", Tensor::matrix(3, 1, {4, 5, -6}));
  Tape t;
  Var d = matmul(transpose(t.parameter(p, "u")), t.parameter(p, "v"));
  Gradients g = t.backward(d, p);
  EXPECT_EQ(g["u"], p.get("v"));
  EXPECT_EQ(g["v"], p.get("u"));
}

TEST(Backward, SoftmaxCrossEntropyIsProbabilitiesMinusOneHot) {
  ParamStore p;
  p.set("z", Tensor::matrix(1, 4, {0.3, -1.2, 2.0, 0.1}));
  Tape t;
  Var probs = softmax_rows(t.parameter(p, "z"));
  Tensor onehot = Tensor::matrix(1, 4, {0, 0, 1, 0});
  Var loss = scale(sum(mul(t.constant(onehot), log_floor(probs, 1e-12))), -1.0);
  Gradients g = t.backward(loss, p);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(g["z"][i], probs.value()[i] - onehot[i], 1e-15);
}

TEST(Backward, NonScalarLossIsAnError) {
  ParamStore p;
  p.set("x", Tensor({2, 2}, 1.0));
  Tape t;
  Var x = t.parameter(p, "x");
  EXPECT_THROW(t.backward(x, p), std::invalid_argument);
}

TEST(Backward, ParameterOffTapeGetsFlaggedZeroGradient) {
  ParamStore p;
  p.set("used", Tensor({2}, 1.0));
  p.set("unused", Tensor({3}, 2.0));
  Tape t;
  Gradients g = t.backward(sum(t.parameter(p, "used")), p);
  ASSERT_EQ(g.missing, std::vector<std::string>{"unused"});
  EXPECT_EQ(g["unused"], Tensor({3}, 0.0));
  EXPECT_EQ(g["used"], Tensor({2}, 1.0));
}

TEST(Backward, FrozenParameterGetsNoGradient) {
  ParamStore p;
  p.set("a", Tensor({2}, 1.0));
  Tape t;
  Var loss = sum(t.parameter(p, "a", false));
  Gradients g = t.backward(loss, p);
  EXPECT_EQ(g.missing, std::vector<std::string>{"a"});
}

TEST(Backward, Deterministic) {
  Rng rng(6);
  ParamStore p;
  p.set("a", random_tensor({3, 4}, rng));
  p.set("b", random_tensor({4, 2}, rng));
  auto run = [&] {
    Tape t;
    Var m = softmax_rows(matmul(t.parameter(p, "a"), t.parameter(p, "b")));
    return t.backward(sum(log_floor(m, 1e-12)), p).by_name;
  };
  EXPECT_EQ(run(), run());
}

TEST(Tape, NonFiniteValuesAreRejected) {
  Tape t;
  Var x = t.constant(Tensor({2}, 1.0));
  EXPECT_THROW(scale(x, std::numeric_limits<double>::infinity()), NumericError);
  EXPECT_THROW(t.constant(Tensor({1}, std::nan(""))), NumericError);
}

// Every differentiable op against central differences on random tensors.
class OpGradient : public ::testing::Test {
 protected:
  Rng rng{11};
  ParamStore two(Shape a, Shape b) {
    ParamStore p;
    p.set("a", random_tensor(std::move(a), rng));
    p.set("b", random_tensor(std::move(b), rng));
    return p;
  }
  ParamStore one(Shape a, double lo = -1.0, double hi = 1.0) {
    ParamStore p;
    p.set("a", random_tensor(std::move(a), rng, lo, hi));
    return p;
  }
  static void expect_ok(const testing::GradcheckReport& r) {
    EXPECT_GT(r.checked, 0u);
    EXPECT_LE(r.worst, 1e-3) << r.worst_at;
  }
};

TEST_F(OpGradient, Elementwise) {
  expect_ok(check_op(two({3, 4}, {3, 4}), [](Tape& t, const ParamStore& p) { return add(param(t, p, "a"), param(t, p, "b")); }));
  expect_ok(check_op(two({3, 4}, {3, 4}), [](Tape& t, const ParamStore& p) { return sub(param(t, p, "a"), param(t, p, "b")); }));
  expect_ok(check_op(two({3, 4}, {3, 4}), [](Tape& t, const ParamStore& p) { return mul(param(t, p, "a"), param(t, p, "b")); }));
  expect_ok(check_op(one({5}), [](Tape& t, const ParamStore& p) { return scale(param(t, p, "a"), -2.5); }));
  expect_ok(check_op(one({5}), [](Tape& t, const ParamStore& p) { return add_scalar(param(t, p, "a"), 0.7); }));
}

TEST_F(OpGradient, ReluAwayFromKink) {
  ParamStore p = one({4, 4});
  for (double& v : p.get("a").values()) v += v >= 0 ? 0.05 : -0.05;
  expect_ok(check_op(p, [](Tape& t, const ParamStore& q) { return relu(param(t, q, "a")); }));
}

TEST_F(OpGradient, ReluReplaysRecordedGate) {
  Tape t;
  std::vector<char> gate;
  Var x = t.constant(Tensor::vector({-1.0, 2.0, -3.0}));
  relu(x, &gate);
  EXPECT_EQ(gate, (std::vector<char>{0, 1, 0}));
  Var y = relu(t.constant(Tensor::vector({5.0, 5.0, -5.0})), &gate, true);
  EXPECT_EQ(y.value(), Tensor::vector({0.0, 5.0, 0.0}));
}

TEST_F(OpGradient, ShapeOps) {
  expect_ok(check_op(one({3, 5}), [](Tape& t, const ParamStore& p) { return transpose(param(t, p, "a")); }));
  expect_ok(check_op(one({3, 4}), [](Tape& t, const ParamStore& p) { return reshape(param(t, p, "a"), {2, 6}); }));
  expect_ok(check_op(one({3, 6}), [](Tape& t, const ParamStore& p) { return gather_cols(param(t, p, "a"), {4, 0, 4}); }));
  expect_ok(check_op(two({2, 3}, {1, 3}),
                     [](Tape& t, const ParamStore& p) { return concat_rows(param(t, p, "a"), param(t, p, "b")); }));
}

TEST_F(OpGradient, MatMul) {
  expect_ok(check_op(two({3, 4}, {4, 2}), [](Tape& t, const ParamStore& p) { return matmul(param(t, p, "a"), param(t, p, "b")); }));
}

TEST_F(OpGradient, Conv2dStridedAndPadded) {
  ParamStore p;
  p.set("x", random_tensor({2, 7, 6}, rng));
  p.set("w", random_tensor({3, 2, 3, 3}, rng));
  p.set("b", random_tensor({3}, rng));
  for (std::size_t stride : {1, 2})
    expect_ok(check_op(p, [stride](Tape& t, const ParamStore& q) {
      return conv2d(param(t, q, "x"), param(t, q, "w"), param(t, q, "b"), {stride, 1});
    }));
}

TEST_F(OpGradient, Normalizations) {
  expect_ok(check_op(one({4, 3}), [](Tape& t, const ParamStore& p) { return normalize_cols(param(t, p, "a")); }));
  expect_ok(check_op(one({3, 5}, -3, 3), [](Tape& t, const ParamStore& p) { return softmax_rows(param(t, p, "a")); }));
  expect_ok(check_op(one({3, 5}, 0.1, 2.0), [](Tape& t, const ParamStore& p) { return log_floor(param(t, p, "a"), 1e-12); }));
}

TEST_F(OpGradient, Reductions) {
  expect_ok(check_op(one({4, 5}), [](Tape& t, const ParamStore& p) { return row_max(param(t, p, "a")); }));
  expect_ok(check_op(one({4, 5}), [](Tape& t, const ParamStore& p) { return row_mean(param(t, p, "a")); }));
  expect_ok(check_op(one({4, 5}), [](Tape& t, const ParamStore& p) { return sum(param(t, p, "a")); }));
}

TEST(RowMax, ForcedArgmaxIsReplayed) {
  Tape t;
  Var a = t.constant(Tensor::matrix(2, 3, {1, 5, 2, 7, 0, 3}));
  std::vector<std::size_t> idx;
  EXPECT_EQ(row_max(a, &idx).value(), Tensor::matrix(2, 1, {5, 7}));
  EXPECT_EQ(idx, (std::vector<std::size_t>{1, 0}));
  const std::vector<std::size_t> forced{2, 2};
  EXPECT_EQ(row_max(a, nullptr, &forced).value(), Tensor::matrix(2, 1, {2, 3}));
}

TEST(LogFloor, ClampsAtFloor) {
  Tape t;
  Var v = log_floor(t.constant(Tensor::vector({0.0, 1.0})), 1e-12);
  EXPECT_DOUBLE_EQ(v.value()[0], std::log(1e-12));
  EXPECT_DOUBLE_EQ(v.value()[1], 0.0);
}

TEST(Tape, ValueReferencesSurviveTapeGrowth) {
  Tape t;
  Var a = t.constant(Tensor::matrix(1, 3, {1.0, 2.0, 3.0}));
  const Tensor& ref = a.value();
  for (int i = 0; i < 1000; ++i) t.constant(Tensor({4, 4}, 1.0));
  EXPECT_EQ(ref, Tensor::matrix(1, 3, {1.0, 2.0, 3.0}));
}

}  // namespace
}  // namespace protoseg
