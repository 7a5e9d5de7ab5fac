// Copyright 2026 The vidplug Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "vidplug/errors.hpp"
#include "vidplug/gradcheck.hpp"
#include "vidplug/losses.hpp"
#include "vidplug/ops.hpp"

using namespace vidplug;

namespace {

Tensor random_tensor(const Shape& shape, std::uint64_t seed, bool requires_grad = true,
                     double lo = -1.0, double hi = 1.0) {
  CounterRng rng(seed);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(shape, std::move(v), requires_grad);
}

// Values in [margin, 1] with random sign; keeps relu away from its kink.
Tensor away_from_zero(const Shape& shape, std::uint64_t seed, double margin) {
  CounterRng rng(seed);
  std::vector<double> v(numel(shape));
  for (double& x : v) {
    x = rng.uniform(margin, 1.0);
    if (rng.uniform() < 0.5) x = -x;
  }
  return Tensor::from(shape, std::move(v), true);
}

std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                 std::size_t n, std::size_t k, std::size_t m) {
  std::vector<double> c(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * m + j] += a[i * k + p] * b[p * m + j];
  return c;
}

}  // namespace

// --- matmul -----------------------------------------------------------------

TEST(Matmul, IdentityTimesVector) {
  Tensor v = Tensor::from({2}, {1, 2});
  Tensor r = ops::matmul(Tensor::identity(2), v);
  EXPECT_EQ(r.shape(), (Shape{2}));
  EXPECT_EQ(r.to_vector(), (std::vector<double>{1, 2}));
}

TEST(Matmul, MatchesScalarLoopOracle) {
  const std::vector<double> a{1, 2, 3, 4};
  const std::vector<double> b{1, 1};
  const auto expected = naive_matmul(a, b, 2, 2, 1);
  ASSERT_EQ(expected, (std::vector<double>{3, 7}));
  Tensor r = ops::matmul(Tensor::from({2, 2}, a), Tensor::from({2, 1}, b));
  EXPECT_EQ(r.shape(), (Shape{2, 1}));
  EXPECT_EQ(r.to_vector(), expected);
}

TEST(Matmul, ZerosGiveZeros) {
  Tensor r = ops::matmul(Tensor::zeros({3, 4}), random_tensor({4, 2}, 1, false));
  EXPECT_EQ(r.shape(), (Shape{3, 2}));
  for (double v : r.data()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(2, 3)"), std::string::npos) << msg;
    EXPECT_NE(msg.find("(4, 2)"), std::string::npos) << msg;
  }
}

TEST(Matmul, BatchBroadcastMatchesPerBatchOracle) {
  Tensor a = random_tensor({3, 2, 4}, 2, false);
  Tensor b = random_tensor({4, 5}, 3, false);
  Tensor r = ops::matmul(a, b);
  ASSERT_EQ(r.shape(), (Shape{3, 2, 5}));
  const auto ad = a.to_vector();
  for (std::size_t bi = 0; bi < 3; ++bi) {
    std::vector<double> slab(ad.begin() + bi * 8, ad.begin() + (bi + 1) * 8);
    const auto ref = naive_matmul(slab, b.to_vector(), 2, 4, 5);
    for (std::size_t i = 0; i < 10; ++i) EXPECT_DOUBLE_EQ(r.data()[bi * 10 + i], ref[i]);
  }
}

// --- softmax ----------------------------------------------------------------

TEST(Softmax, SingleElementIsOne) {
  EXPECT_EQ(ops::softmax(Tensor::from({1}, {3.7}), 0).item(), 1.0);
}

TEST(Softmax, SymmetricInputIsUniform) {
  Tensor s = ops::softmax(Tensor::zeros({3}), 0);
  for (double v : s.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, ClosedFormTwoElements) {
  const double e1 = std::exp(1.0), e2 = std::exp(2.0);
  Tensor s = ops::softmax(Tensor::from({2}, {1, 2}), 0);
  EXPECT_NEAR(s.data()[0], e1 / (e1 + e2), 1e-12);
  EXPECT_NEAR(s.data()[1], e2 / (e1 + e2), 1e-12);
  EXPECT_NEAR(s.data()[0], 0.26894, 1e-5);
  EXPECT_NEAR(s.data()[1], 0.73106, 1e-5);
}

TEST(Softmax, RowsSumToOneOnAnyAxis) {
  Tensor x = random_tensor({3, 4, 5}, 4, false, -20, 20);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    Tensor s = ops::softmax(x, axis);
    Tensor sums = ops::mean_axis(s, axis);
    for (double v : sums.data()) EXPECT_NEAR(v * static_cast<double>(x.size(axis)), 1.0, 1e-6);
    for (double v : s.data()) EXPECT_GE(v, 0.0);
  }
}

TEST(Softmax, NanInputIsNumericError) {
  EXPECT_THROW(ops::softmax(Tensor::from({2}, {0.0, NAN}), 0), NumericError);
}

// --- elementwise ------------------------------------------------------------

TEST(Elementwise, ReluClips) {
  EXPECT_EQ(ops::relu(Tensor::from({3}, {-1, 0, 2})).to_vector(), (std::vector<double>{0, 0, 2}));
}

TEST(Elementwise, ScaleByZeroIsZero) {
  Tensor y = ops::scale(random_tensor({4}, 5), 0.0);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Elementwise, DropoutZeroIsIdentity) {
  Tensor x = random_tensor({10}, 6);
  CounterRng rng(1);
  EXPECT_EQ(ops::dropout(x, 0.0, rng, true).to_vector(), x.to_vector());
}

TEST(Elementwise, DropoutInactiveInEval) {
  Tensor x = random_tensor({10}, 6);
  CounterRng rng(1);
  EXPECT_EQ(ops::dropout(x, 0.5, rng, false).to_vector(), x.to_vector());
}

TEST(Elementwise, DropoutScalesSurvivorsAndIsReproducible) {
  Tensor x = Tensor::ones({1000});
  CounterRng r1(99), r2(99);
  Tensor a = ops::dropout(x, 0.2, r1, true);
  Tensor b = ops::dropout(x, 0.2, r2, true);
  EXPECT_EQ(a.to_vector(), b.to_vector());
  std::size_t dropped = 0;
  for (double v : a.data()) {
    if (v == 0.0) ++dropped;
    else EXPECT_DOUBLE_EQ(v, 1.0 / 0.8);
  }
  EXPECT_GT(dropped, 150u);
  EXPECT_LT(dropped, 250u);
}

TEST(Elementwise, DropoutRejectsBadProbability) {
  CounterRng rng(1);
  EXPECT_THROW(ops::dropout(Tensor::ones({2}), 1.0, rng, true), ConfigError);
  EXPECT_THROW(ops::dropout(Tensor::ones({2}), -0.1, rng, true), ConfigError);
}

TEST(Elementwise, BroadcastAddBiasRows) {
  Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from({3}, {10, 20, 30});
  EXPECT_EQ(ops::add(x, b).to_vector(), (std::vector<double>{11, 22, 33, 14, 25, 36}));
  EXPECT_THROW(ops::add(x, Tensor::zeros({2})), DimensionError);
}

// --- structural ---------------------------------------------------------------

TEST(Structural, SplitThenConcatRoundTrip) {
  Tensor x = Tensor::from({4}, {1, 2, 3, 4});
  auto parts = ops::split(x, 0, {2, 2});
  EXPECT_EQ(ops::concat(parts, 0).to_vector(), x.to_vector());
}

TEST(Structural, SplitConcatBitExactOnRandomShapes) {
  CounterRng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Shape s{1 + rng.below(4), 1 + rng.below(5), 1 + rng.below(3)};
    const std::size_t axis = rng.below(3);
    Tensor x = random_tensor(s, 100 + trial, false, -1e6, 1e6);
    std::vector<std::size_t> sizes;
    std::size_t left = s[axis];
    while (left > 0) {
      const std::size_t take = 1 + rng.below(left);
      sizes.push_back(take);
      left -= take;
    }
    EXPECT_EQ(ops::concat(ops::split(x, axis, sizes), axis).to_vector(), x.to_vector());
  }
}

TEST(Structural, RaggedConcatIsDimensionError) {
  EXPECT_THROW(ops::concat({Tensor::zeros({2, 3}), Tensor::zeros({2, 4})}, 0), DimensionError);
}

TEST(Structural, SplitPartsMustSumToAxis) {
  EXPECT_THROW(ops::split(Tensor::zeros({4}), 0, {1, 2}), DimensionError);
}

TEST(Structural, LayerNormConstantSliceIsZero) {
  Tensor y = ops::layer_norm(Tensor::full({2, 4}, 3.0), Tensor::ones({4}), Tensor::zeros({4}));
  for (double v : y.data()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(Structural, LayerNormSlicesAreStandardized) {
  Tensor x = random_tensor({5, 8}, 8, false, -3, 7);
  Tensor y = ops::layer_norm(x, Tensor::ones({8}), Tensor::zeros({8}), 1e-12);
  for (std::size_t r = 0; r < 5; ++r) {
    double mu = 0, var = 0;
    for (std::size_t j = 0; j < 8; ++j) mu += y.at({r, j});
    mu /= 8;
    for (std::size_t j = 0; j < 8; ++j) var += (y.at({r, j}) - mu) * (y.at({r, j}) - mu);
    var /= 8;
    EXPECT_NEAR(mu, 0.0, 1e-5);
    EXPECT_NEAR(var, 1.0, 1e-5);
  }
}

TEST(Structural, Conv1dMatchesSlidingWindowOracle) {
  const std::vector<double> x{1, 1, 1, 1};
  const std::vector<double> k{1, 1};
  std::vector<double> expected;
  for (std::size_t s = 0; s + k.size() <= x.size(); s += 2) {
    double acc = 0;
    for (std::size_t j = 0; j < k.size(); ++j) acc += x[s + j] * k[j];
    expected.push_back(acc);
  }
  ASSERT_EQ(expected, (std::vector<double>{2, 2}));
  Tensor y = ops::conv1d(Tensor::from({4}, x), Tensor::from({2}, k), 2);
  EXPECT_EQ(y.shape(), (Shape{2}));
  EXPECT_EQ(y.to_vector(), expected);
}

TEST(Structural, FullConv1dMatchesOracle) {
  Tensor x = random_tensor({6, 3}, 9, false);
  Tensor w = random_tensor({2, 3, 4}, 10, false);
  Tensor b = random_tensor({4}, 11, false);
  Tensor y = ops::conv1d(x, w, 2, b);
  ASSERT_EQ(y.shape(), (Shape{3, 4}));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t o = 0; o < 4; ++o) {
      double acc = b.at({o});
      for (std::size_t j = 0; j < 2; ++j)
        for (std::size_t c = 0; c < 3; ++c) acc += x.at({2 * i + j, c}) * w.at({j, c, o});
      EXPECT_NEAR(y.at({i, o}), acc, 1e-14);
    }
  }
}

TEST(Structural, AdaptiveStartsHitExactTarget) {
  EXPECT_EQ(ops::adaptive_starts(4, 2, 2), (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(ops::adaptive_starts(5, 5, 1), (std::vector<std::size_t>{0, 1, 2, 3, 4}));
  EXPECT_EQ(ops::adaptive_starts(3, 1, 2).size(), 1u);
  EXPECT_THROW(ops::adaptive_starts(3, 0, 1), ConfigError);
}

TEST(Structural, TakeRowsPadsWithZeros) {
  Tensor x = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
  const std::vector<std::int64_t> idx{2, -1, 0};
  EXPECT_EQ(ops::take_rows(x, idx).to_vector(), (std::vector<double>{5, 6, 0, 0, 1, 2}));
}

TEST(Structural, PermuteMatchesIndexOracle) {
  Tensor x = random_tensor({2, 3, 4}, 12, false);
  Tensor y = ops::permute(x, {2, 0, 1});
  ASSERT_EQ(y.shape(), (Shape{4, 2, 3}));
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y.at({c, a, b}), x.at({a, b, c}));
}

// --- backward ---------------------------------------------------------------

TEST(Backward, SumGivesOnes) {
  Tensor x = random_tensor({2, 3}, 13);
  ops::sum(x).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SumOfSquaresByHand) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  ops::sum(ops::mul(x, x)).backward();
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2, 4}));
}

TEST(Backward, DetachedLeafHasNoGrad) {
  Tensor frozen = random_tensor({3}, 14, false);
  Tensor w = random_tensor({3}, 15, true);
  ops::sum(ops::mul(frozen, w)).backward();
  EXPECT_FALSE(frozen.has_grad());
  EXPECT_TRUE(w.has_grad());
}

TEST(Backward, NonScalarLossIsContractError) {
  Tensor x = random_tensor({2}, 16);
  EXPECT_THROW(ops::relu(x).backward(), ContractError);
}

TEST(Backward, FrozenTensorBitIdenticalAcrossCycles) {
  Tensor frozen = random_tensor({4, 4}, 17, false);
  const auto snapshot = frozen.to_vector();
  Tensor w = random_tensor({4}, 18, true);
  for (int i = 0; i < 5; ++i) {
    ops::sum(ops::tanh(ops::matmul(frozen, w))).backward();
    auto wd = w.mutable_data();
    for (std::size_t j = 0; j < wd.size(); ++j) wd[j] -= 0.1 * w.grad()[j];
    w.zero_grad();
  }
  EXPECT_EQ(frozen.to_vector(), snapshot);
}

TEST(Backward, TapeIsTopological) {
  Tensor x = random_tensor({3}, 19);
  Tensor y = ops::relu(ops::scale(x, 2.0));
  Tensor loss = ops::sum(ops::add(y, x));
  Tape tape = Tape::record(loss);
  for (TensorImpl* node : tape.nodes()) {
    if (!node->grad_fn) continue;
    for (const auto& in : node->grad_fn->inputs) {
      if (in->requires_grad) EXPECT_LT(tape.position(in.get()), tape.position(node));
    }
  }
  EXPECT_EQ(tape.nodes().back(), loss.impl());
}

TEST(Precision, F32RoundsAndMixedGraphsAreRejected) {
  Tensor a;
  {
    PrecisionScope p(Precision::f32);
    a = Tensor::from({1}, {0.1});
  }
  EXPECT_EQ(a.precision(), Precision::f32);
  EXPECT_EQ(a.item(), static_cast<double>(0.1f));
  Tensor b = Tensor::from({1}, {0.1});
  EXPECT_THROW(ops::add(a, b), ContractError);
}

// --- grad_check ---------------------------------------------------------------

TEST(GradCheck, IdentityIsExact) {
  EXPECT_LT(grad_check([](const Tensor& x) { return x; }, random_tensor({5}, 20)), 1e-10);
}

TEST(GradCheck, ReluAwayFromKink) {
  const double eps = 1e-6;
  Tensor x = away_from_zero({16}, 21, 10 * eps);
  EXPECT_LT(grad_check([](const Tensor& v) { return ops::relu(v); }, x, eps), 1e-7);
}

TEST(GradCheck, RejectsF32Inputs) {
  PrecisionScope p(Precision::f32);
  Tensor x = Tensor::ones({2}, true);
  EXPECT_THROW(grad_check([](const Tensor& v) { return v; }, x), ContractError);
}

TEST(GradCheck, EveryDifferentiableOpAtRandomInputs) {
  struct Case {
    const char* name;
    std::vector<Tensor> inputs;
    TensorFn f;
  };
  std::vector<Case> cases;
  cases.push_back({"matmul", {random_tensor({2, 3, 4}, 30), random_tensor({4, 2}, 31)},
                   [](const auto& in) { return ops::matmul(in[0], in[1]); }});
  cases.push_back({"add_broadcast", {random_tensor({3, 4}, 32), random_tensor({4}, 33)},
                   [](const auto& in) { return ops::add(in[0], in[1]); }});
  cases.push_back({"sub", {random_tensor({3}, 34), random_tensor({3}, 35)},
                   [](const auto& in) { return ops::sub(in[0], in[1]); }});
  cases.push_back({"mul_broadcast", {random_tensor({2, 3}, 36), random_tensor({2, 1}, 37)},
                   [](const auto& in) { return ops::mul(in[0], in[1]); }});
  cases.push_back({"relu", {away_from_zero({8}, 38, 1e-3)},
                   [](const auto& in) { return ops::relu(in[0]); }});
  cases.push_back({"tanh", {random_tensor({6}, 39)}, [](const auto& in) { return ops::tanh(in[0]); }});
  cases.push_back({"sigmoid", {random_tensor({6}, 40)},
                   [](const auto& in) { return ops::sigmoid(in[0]); }});
  cases.push_back({"gelu", {random_tensor({6}, 41)}, [](const auto& in) { return ops::gelu(in[0]); }});
  cases.push_back({"exp", {random_tensor({6}, 42)}, [](const auto& in) { return ops::exp(in[0]); }});
  cases.push_back({"softmax_axis1", {random_tensor({3, 4, 2}, 43)},
                   [](const auto& in) { return ops::softmax(in[0], 1); }});
  cases.push_back({"layer_norm",
                   {random_tensor({3, 5}, 44), random_tensor({5}, 45), random_tensor({5}, 46)},
                   [](const auto& in) { return ops::layer_norm(in[0], in[1], in[2]); }});
  cases.push_back({"permute", {random_tensor({2, 3, 4}, 47)},
                   [](const auto& in) { return ops::permute(in[0], {1, 2, 0}); }});
  cases.push_back({"concat", {random_tensor({2, 3}, 48), random_tensor({2, 2}, 49)},
                   [](const auto& in) { return ops::concat({in[0], in[1]}, 1); }});
  cases.push_back({"slice", {random_tensor({4, 3}, 50)},
                   [](const auto& in) { return ops::slice(in[0], 0, 1, 2); }});
  cases.push_back({"take_rows", {random_tensor({3, 2}, 51)}, [](const auto& in) {
                     static const std::vector<std::int64_t> idx{2, -1, 0, 2};
                     return ops::take_rows(in[0], idx);
                   }});
  cases.push_back({"conv1d_shared", {random_tensor({5, 2}, 52), random_tensor({2}, 53)},
                   [](const auto& in) { return ops::conv1d(in[0], in[1], 1); }});
  cases.push_back({"conv1d_full",
                   {random_tensor({5, 2}, 54), random_tensor({3, 2, 3}, 55), random_tensor({3}, 56)},
                   [](const auto& in) {
                     const auto starts = ops::adaptive_starts(5, 4, 3);
                     return ops::conv1d_at(in[0], in[1], starts, in[2]);
                   }});
  cases.push_back({"mean_axis", {random_tensor({3, 4}, 57)},
                   [](const auto& in) { return ops::mean_axis(in[0], 0); }});
  cases.push_back({"cross_entropy", {random_tensor({3, 4}, 58)}, [](const auto& in) {
                     static const std::vector<std::size_t> labels{0, 3, 1};
                     return cross_entropy(in[0], labels);
                   }});
  cases.push_back({"bce", {random_tensor({2, 3}, 59)}, [](const auto& in) {
                     return binary_cross_entropy_with_logits(
                         in[0], Tensor::from({2, 3}, {1, 0, 1, 0, 0, 1}));
                   }});
  cases.push_back({"mse", {random_tensor({4}, 60), random_tensor({4}, 61)},
                   [](const auto& in) { return mse(in[0], in[1]); }});
  for (const Case& c : cases) {
    const GradCheckResult r = grad_check(c.f, c.inputs);
    EXPECT_LT(r.max_rel_error, 1e-6) << c.name;
    EXPECT_GT(r.checked, 0u) << c.name;
  }
}

// --- losses and metrics --------------------------------------------------------

TEST(Losses, UniformLogitsGiveLogClasses) {
  const std::vector<std::size_t> label{2};
  EXPECT_NEAR(cross_entropy(Tensor::zeros({5}), label).item(), std::log(5.0), 1e-12);
}

TEST(Losses, LabelOutOfRangeIsDataError) {
  const std::vector<std::size_t> label{5};
  EXPECT_THROW(cross_entropy(Tensor::zeros({5}), label), DataError);
}

TEST(Losses, CrossEntropyIsStableForHugeLogits) {
  const std::vector<std::size_t> label{0};
  EXPECT_NEAR(cross_entropy(Tensor::from({2}, {1000, 0}), label).item(), 0.0, 1e-12);
}

TEST(Losses, MseZeroWhenEqual) {
  Tensor p = random_tensor({4}, 62);
  EXPECT_EQ(mse(p, p.detach()).item(), 0.0);
}

TEST(Metrics, PerfectRankingHasUnitMap) {
  Tensor scores = Tensor::from({4, 1}, {0.9, 0.8, 0.2, 0.1});
  Tensor labels = Tensor::from({4, 1}, {1, 1, 0, 0});
  EXPECT_DOUBLE_EQ(mean_average_precision(scores, labels), 1.0);
}

TEST(Metrics, MapHandRanking) {
  // Ranking by score: s2(+), s0(-), s3(+), s1(-). AP = (1/1 + 2/3) / 2.
  Tensor scores = Tensor::from({4, 1}, {0.7, 0.1, 0.9, 0.4});
  Tensor labels = Tensor::from({4, 1}, {0, 0, 1, 1});
  EXPECT_NEAR(mean_average_precision(scores, labels), (1.0 + 2.0 / 3.0) / 2.0, 1e-15);
}

TEST(Metrics, Top1) {
  Tensor logits = Tensor::from({3, 2}, {1, 0, 0, 1, 5, 2});
  const std::vector<std::size_t> labels{0, 1, 1};
  EXPECT_NEAR(top1_accuracy(logits, labels), 2.0 / 3.0, 1e-15);
}
