#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "op_cases.hpp"

using namespace losa;

namespace {

Tensor<double> naive_matmul(const Tensor<double>& a, const Tensor<double>& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<double> c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += a.at(i, p) * b.at(p, j);
      c.at(i, j) = acc;
    }
  }
  return c;
}

}  // namespace

TEST(Tensor, ShapeAndAccessors) {
  Tensor<float> t({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.at(1, 2), 6.0f);
  EXPECT_EQ(t.bytes(), 24u);
  EXPECT_THROW(Tensor<float>({2, 2}, {1, 2, 3}), DimensionError);
  EXPECT_EQ(Tensor<float>::scalar(3).item(), 3.0f);
  EXPECT_THROW(t.item(), DimensionError);
}

TEST(Tensor, TruncatedNormalStaysInTwoSigma) {
  std::mt19937_64 rng(3);
  auto t = Tensor<double>::truncated_normal({1000}, 0.5, rng);
  for (double v : t.data()) EXPECT_LE(std::abs(v), 1.0);
}

TEST(Ops, MatmulHandCase) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>({2, 2}, {1, 2, 3, 4}));
  auto b = tape.constant(Tensor<double>({2, 2}, {5, 6, 7, 8}));
  EXPECT_EQ(matmul(a, b).value(), Tensor<double>({2, 2}, {19, 22, 43, 50}));
}

TEST(Ops, MatmulMatchesTripleLoop) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t m = 1 + trial % 5, k = 1 + (trial * 7) % 6, n = 1 + (trial * 3) % 4;
    auto av = Tensor<double>::normal({m, k}, 1.0, rng);
    auto bv = Tensor<double>::normal({k, n}, 1.0, rng);
    Tape<double> tape;
    auto c = matmul(tape.constant(av), tape.constant(bv));
    EXPECT_LT(max_abs_diff(c.value(), naive_matmul(av, bv)), 1e-12);
  }
}

TEST(Ops, MatmulRejectsInnerMismatch) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>({2, 3}));
  auto b = tape.constant(Tensor<double>({2, 3}));
  EXPECT_THROW(matmul(a, b), DimensionError);
}

TEST(Ops, BmmMatchesPerBatchLoop) {
  std::mt19937_64 rng(5);
  auto av = Tensor<double>::normal({3, 2, 4}, 1.0, rng);
  auto bv = Tensor<double>::normal({3, 4, 5}, 1.0, rng);
  Tape<double> tape;
  auto c = bmm(tape.constant(av), tape.constant(bv)).value();
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t i = 0; i < 2; ++i) {
      for (std::size_t j = 0; j < 5; ++j) {
        double acc = 0;
        for (std::size_t p = 0; p < 4; ++p) acc += av[(b * 2 + i) * 4 + p] * bv[(b * 4 + p) * 5 + j];
        EXPECT_NEAR(c[(b * 2 + i) * 5 + j], acc, 1e-12);
      }
    }
  }
}

TEST(Ops, GeluAtOneIsStandardNormalCdf) {
  Tape<double> tape;
  auto y = gelu(tape.constant(Tensor<double>({3}, {1.0, 0.0, -1.0}))).value();
  EXPECT_NEAR(y[0], 0.8413447460685429, 1e-15);
  EXPECT_EQ(y[1], 0.0);
  EXPECT_NEAR(y[2], -0.15865525393145707, 1e-15);
}

TEST(Ops, LayerNormHandCase) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({1, 3}, {1, 2, 3}));
  auto g = tape.constant(Tensor<double>::full({3}, 1));
  auto b = tape.constant(Tensor<double>::zeros({3}));
  auto y = layernorm(x, g, b, 0.0).value();
  EXPECT_NEAR(y[0], -std::sqrt(1.5), 1e-12);
  EXPECT_NEAR(y[1], 0.0, 1e-12);
  EXPECT_NEAR(y[2], std::sqrt(1.5), 1e-12);
}

TEST(Ops, SoftmaxAndCrossEntropyHandCases) {
  Tape<double> tape;
  auto p = softmax(tape.constant(Tensor<double>({1, 2}, {0.0, std::log(3.0)}))).value();
  EXPECT_NEAR(p[0], 0.25, 1e-15);
  EXPECT_NEAR(p[1], 0.75, 1e-15);
  auto ce = cross_entropy(tape.constant(Tensor<double>::zeros({1, 4})), 2).value();
  EXPECT_NEAR(ce[0], std::log(4.0), 1e-15);
  EXPECT_THROW(cross_entropy(tape.constant(Tensor<double>::zeros({1, 4})), 4), DimensionError);
}

TEST(Ops, PermuteMovesAxes) {
  Tape<double> tape;
  Tensor<double> x({2, 3, 4});
  std::iota(x.data().begin(), x.data().end(), 0.0);
  auto y = permute(tape.constant(x), {2, 0, 1}).value();
  ASSERT_EQ(y.shape(), (Shape{4, 2, 3}));
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y[(c * 2 + a) * 3 + b], x[(a * 3 + b) * 4 + c]);
  EXPECT_THROW(permute(tape.constant(x), {0, 0, 1}), DimensionError);
}

TEST(Ops, NonFiniteOutputRaises) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({1}, {std::numeric_limits<double>::max()}));
  EXPECT_THROW(scale(x, 10.0), NonFiniteError);
}

class PrimitiveGradients : public ::testing::TestWithParam<std::size_t> {};

TEST_P(PrimitiveGradients, MatchCentralDifferences) {
  const auto cases = check::primitive_op_cases();
  const auto& c = cases.at(GetParam());
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto r = c.run(seed);
    EXPECT_GT(r.checked, 0u);
    EXPECT_LT(r.max_rel_error, 1e-6) << c.name << " seed " << seed << " worst " << r.worst;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, PrimitiveGradients,
                         ::testing::Range<std::size_t>(0, check::primitive_op_cases().size()),
                         [](const auto& info) { return check::primitive_op_cases()[info.param].name; });

TEST(CompositeGradients, MatchCentralDifferences) {
  for (const auto& c : check::composite_op_cases()) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto r = c.run(seed);
      EXPECT_LT(r.max_rel_error, 1e-6) << c.name << " seed " << seed << " worst " << r.worst;
    }
  }
}

TEST(Tape, FrozenParametersGetNoGradient) {
  ParameterStore<double> s;
  s.add("w", Tensor<double>::full({2, 2}, 1.0), false);
  s.add("v", Tensor<double>::full({2, 2}, 2.0), true);
  Tape<double> tape;
  auto loss = sum(matmul(tape.param(s, "w"), tape.param(s, "v")));
  auto grads = tape.backward(loss);
  EXPECT_EQ(grads.size(), 1u);
  EXPECT_TRUE(grads.count("v"));
  s.set_trainable("v", false);
  Tape<double> t2;
  auto l2 = sum(matmul(t2.param(s, "w"), t2.param(s, "v")));
  EXPECT_TRUE(t2.backward(l2).empty());
  EXPECT_EQ(t2.stats().total_bwd_macs, 0u);
}

TEST(Tape, MacLedgerCountsOnlyNeededGradients) {
  ParameterStore<double> s;
  s.add("a", Tensor<double>::full({3, 4}, 1.0), true);
  s.add("b", Tensor<double>::full({4, 5}, 1.0), false);
  Tape<double> tape;
  auto c = matmul(tape.param(s, "a"), tape.param(s, "b"));
  tape.backward(sum(c));
  const auto st = tape.stats();
  EXPECT_EQ(st.total_fwd_macs, 60u);
  EXPECT_EQ(st.total_bwd_macs, 60u);
  // Only b is needed for dA, and b is a parameter leaf, so nothing is counted as cached.
  EXPECT_EQ(st.cached_bytes, 0u);

  s.set_trainable("b", true);
  Tape<double> t2;
  t2.backward(sum(matmul(t2.param(s, "a"), t2.param(s, "b"))));
  EXPECT_EQ(t2.stats().total_bwd_macs, 120u);
}

TEST(Tape, RetainedActivationsAreCountedOnce) {
  ParameterStore<double> s;
  s.add("w", Tensor<double>::full({4, 4}, 0.5), true);
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>::full({2, 4}, 1.0));
  auto h = gelu(x);                          // constant input: nothing retained
  auto y = matmul(h, tape.param(s, "w"));    // keeps h for dW
  auto z = matmul(h, tape.param(s, "w"));    // same h again
  tape.backward(sum(add(y, z)));
  EXPECT_EQ(tape.stats().cached_bytes, h.value().bytes());
}

TEST(Tape, RegionScopesAttributeCost) {
  ParameterStore<double> s;
  s.add("w", Tensor<double>::full({2, 2}, 1.0), true);
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>::full({1, 2}, 1.0));
  Var<double> y;
  {
    auto g = tape.scope(Region::side);
    y = matmul(x, tape.param(s, "w"));
  }
  tape.backward(sum(y));
  const auto st = tape.stats();
  EXPECT_EQ(st.region(Region::side).fwd_macs, 4u);
  EXPECT_EQ(st.region(Region::backbone).fwd_macs, 0u);
  EXPECT_EQ(tape.region(), Region::backbone);
}

TEST(Tape, EmptyTapeHasZeroStats) {
  Tape<float> tape;
  const auto st = tape.stats();
  EXPECT_EQ(st.total_fwd_macs, 0u);
  EXPECT_EQ(st.total_bwd_macs, 0u);
  EXPECT_EQ(st.cached_bytes, 0u);
}

TEST(Tape, BackwardRejectsForeignOrNonScalarLoss) {
  Tape<double> a, b;
  auto x = a.constant(Tensor<double>::full({2}, 1.0));
  EXPECT_THROW(b.backward(x), TapeError);
  EXPECT_THROW(a.backward(x), DimensionError);
}

TEST(ParameterStoreTest, NamesAreUniqueAndLookupsChecked) {
  ParameterStore<float> s;
  s.add("w", Tensor<float>({2}));
  EXPECT_THROW(s.add("w", Tensor<float>({2})), ConfigError);
  EXPECT_THROW(s.id("missing"), UnknownParameterError);
  EXPECT_THROW(s.set_value(0, Tensor<float>({3})), DimensionError);
  s.set_trainable("w", true);
  EXPECT_EQ(s.trainable_elements(), 2u);
  s.freeze_all();
  EXPECT_EQ(s.trainable_elements(), 0u);
}
