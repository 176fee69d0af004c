#include "vrwkv/wkv.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <array>
#include <cmath>

namespace vrwkv {
namespace {

using testing::grad_rel_error;
using testing::max_rel_error;
using testing::random_matrix;
using testing::random_row;

Matrix column(std::initializer_list<double> values) {
  Matrix m(static_cast<Index>(values.size()), 1);
  Index i = 0;
  for (double v : values) m(i++, 0) = v;
  return m;
}

// Causal summation written out pair by pair, independent of the scan.
Matrix causal_oracle(const Matrix& k, const Matrix& v, const Vector& w, const Vector& u) {
  Matrix out(k.rows(), k.cols());
  for (Index c = 0; c < k.cols(); ++c) {
    for (Index t = 0; t < k.rows(); ++t) {
      double num = std::exp(u(c) + k(t, c)) * v(t, c);
      double den = std::exp(u(c) + k(t, c));
      for (Index i = 0; i < t; ++i) {
        const double weight = std::exp(-static_cast<double>(t - 1 - i) * w(c) + k(i, c));
        num += weight * v(i, c);
        den += weight;
      }
      out(t, c) = num / den;
    }
  }
  return out;
}

// Frozen from tests/oracles/golden.py (40-digit brute-force summation).
const std::array<double, 3> kGoldenT3 = {1.9182243651564041727, 2.0697851958289345517, 2.228744988490240407};
const std::array<double, 4> kGoldenCausalT4 = {1.0, 1.5, 2.2669563947545545898, 3.1443943217619118909};

WkvParams<double> golden_params() { return WkvParams<double>::constant(1, 0.5, 0.25); }

TEST(BiWkvDirect, ConstantValuesGiveThatConstant) {
  const Matrix k = random_matrix(3, 9, 4, -3, 3);
  const Matrix v = Matrix::Constant(9, 4, 1.75);
  const auto params = WkvParams<double>{random_row(4, 4, -3, 3), random_row(5, 4, -3, 3)};
  EXPECT_LE((bi_wkv_direct(k, v, params).array() - 1.75).abs().maxCoeff(), 1e-14);
  EXPECT_LE((bi_wkv_scan(k, v, params).array() - 1.75).abs().maxCoeff(), 1e-14);
}

TEST(BiWkvDirect, UniformWeightsGiveMean) {
  const Matrix out = bi_wkv_direct(column({0, 0}), column({1, 3}), WkvParams<double>::zeros(1));
  EXPECT_DOUBLE_EQ(out(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(out(1, 0), 2.0);
}

TEST(BiWkvDirect, GoldenThreeTokens) {
  const Matrix out = bi_wkv_direct(column({0.1, -0.2, 0.3}), column({1, 2, 3}), golden_params());
  for (Index t = 0; t < 3; ++t) EXPECT_NEAR(out(t, 0), kGoldenT3[t], 1e-14);
}

TEST(BiWkvDirect, EmptyAndMismatchedInputs) {
  EXPECT_THROW(bi_wkv_direct(Matrix(0, 2), Matrix(0, 2), WkvParams<double>::zeros(2)), EmptyInputError);
  EXPECT_THROW(bi_wkv_scan(Matrix(0, 2), Matrix(0, 2), WkvParams<double>::zeros(2)), EmptyInputError);
  EXPECT_THROW(bi_wkv_scan(Matrix::Zero(3, 2), Matrix::Zero(3, 1), WkvParams<double>::zeros(2)), DimensionError);
  EXPECT_THROW(bi_wkv_scan(Matrix::Zero(3, 2), Matrix::Zero(3, 2), WkvParams<double>::zeros(3)), DimensionError);
  auto bad = WkvParams<double>::zeros(2);
  bad.decay(0) = std::nan("");
  EXPECT_THROW(bi_wkv_scan(Matrix::Zero(3, 2), Matrix::Zero(3, 2), bad), ContractError);
}

TEST(BiWkvScan, SingleTokenReturnsValue) {
  const Matrix k = random_matrix(1, 1, 5, -3, 3);
  const Matrix v = random_matrix(2, 1, 5, -3, 3);
  const auto params = WkvParams<double>{random_row(3, 5, -3, 3), random_row(4, 5, -3, 3)};
  EXPECT_LE(max_rel_error(bi_wkv_scan(k, v, params), v), 1e-10);
  EXPECT_LE(max_rel_error(bi_wkv_scan(k, v, params), bi_wkv_direct(k, v, params)), 1e-10);
}

TEST(BiWkvScan, GoldenThreeTokens) {
  const Matrix out = bi_wkv_scan(column({0.1, -0.2, 0.3}), column({1, 2, 3}), golden_params());
  Matrix golden(3, 1);
  golden << kGoldenT3[0], kGoldenT3[1], kGoldenT3[2];
  EXPECT_LE(max_rel_error(out, golden), 1e-10);
}

TEST(BiWkvScan, MatchesDirectOnHundredSeededCases) {
  const std::array<Index, 5> lengths = {4, 16, 64, 256, 512};
  const std::array<Index, 3> widths = {1, 8, 32};
  double worst = 0.0;
  for (std::uint64_t c = 0; c < 100; ++c) {
    const Index T = lengths[c % 5];
    const Index d = widths[(c / 5) % 3];
    const Matrix k = random_matrix(4 * c, T, d, -3, 3);
    const Matrix v = random_matrix(4 * c + 1, T, d, -3, 3);
    const WkvParams<double> params{random_row(4 * c + 2, d, -3, 3), random_row(4 * c + 3, d, -3, 3)};
    worst = std::max(worst, max_rel_error(bi_wkv_scan(k, v, params), bi_wkv_direct(k, v, params)));
  }
  EXPECT_LE(worst, 1e-5);
}

TEST(BiWkvScan, PerturbationHookBreaksEquivalence) {
  const Matrix k = random_matrix(1, 16, 4, -3, 3);
  const Matrix v = random_matrix(2, 16, 4, -3, 3);
  const WkvParams<double> params{random_row(3, 4, -3, 3), random_row(4, 4, -3, 3)};
  const Matrix perturbed = bi_wkv_scan(k, v, params, ScanHooks{true});
  EXPECT_GT(max_rel_error(perturbed, bi_wkv_direct(k, v, params)), 1e-5);
}

TEST(BiWkvScan, SurvivesKeysThatOverflowNaiveExponentials) {
  Matrix k = random_matrix(1, 32, 3, -3, 3);
  k.col(0).array() += 800.0;
  k.col(1).array() -= 800.0;
  const Matrix v = random_matrix(2, 32, 3, -3, 3);
  const auto params = WkvParams<double>{random_row(3, 3, -3, 3), random_row(4, 3, -3, 3)};
  const Matrix scan = bi_wkv_scan(k, v, params);
  EXPECT_TRUE(scan.allFinite());
  EXPECT_LE(max_rel_error(scan, bi_wkv_direct(k, v, params)), 1e-10);
}

TEST(BiWkvScan, FloatInstantiation) {
  const RowMatrix<float> k = random_matrix(1, 20, 4, -3, 3).cast<float>();
  const RowMatrix<float> v = random_matrix(2, 20, 4, -3, 3).cast<float>();
  const auto params = WkvParams<float>::constant(4, 0.5f, 0.25f);
  const RowMatrix<float> diff = bi_wkv_scan(k, v, params) - bi_wkv_direct(k, v, params);
  EXPECT_LE(diff.cwiseAbs().maxCoeff(), 1e-4f);
}

// Properties over random inputs.

TEST(BiWkvProperties, OutputsAreConvexCombinations) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const Index T = 1 + static_cast<Index>(seed * 5 % 40);
    const Matrix k = random_matrix(seed, T, 6, -3, 3);
    const Matrix v = random_matrix(seed + 1000, T, 6, -3, 3);
    const WkvParams<double> params{random_row(seed + 2000, 6, -3, 3), random_row(seed + 3000, 6, -3, 3)};
    const Matrix out = bi_wkv_scan(k, v, params);
    for (Index c = 0; c < 6; ++c) {
      EXPECT_GE(out.col(c).minCoeff(), v.col(c).minCoeff() - 1e-12);
      EXPECT_LE(out.col(c).maxCoeff(), v.col(c).maxCoeff() + 1e-12);
    }
  }
}

TEST(BiWkvProperties, KeyShiftInvariance) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Matrix k = random_matrix(seed, 24, 5, -3, 3);
    const Matrix v = random_matrix(seed + 1, 24, 5, -3, 3);
    const WkvParams<double> params{random_row(seed + 2, 5, -3, 3), random_row(seed + 3, 5, -3, 3)};
    const Matrix shifted = (k.array() + 2.5).matrix();
    EXPECT_LE((bi_wkv_scan(shifted, v, params) - bi_wkv_scan(k, v, params)).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(BiWkvProperties, PermutationSymmetryWithoutDecay) {
  const Matrix k = random_matrix(1, 10, 3, -3, 3);
  const Matrix v = random_matrix(2, 10, 3, -3, 3);
  const WkvParams<double> params{Vector::Zero(3), random_row(3, 3, -3, 3)};
  Matrix k2 = k, v2 = v;
  k2.row(2).swap(k2.row(7));
  v2.row(2).swap(v2.row(7));
  const Matrix a = bi_wkv_scan(k, v, params);
  const Matrix b = bi_wkv_scan(k2, v2, params);
  for (Index t : {0, 1, 3, 4, 5, 6, 8, 9}) {
    EXPECT_LE((a.row(t) - b.row(t)).cwiseAbs().maxCoeff(), 1e-12) << "t=" << t;
  }
}

TEST(ScanState, PositiveDenominatorAfterAbsorbAndShiftInvariantReadout) {
  ScanState<double> state(3);
  EXPECT_TRUE((state.log_weight() == -std::numeric_limits<double>::infinity()).all());
  EXPECT_TRUE((state.mean() == 0.0).all());
  const RowArray<double> k = random_row(1, 3, -3, 3).array();
  const RowArray<double> v = random_row(2, 3, -3, 3).array();
  state.absorb(k, v);
  EXPECT_TRUE((state.b > 0.0).all());
  state.decay(RowArray<double>::Constant(3, 0.4));
  state.absorb(k * 0.5, v * 2.0);
  const RowArray<double> mean = state.mean();
  const RowArray<double> lw = state.log_weight();
  // Same represented sums with the common exponent moved by 7.
  ScanState<double> moved = state;
  moved.p += 7.0;
  moved.a *= std::exp(-7.0);
  moved.b *= std::exp(-7.0);
  EXPECT_LE((moved.mean() - mean).abs().maxCoeff(), 1e-14);
  EXPECT_LE((moved.log_weight() - lw).abs().maxCoeff(), 1e-13);
}

// Gradients.

double weighted_output(const Matrix& k, const Matrix& v, const WkvParams<double>& p, const Matrix& g) {
  return bi_wkv_direct(k, v, p).cwiseProduct(g).sum();
}

TEST(BiWkvBackward, ZeroUpstreamGivesZeroGradients) {
  const Matrix k = random_matrix(1, 8, 4, -3, 3);
  const Matrix v = random_matrix(2, 8, 4, -3, 3);
  const WkvParams<double> params{random_row(3, 4, -3, 3), random_row(4, 4, -3, 3)};
  const auto grads = bi_wkv_backward(k, v, params, Matrix::Zero(8, 4));
  EXPECT_EQ(grads.keys.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(grads.values.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(grads.decay.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(grads.bonus.cwiseAbs().maxCoeff(), 0.0);
}

TEST(BiWkvBackward, ConstantValuesGiveNoDecayGradient) {
  const Matrix k = random_matrix(1, 8, 4, -3, 3);
  const Matrix v = Matrix::Constant(8, 4, -0.6);
  const WkvParams<double> params{random_row(3, 4, -3, 3), random_row(4, 4, -3, 3)};
  Matrix g = Matrix::Zero(8, 4);
  g.col(2) = random_matrix(5, 8, 1, -1, 1);
  const auto grads = bi_wkv_backward(k, v, params, g);
  EXPECT_LE(std::abs(grads.decay(2)), 1e-12);
}

TEST(BiWkvBackward, MatchesFiniteDifferences) {
  const Index T = 8, d = 4;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Matrix k = random_matrix(10 * seed, T, d, -2, 2);
    const Matrix v = random_matrix(10 * seed + 1, T, d, -2, 2);
    const WkvParams<double> params{random_row(10 * seed + 2, d, -2, 2), random_row(10 * seed + 3, d, -2, 2)};
    const Matrix g = random_matrix(10 * seed + 4, T, d, -1, 1);
    const auto grads = bi_wkv_backward(k, v, params, g);

    const Matrix nk = testing::numeric_gradient([&](const Matrix& x) { return weighted_output(x, v, params, g); }, k);
    const Matrix nv = testing::numeric_gradient([&](const Matrix& x) { return weighted_output(k, x, params, g); }, v);
    const Matrix nw = testing::numeric_gradient(
        [&](const Matrix& x) { return weighted_output(k, v, {x.row(0), params.bonus}, g); }, Matrix(params.decay));
    const Matrix nu = testing::numeric_gradient(
        [&](const Matrix& x) { return weighted_output(k, v, {params.decay, x.row(0)}, g); }, Matrix(params.bonus));
    EXPECT_LE(grad_rel_error(grads.keys, nk), 1e-4);
    EXPECT_LE(grad_rel_error(grads.values, nv), 1e-4);
    EXPECT_LE(grad_rel_error(grads.decay, nw), 1e-4);
    EXPECT_LE(grad_rel_error(grads.bonus, nu), 1e-4);
  }
}

TEST(BiWkvBackward, LinearAndPairwiseRoutesAgree) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Index T = 3 + static_cast<Index>(seed * 13 % 60);
    const Matrix k = random_matrix(seed, T, 5, -3, 3);
    const Matrix v = random_matrix(seed + 1, T, 5, -3, 3);
    const WkvParams<double> params{random_row(seed + 2, 5, -3, 3), random_row(seed + 3, 5, -3, 3)};
    const Matrix g = random_matrix(seed + 4, T, 5, -1, 1);
    const auto fast = bi_wkv_backward(k, v, params, g);
    const auto slow = bi_wkv_direct_backward(k, v, params, g);
    EXPECT_LE(grad_rel_error(fast.keys, slow.keys, 1e-9), 1e-8);
    EXPECT_LE(grad_rel_error(fast.values, slow.values, 1e-9), 1e-8);
    EXPECT_LE(grad_rel_error(fast.decay, slow.decay, 1e-9), 1e-8);
    EXPECT_LE(grad_rel_error(fast.bonus, slow.bonus, 1e-9), 1e-8);
  }
}

TEST(BiWkvBackward, UpstreamShapeMismatch) {
  EXPECT_THROW(bi_wkv_backward(Matrix::Zero(4, 2), Matrix::Zero(4, 2), WkvParams<double>::zeros(2), Matrix::Zero(3, 2)),
               DimensionError);
}

// Causal variant.

TEST(CausalWkv, FirstTokenSeesOnlyItself) {
  const Matrix k = random_matrix(1, 6, 3, -3, 3);
  const Matrix v = random_matrix(2, 6, 3, -3, 3);
  const Matrix out = causal_wkv(k, v, random_row(3, 3, 0, 3), random_row(4, 3, -3, 3));
  EXPECT_LE((out.row(0) - v.row(0)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(CausalWkv, UniformWeightsGiveRunningMean) {
  const Matrix v = random_matrix(2, 7, 2, -3, 3);
  const Matrix out = causal_wkv(Matrix::Zero(7, 2), v, Vector::Zero(2), Vector::Zero(2));
  for (Index t = 0; t < 7; ++t) {
    const Vector mean = v.topRows(t + 1).colwise().mean();
    EXPECT_LE((out.row(t) - mean).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(CausalWkv, GoldenFourTokens) {
  const Matrix out = causal_wkv(Matrix::Zero(4, 1), column({1, 2, 3, 4}), Vector::Ones(1), Vector::Zero(1));
  for (Index t = 0; t < 4; ++t) EXPECT_NEAR(out(t, 0), kGoldenCausalT4[t], 1e-14);
}

TEST(CausalWkv, MatchesPairwiseOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Matrix k = random_matrix(seed, 33, 4, -3, 3);
    const Matrix v = random_matrix(seed + 1, 33, 4, -3, 3);
    const Vector w = random_row(seed + 2, 4, 0, 3);
    const Vector u = random_row(seed + 3, 4, -3, 3);
    EXPECT_LE(max_rel_error(causal_wkv(k, v, w, u), causal_oracle(k, v, w, u)), 1e-10);
  }
}

TEST(CausalWkv, NegativeDecayIsContractError) {
  Vector w = Vector::Ones(2);
  w(1) = -0.1;
  EXPECT_THROW(causal_wkv(Matrix::Zero(3, 2), Matrix::Zero(3, 2), w, Vector::Zero(2)), ContractError);
}

}  // namespace
}  // namespace vrwkv
