#include "vrwkv/attention.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace vrwkv;
using vrwkv::testing::grad_rel_error;
using vrwkv::testing::max_rel_error;
using vrwkv::testing::numeric_gradient;
using vrwkv::testing::random_matrix;

namespace {

const AttentionConfig kLiteral{.scale = false};

// Straight-line softmax(QKᵀ)V, one query at a time.
Matrix naive_softmax(const Matrix& q, const Matrix& k, const Matrix& v) {
  Matrix out(q.rows(), v.cols());
  for (Index t = 0; t < q.rows(); ++t) {
    Eigen::VectorXd s(k.rows());
    for (Index i = 0; i < k.rows(); ++i) s(i) = q.row(t).dot(k.row(i));
    s = (s.array() - s.maxCoeff()).exp();
    s /= s.sum();
    out.row(t).setZero();
    for (Index i = 0; i < k.rows(); ++i) out.row(t) += s(i) * v.row(i);
  }
  return out;
}

}  // namespace

TEST(SoftmaxAttention, ZeroKeysGiveColumnMean) {
  const Matrix q = random_matrix(1, 6, 3);
  const Matrix k = Matrix::Zero(6, 3);
  const Matrix v = random_matrix(2, 6, 4);
  const Matrix out = softmax_attention(q, k, v, kLiteral);
  const Vector mean = v.colwise().mean();
  for (Index t = 0; t < 6; ++t) EXPECT_LT(max_rel_error(out.row(t), mean), 1e-12);
}

TEST(SoftmaxAttention, SingleTokenReturnsValue) {
  const Matrix q = random_matrix(3, 1, 5), k = random_matrix(4, 1, 5), v = random_matrix(5, 1, 5);
  EXPECT_EQ(softmax_attention(q, k, v, kLiteral), v);
}

TEST(SoftmaxAttention, ConstantValuesPassThrough) {
  const Matrix q = random_matrix(6, 7, 3, -3, 3), k = random_matrix(7, 7, 3, -3, 3);
  const Matrix v = Matrix::Constant(7, 3, 2.5);
  EXPECT_LT(max_rel_error(softmax_attention(q, k, v, kLiteral), v), 1e-12);
}

TEST(SoftmaxAttention, MatchesNaiveDefinition) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Matrix q = random_matrix(seed, 9, 4, -2, 2), k = random_matrix(seed + 100, 9, 4, -2, 2);
    const Matrix v = random_matrix(seed + 200, 9, 4);
    EXPECT_LT(max_rel_error(softmax_attention(q, k, v, kLiteral), naive_softmax(q, k, v)), 1e-10);
    const Matrix scaled = naive_softmax(q / 2.0, k, v);
    EXPECT_LT(max_rel_error(softmax_attention(q, k, v), scaled), 1e-10);
  }
}

TEST(SoftmaxAttention, ShapeMismatchThrows) {
  EXPECT_THROW(softmax_attention(Matrix(3, 2), Matrix(3, 3), Matrix(3, 3)), DimensionError);
  EXPECT_THROW(softmax_attention(Matrix(3, 2), Matrix(3, 2), Matrix(4, 2)), DimensionError);
}

TEST(SoftmaxAttention, BackwardMatchesFiniteDifferences) {
  const Matrix q = random_matrix(11, 5, 3), k = random_matrix(12, 5, 3), v = random_matrix(13, 5, 3);
  const Matrix g = random_matrix(14, 5, 3);
  auto fwd = softmax_attention_forward(q, k, v, true);
  auto grads = softmax_attention_backward(q, k, v, *fwd.probs, g, true);
  auto loss_q = [&](const Matrix& x) { return softmax_attention(x, k, v).cwiseProduct(g).sum(); };
  auto loss_k = [&](const Matrix& x) { return softmax_attention(q, x, v).cwiseProduct(g).sum(); };
  auto loss_v = [&](const Matrix& x) { return softmax_attention(q, k, x).cwiseProduct(g).sum(); };
  EXPECT_LT(grad_rel_error(grads.queries, numeric_gradient(loss_q, q)), 1e-6);
  EXPECT_LT(grad_rel_error(grads.keys, numeric_gradient(loss_k, k)), 1e-6);
  EXPECT_LT(grad_rel_error(grads.values, numeric_gradient(loss_v, v)), 1e-6);
}

TEST(SoftmaxAttention, ForwardCountsScoreMatrix) {
  memory::ElementArena arena;
  memory::ArenaScope scope(arena);
  const Matrix q = random_matrix(1, 16, 4);
  auto fwd = softmax_attention_forward(q, q, q, true);
  EXPECT_EQ(arena.live(), 16 * 16);
  EXPECT_GE(arena.peak(), 16 * 16 + 16 * 4);
}

TEST(SparseCausalAttention, SingleFrameIsSelfAttention) {
  const Matrix z = random_matrix(21, 4, 3);
  EXPECT_LT(max_rel_error(sparse_causal_attention(z, 1, kLiteral), naive_softmax(z, z, z)), 1e-12);
}

TEST(SparseCausalAttention, TwoFramesEnumerated) {
  const Matrix z = random_matrix(22, 6, 3);
  const Matrix out = sparse_causal_attention(z, 2, kLiteral);
  const Matrix f0 = z.topRows(3);
  const Matrix f1 = z.bottomRows(3);
  Matrix keys1(6, 3);
  keys1 << f0, f0;
  EXPECT_LT(max_rel_error(out.topRows(3), naive_softmax(f0, f0, f0)), 1e-12);
  EXPECT_LT(max_rel_error(out.bottomRows(3), naive_softmax(f1, keys1, keys1)), 1e-12);
}

TEST(SparseCausalAttention, ThreeFramesUseFirstAndPrevious) {
  const Matrix z = random_matrix(23, 6, 2);
  const Matrix out = sparse_causal_attention(z, 3, kLiteral);
  Matrix keys2(4, 2);
  keys2 << z.topRows(2), z.middleRows(2, 2);
  const Matrix f2 = z.bottomRows(2);
  EXPECT_LT(max_rel_error(out.bottomRows(2), naive_softmax(f2, keys2, keys2)), 1e-12);
}

TEST(SparseCausalAttention, TensorOverloadKeepsShape) {
  const Matrix z = random_matrix(24, 6, 2);
  const Tensor zt({3, 2, 2}, std::vector<double>(z.data(), z.data() + z.size()));
  const Tensor out = sparse_causal_attention(zt);
  EXPECT_EQ(out.shape(), zt.shape());
  EXPECT_LT(max_rel_error(out.reshaped(6), sparse_causal_attention(z, 3)), 1e-15);
  EXPECT_THROW(sparse_causal_attention(Tensor({6, 2}, std::vector<double>(12, 0.0))), DimensionError);
}

TEST(SparseCausalAttention, FrameSplitErrors) {
  EXPECT_THROW(sparse_causal_attention(Matrix(Matrix::Zero(5, 2)), 2), DimensionError);
  EXPECT_THROW(sparse_causal_attention(Matrix(Matrix::Zero(4, 2)), 0), DimensionError);
}

TEST(SparseCausalAttention, BackwardMatchesFiniteDifferences) {
  const Matrix z = random_matrix(25, 9, 2);
  const Matrix g = random_matrix(26, 9, 2);
  const Matrix dz = sparse_causal_attention_backward(z, 3, g);
  auto loss = [&](const Matrix& x) { return sparse_causal_attention(x, 3).cwiseProduct(g).sum(); };
  EXPECT_LT(grad_rel_error(dz, numeric_gradient(loss, z)), 1e-6);
}

TEST(SparseWkvAttention, PerFrameScan) {
  const Matrix z = random_matrix(27, 8, 3);
  const auto params = WkvParams<double>::constant(3, 0.4, 0.1);
  const Matrix out = sparse_wkv_attention(z, 2, params);
  EXPECT_EQ(out.topRows(4), bi_wkv_scan(z.topRows(4), z.topRows(4), params));
  EXPECT_EQ(out.bottomRows(4), bi_wkv_scan(z.bottomRows(4), z.bottomRows(4), params));
}

TEST(SparseWkvAttention, BackwardMatchesFiniteDifferences) {
  const Matrix z = random_matrix(28, 8, 2);
  const Matrix g = random_matrix(29, 8, 2);
  const auto params = WkvParams<double>::constant(2, 0.7, -0.3);
  const Matrix dz = sparse_wkv_attention_backward(z, 2, params, g);
  auto loss = [&](const Matrix& x) { return sparse_wkv_attention(x, 2, params).cwiseProduct(g).sum(); };
  EXPECT_LT(grad_rel_error(dz, numeric_gradient(loss, z)), 1e-6);
}

TEST(WindowedAttention, FullWindowIsSoftmax) {
  const Matrix q = random_matrix(31, 7, 3), k = random_matrix(32, 7, 3), v = random_matrix(33, 7, 3);
  EXPECT_EQ(windowed_attention(q, k, v, 7), softmax_attention(q, k, v));
}

TEST(WindowedAttention, UnitWindowReturnsValues) {
  const Matrix q = random_matrix(34, 5, 3), k = random_matrix(35, 5, 3), v = random_matrix(36, 5, 3);
  EXPECT_EQ(windowed_attention(q, k, v, 1), v);
}

TEST(WindowedAttention, BlockDiagonalWithPartialTail) {
  const Matrix q = random_matrix(37, 7, 2), k = random_matrix(38, 7, 2), v = random_matrix(39, 7, 2);
  const Matrix out = windowed_attention(q, k, v, 3, kLiteral);
  for (Index begin : {0, 3, 6}) {
    const Index len = std::min<Index>(3, 7 - begin);
    const Matrix qw = q.middleRows(begin, len), kw = k.middleRows(begin, len), vw = v.middleRows(begin, len);
    EXPECT_LT(max_rel_error(out.middleRows(begin, len), naive_softmax(qw, kw, vw)), 1e-12);
  }
}

TEST(WindowedAttention, WindowOutOfRange) {
  const Matrix x = Matrix::Zero(4, 2);
  EXPECT_THROW(windowed_attention(x, x, x, 5), ConfigError);
  EXPECT_THROW(windowed_attention(x, x, x, 0), ConfigError);
}

TEST(WindowedAttention, BackwardMatchesFiniteDifferences) {
  const Matrix q = random_matrix(41, 7, 2), k = random_matrix(42, 7, 2), v = random_matrix(43, 7, 2);
  const Matrix g = random_matrix(44, 7, 2);
  const auto grads = windowed_attention_backward(q, k, v, 3, g);
  auto loss_q = [&](const Matrix& x) { return windowed_attention(x, k, v, 3).cwiseProduct(g).sum(); };
  auto loss_k = [&](const Matrix& x) { return windowed_attention(q, x, v, 3).cwiseProduct(g).sum(); };
  auto loss_v = [&](const Matrix& x) { return windowed_attention(q, k, x, 3).cwiseProduct(g).sum(); };
  EXPECT_LT(grad_rel_error(grads.queries, numeric_gradient(loss_q, q)), 1e-6);
  EXPECT_LT(grad_rel_error(grads.keys, numeric_gradient(loss_k, k)), 1e-6);
  EXPECT_LT(grad_rel_error(grads.values, numeric_gradient(loss_v, v)), 1e-6);
}

TEST(AftAttention, DecayBiasMatchesCausalWkv) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Matrix k = random_matrix(seed, 10, 3, -2, 2), v = random_matrix(seed + 50, 10, 3);
    const double w = 0.3 + 0.2 * static_cast<double>(seed);
    const Matrix aft = aft_attention(k, v, time_decay_bias<double>(10, w));
    const Vector decay = Vector::Constant(3, w);
    const Vector bonus = Vector::Constant(3, w);
    EXPECT_LT(max_rel_error(aft, causal_wkv(k, v, decay, bonus)), 1e-10);
  }
}

TEST(AftAttention, FirstTokenIsItsValue) {
  const Matrix k = random_matrix(51, 4, 2), v = random_matrix(52, 4, 2);
  const Matrix out = aft_attention(k, v, random_matrix(53, 4, 4));
  EXPECT_LT(max_rel_error(out.row(0), v.row(0)), 1e-14);
}

TEST(AftAttention, UpperTriangleIgnoredLowerMustBeFinite) {
  const Matrix k = random_matrix(54, 3, 2), v = random_matrix(55, 3, 2);
  Matrix bias = Matrix::Zero(3, 3);
  const Matrix base = aft_attention(k, v, bias);
  bias(0, 2) = std::numeric_limits<double>::infinity();
  EXPECT_EQ(aft_attention(k, v, bias), base);
  bias(2, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(aft_attention(k, v, bias), ContractError);
  EXPECT_THROW(aft_attention(k, v, Matrix(Matrix::Zero(3, 2))), DimensionError);
}

TEST(AftAttention, ZeroBiasZeroKeysIsRunningMean) {
  const Matrix v = random_matrix(56, 6, 3);
  const Matrix out = aft_attention(Matrix(Matrix::Zero(6, 3)), v, Matrix(Matrix::Zero(6, 6)));
  for (Index t = 0; t < 6; ++t) {
    const Vector mean = v.topRows(t + 1).colwise().mean();
    EXPECT_LT(max_rel_error(out.row(t), mean), 1e-12);
  }
}

TEST(SparseCausalAttention, IdenticalFramesMatchSingleFrame) {
  const Matrix frame = random_matrix(57, 4, 3);
  Matrix z(12, 3);
  z << frame, frame, frame;
  const Matrix single = sparse_causal_attention(frame, 1);
  const Matrix out = sparse_causal_attention(z, 3);
  for (Index f = 0; f < 3; ++f) EXPECT_LT(max_rel_error(out.middleRows(f * 4, 4), single), 1e-12);
}
