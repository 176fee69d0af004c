#pragma once

#include "vrwkv/core.hpp"
#include "vrwkv/linalg.hpp"
#include "vrwkv/memory.hpp"
#include "vrwkv/tensor.hpp"
#include "vrwkv/wkv.hpp"

#include <cmath>
#include <string>

namespace vrwkv {

enum class AttentionMechanism { softmax_full, sparse_causal, aft, windowed };

struct AttentionConfig {
  AttentionMechanism mechanism = AttentionMechanism::softmax_full;
  /// Window length M, windowed attention only.
  Index window = 0;
  /// Divide scores by √d. The plain softmax(QKᵀ)V form has this off.
  bool scale = true;
};

template <typename Scalar>
struct AttentionGradients {
  RowMatrix<Scalar> queries;
  RowMatrix<Scalar> keys;
  RowMatrix<Scalar> values;
};

/// Softmax attention output together with the T×T probabilities the
/// backward pass needs. The probabilities stay charged to the arena.
template <typename Scalar>
struct SoftmaxAttention {
  RowMatrix<Scalar> output;
  memory::CountedMatrix<Scalar> probs;
};

template <typename Scalar>
SoftmaxAttention<Scalar> softmax_attention_forward(const RowMatrix<Scalar>& q, const RowMatrix<Scalar>& k,
                                                   const RowMatrix<Scalar>& v, bool scale) {
  if (q.cols() != k.cols() || k.rows() != v.rows()) {
    throw DimensionError("softmax_attention: query/key/value shapes disagree");
  }
  SoftmaxAttention<Scalar> result;
  {
    memory::CountedMatrix<Scalar> kt(k.cols(), k.rows());
    *kt = k.transpose();
    result.probs = memory::CountedMatrix<Scalar>(q.rows(), k.rows());
    matmul_into(q, *kt, *result.probs);
  }
  if (scale) *result.probs *= Scalar(1) / std::sqrt(Scalar(q.cols()));
  softmax_rows_inplace(*result.probs);
  memory::CountedMatrix<Scalar> out(q.rows(), v.cols());
  matmul_into(*result.probs, v, *out);
  require_finite(*out, "softmax_attention");
  result.output = out.take();
  return result;
}

template <typename Scalar>
AttentionGradients<Scalar> softmax_attention_backward(const RowMatrix<Scalar>& q, const RowMatrix<Scalar>& k,
                                                      const RowMatrix<Scalar>& v, const RowMatrix<Scalar>& probs,
                                                      const RowMatrix<Scalar>& upstream, bool scale) {
  if (upstream.rows() != q.rows() || upstream.cols() != v.cols()) {
    throw DimensionError("softmax_attention_backward: upstream shape disagrees with output");
  }
  memory::CountedMatrix<Scalar> dv(v.rows(), v.cols());
  matmul_tn_into(probs, upstream, *dv);

  memory::CountedMatrix<Scalar> dscores(q.rows(), k.rows());
  {
    memory::CountedMatrix<Scalar> vt(v.cols(), v.rows());
    *vt = v.transpose();
    matmul_into(upstream, *vt, *dscores);
  }
  // Softmax Jacobian, in place: dS = P ⊙ (dP - rowsum(dP ⊙ P)).
  for (Index i = 0; i < dscores->rows(); ++i) {
    const Scalar dot = dscores->row(i).dot(probs.row(i));
    dscores->row(i) = (probs.row(i).array() * (dscores->row(i).array() - dot)).matrix();
  }
  if (scale) *dscores *= Scalar(1) / std::sqrt(Scalar(q.cols()));

  memory::CountedMatrix<Scalar> dq(q.rows(), q.cols());
  memory::CountedMatrix<Scalar> dk(k.rows(), k.cols());
  matmul_into(*dscores, k, *dq);
  matmul_tn_into(*dscores, q, *dk);
  return {dq.take(), dk.take(), dv.take()};
}

/// softmax(QKᵀ)V, materializing the full T×T score matrix.
template <typename Scalar>
RowMatrix<Scalar> softmax_attention(const RowMatrix<Scalar>& q, const RowMatrix<Scalar>& k,
                                    const RowMatrix<Scalar>& v, const AttentionConfig& config = {}) {
  return softmax_attention_forward(q, k, v, config.scale).output;
}

/// Softmax attention within non-overlapping windows of `window` consecutive
/// tokens. A trailing partial window attends only over its real tokens.
template <typename Scalar>
RowMatrix<Scalar> windowed_attention(const RowMatrix<Scalar>& q, const RowMatrix<Scalar>& k,
                                     const RowMatrix<Scalar>& v, Index window, const AttentionConfig& config = {}) {
  require_same_shape(q, k, "windowed_attention");
  require_same_shape(k, v, "windowed_attention");
  if (window < 1 || window > q.rows()) {
    throw ConfigError("windowed_attention: window " + std::to_string(window) + " outside [1, " +
                      std::to_string(q.rows()) + "]");
  }
  memory::CountedMatrix<Scalar> out(q.rows(), v.cols());
  for (Index begin = 0; begin < q.rows(); begin += window) {
    const Index len = std::min(window, q.rows() - begin);
    const RowMatrix<Scalar> qw = q.middleRows(begin, len), kw = k.middleRows(begin, len), vw = v.middleRows(begin, len);
    out->middleRows(begin, len) = softmax_attention_forward(qw, kw, vw, config.scale).output;
  }
  return out.take();
}

template <typename Scalar>
AttentionGradients<Scalar> windowed_attention_backward(const RowMatrix<Scalar>& q, const RowMatrix<Scalar>& k,
                                                       const RowMatrix<Scalar>& v, Index window,
                                                       const RowMatrix<Scalar>& upstream,
                                                       const AttentionConfig& config = {}) {
  if (window < 1 || window > q.rows()) throw ConfigError("windowed_attention_backward: bad window");
  AttentionGradients<Scalar> grads{RowMatrix<Scalar>(q.rows(), q.cols()), RowMatrix<Scalar>(k.rows(), k.cols()),
                                   RowMatrix<Scalar>(v.rows(), v.cols())};
  memory::Charge hold(3 * q.size());
  for (Index begin = 0; begin < q.rows(); begin += window) {
    const Index len = std::min(window, q.rows() - begin);
    const RowMatrix<Scalar> qw = q.middleRows(begin, len), kw = k.middleRows(begin, len), vw = v.middleRows(begin, len);
    const RowMatrix<Scalar> gw = upstream.middleRows(begin, len);
    auto fwd = softmax_attention_forward(qw, kw, vw, config.scale);
    auto part = softmax_attention_backward(qw, kw, vw, *fwd.probs, gw, config.scale);
    grads.queries.middleRows(begin, len) = part.queries;
    grads.keys.middleRows(begin, len) = part.keys;
    grads.values.middleRows(begin, len) = part.values;
  }
  return grads;
}

namespace detail {

/// Key/value rows frame `i` attends to: frame 0 alone for i = 0, otherwise
/// frame 0 followed by frame i-1.
template <typename Scalar>
RowMatrix<Scalar> sparse_causal_keys(const RowMatrix<Scalar>& z, Index frame, Index per_frame) {
  if (frame == 0) return z.topRows(per_frame);
  RowMatrix<Scalar> keys(2 * per_frame, z.cols());
  keys.topRows(per_frame) = z.topRows(per_frame);
  keys.bottomRows(per_frame) = z.middleRows((frame - 1) * per_frame, per_frame);
  return keys;
}

inline void check_frames(Index rows, Index frames, const char* what) {
  if (frames < 1 || rows % frames != 0 || rows == 0) {
    throw DimensionError(std::string(what) + ": " + std::to_string(rows) + " rows do not split into " +
                         std::to_string(frames) + " frames");
  }
}

}  // namespace detail

/// Sparse-causal attention over `frames` stacked frames of z (rows are
/// frame-major tokens). Queries, keys and values are z itself.
template <typename Scalar>
RowMatrix<Scalar> sparse_causal_attention(const RowMatrix<Scalar>& z, Index frames, const AttentionConfig& config = {}) {
  detail::check_frames(z.rows(), frames, "sparse_causal_attention");
  const Index n = z.rows() / frames;
  memory::CountedMatrix<Scalar> out(z.rows(), z.cols());
  for (Index f = 0; f < frames; ++f) {
    memory::CountedMatrix<Scalar> kv(f == 0 ? n : 2 * n, z.cols());
    *kv = detail::sparse_causal_keys(z, f, n);
    const RowMatrix<Scalar> q = z.middleRows(f * n, n);
    out->middleRows(f * n, n) = softmax_attention_forward(q, *kv, *kv, config.scale).output;
  }
  return out.take();
}

/// Gradient of sum(upstream ⊙ sparse_causal_attention(z)) with respect to z.
template <typename Scalar>
RowMatrix<Scalar> sparse_causal_attention_backward(const RowMatrix<Scalar>& z, Index frames,
                                                   const RowMatrix<Scalar>& upstream,
                                                   const AttentionConfig& config = {}) {
  detail::check_frames(z.rows(), frames, "sparse_causal_attention_backward");
  require_same_shape(z, upstream, "sparse_causal_attention_backward");
  const Index n = z.rows() / frames;
  memory::CountedMatrix<Scalar> dz(z.rows(), z.cols());
  dz->setZero();
  for (Index f = 0; f < frames; ++f) {
    memory::CountedMatrix<Scalar> kv(f == 0 ? n : 2 * n, z.cols());
    *kv = detail::sparse_causal_keys(z, f, n);
    const RowMatrix<Scalar> q = z.middleRows(f * n, n);
    const RowMatrix<Scalar> g = upstream.middleRows(f * n, n);
    auto fwd = softmax_attention_forward(q, *kv, *kv, config.scale);
    auto part = softmax_attention_backward(q, *kv, *kv, *fwd.probs, g, config.scale);
    dz->middleRows(f * n, n) += part.queries;
    const RowMatrix<Scalar> dkv = part.keys + part.values;
    dz->topRows(n) += dkv.topRows(n);
    if (f > 0) dz->middleRows((f - 1) * n, n) += dkv.bottomRows(n);
  }
  return dz.take();
}

template <typename Scalar>
BasicTensor<Scalar> sparse_causal_attention(const BasicTensor<Scalar>& z, const AttentionConfig& config = {}) {
  if (z.rank() != 3) throw DimensionError("sparse_causal_attention: expected [frames x tokens x d]");
  const RowMatrix<Scalar> flat = z.reshaped(z.extent(0) * z.extent(1));
  const RowMatrix<Scalar> out = sparse_causal_attention(flat, static_cast<Index>(z.extent(0)), config);
  return BasicTensor<Scalar>::from_matrix(out).with_shape(z.shape());
}

/// Per-frame bidirectional WKV over the same frame-stacked layout; the
/// linear-time replacement for sparse_causal_attention. Keys and values are z.
template <typename Scalar>
RowMatrix<Scalar> sparse_wkv_attention(const RowMatrix<Scalar>& z, Index frames, const WkvParams<Scalar>& params) {
  detail::check_frames(z.rows(), frames, "sparse_wkv_attention");
  const Index n = z.rows() / frames;
  memory::CountedMatrix<Scalar> out(z.rows(), z.cols());
  for (Index f = 0; f < frames; ++f) {
    const auto frame = z.middleRows(f * n, n);
    out->middleRows(f * n, n) = bi_wkv_scan(frame, frame, params);
  }
  return out.take();
}

template <typename Scalar>
RowMatrix<Scalar> sparse_wkv_attention_backward(const RowMatrix<Scalar>& z, Index frames,
                                                const WkvParams<Scalar>& params, const RowMatrix<Scalar>& upstream) {
  detail::check_frames(z.rows(), frames, "sparse_wkv_attention_backward");
  const Index n = z.rows() / frames;
  memory::CountedMatrix<Scalar> dz(z.rows(), z.cols());
  for (Index f = 0; f < frames; ++f) {
    const auto frame = z.middleRows(f * n, n);
    auto grads = bi_wkv_backward(frame, frame, params, upstream.middleRows(f * n, n));
    dz->middleRows(f * n, n) = grads.keys + grads.values;
  }
  return dz.take();
}

/// Attention-free causal aggregation with a learned positional bias:
/// out_t = Σ_{i≤t} e^{b_{t,i}+k_i} v_i / Σ_{i≤t} e^{b_{t,i}+k_i}. Only the
/// lower triangle of `bias` (i ≤ t) is read.
template <typename Scalar>
RowMatrix<Scalar> aft_attention(const RowMatrix<Scalar>& k, const RowMatrix<Scalar>& v, const RowMatrix<Scalar>& bias) {
  require_same_shape(k, v, "aft_attention");
  if (k.rows() == 0) throw EmptyInputError("aft_attention: no tokens");
  if (bias.rows() != k.rows() || bias.cols() != k.rows()) {
    throw DimensionError("aft_attention: bias must be T x T");
  }
  const Index tokens = k.rows();
  for (Index t = 0; t < tokens; ++t) {
    if (!bias.row(t).head(t + 1).allFinite()) throw ContractError("aft_attention: non-finite bias");
  }
  memory::CountedMatrix<Scalar> out(tokens, k.cols());
  memory::CountedMatrix<Scalar> logits(tokens, k.cols());
  auto& lw = logits.get();
  for (Index t = 0; t < tokens; ++t) {
    auto block = lw.topRows(t + 1);
    block = k.topRows(t + 1);
    block.colwise() += bias.row(t).head(t + 1).transpose();
    const RowArray<Scalar> top = block.colwise().maxCoeff().array();
    block = (block.array().rowwise() - top).exp().matrix();
    out->row(t) = (block.cwiseProduct(v.topRows(t + 1)).colwise().sum().array() / block.colwise().sum().array()).matrix();
  }
  require_finite(*out, "aft_attention");
  return out.take();
}

/// Bias matrix of channel-wise time decay, b_{t,i} = -(t - i)·w, i ≤ t.
/// `w` must be a scalar here because AFT biases are shared across channels.
template <typename Scalar>
RowMatrix<Scalar> time_decay_bias(Index tokens, Scalar w) {
  RowMatrix<Scalar> bias = RowMatrix<Scalar>::Zero(tokens, tokens);
  for (Index t = 0; t < tokens; ++t) {
    for (Index i = 0; i <= t; ++i) bias(t, i) = -Scalar(t - i) * w;
  }
  return bias;
}

}  // namespace vrwkv
