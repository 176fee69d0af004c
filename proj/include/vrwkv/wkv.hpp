#pragma once

#include "vrwkv/core.hpp"
#include "vrwkv/memory.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace vrwkv {

/// Per-channel decay `w` and current-token bonus `u` of the weighted
/// key-value aggregation. The bidirectional form allows either sign of decay.
template <typename Scalar>
struct WkvParams {
  RowVector<Scalar> decay;
  RowVector<Scalar> bonus;

  static WkvParams zeros(Index channels) {
    return {RowVector<Scalar>::Zero(channels), RowVector<Scalar>::Zero(channels)};
  }
  static WkvParams constant(Index channels, Scalar w, Scalar u) {
    return {RowVector<Scalar>::Constant(channels, w), RowVector<Scalar>::Constant(channels, u)};
  }

  Index channels() const { return decay.size(); }

  void validate(Index channels) const {
    if (decay.size() != channels || bonus.size() != channels) {
      throw DimensionError("wkv: decay/bonus length " + std::to_string(decay.size()) + "/" +
                           std::to_string(bonus.size()) + " does not match " + std::to_string(channels) +
                           " channels");
    }
    if (!decay.allFinite() || !bonus.allFinite()) throw ContractError("wkv: non-finite decay or bonus");
  }
};

template <typename Scalar>
struct WkvGradients {
  RowMatrix<Scalar> keys;
  RowMatrix<Scalar> values;
  RowVector<Scalar> decay;
  RowVector<Scalar> bonus;
};

/// Fault injection for verification runs. When set, the forward-direction
/// decay step that carries token 0 past token 1 is multiplied by (1 + 1e-3).
struct ScanHooks {
  bool perturb_decay_step = false;
};

/// Running exponentially weighted sum over absorbed tokens, per channel.
///
/// Numerator and denominator are `a·e^p` and `b·e^p`; `p` tracks the largest
/// log-weight seen so the stored parts stay within [0, count]. An empty
/// state has p = -inf and a = b = 0.
template <typename Scalar>
struct ScanState {
  RowArray<Scalar> a;
  RowArray<Scalar> b;
  RowArray<Scalar> p;

  explicit ScanState(Index channels)
      : a(RowArray<Scalar>::Zero(channels)),
        b(RowArray<Scalar>::Zero(channels)),
        p(RowArray<Scalar>::Constant(channels, -std::numeric_limits<Scalar>::infinity())),
        q_(channels),
        old_(channels),
        new_(channels) {}

  void reset() {
    a.setZero();
    b.setZero();
    p.setConstant(-std::numeric_limits<Scalar>::infinity());
  }

  /// Multiplies every stored weight by e^{-step}.
  template <typename Derived>
  void decay(const Eigen::ArrayBase<Derived>& step) {
    p -= step;
  }

  /// Adds a token with log-weight `log_weight` and value `value`.
  template <typename DerivedW, typename DerivedV>
  void absorb(const Eigen::ArrayBase<DerivedW>& log_weight, const Eigen::ArrayBase<DerivedV>& value) {
    q_ = p.max(log_weight);
    old_ = (p - q_).exp();
    new_ = (log_weight - q_).exp();
    a = a * old_ + new_ * value;
    b = b * old_ + new_;
    p = q_;
  }

  /// Weighted mean of the absorbed values; 0 where nothing was absorbed.
  RowArray<Scalar> mean() const { return (b > Scalar(0)).select(a / b, Scalar(0)); }

  /// Log of the total weight; -inf where nothing was absorbed.
  RowArray<Scalar> log_weight() const { return p + b.log(); }

 private:
  RowArray<Scalar> q_, old_, new_;
};

namespace detail {

template <typename Scalar>
using ConstRef = Eigen::Ref<const RowMatrix<Scalar>>;
template <typename Scalar>
using MutRef = Eigen::Ref<RowMatrix<Scalar>>;

template <typename Scalar>
void check_wkv_inputs(const ConstRef<Scalar>& k, const ConstRef<Scalar>& v, const WkvParams<Scalar>& params,
                      const char* what) {
  require_same_shape(k, v, what);
  if (k.rows() == 0) throw EmptyInputError(std::string(what) + ": no tokens");
  params.validate(k.cols());
}

/// Writes the bidirectional aggregation into `out` and the log of each
/// output's normalizer into `log_norm`. Two passes, O(T·d) time.
template <typename Scalar>
void bi_wkv_scan(const ConstRef<Scalar>& k, const ConstRef<Scalar>& v, const WkvParams<Scalar>& params,
                 MutRef<Scalar> out, MutRef<Scalar> log_norm, const ScanHooks& hooks) {
  const Index tokens = k.rows();
  const Index channels = k.cols();
  const RowArray<Scalar> step = params.decay.array() / Scalar(tokens);
  const RowArray<Scalar> bonus = params.bonus.array();
  ScanState<Scalar> state(channels);

  // Right to left: out/log_norm temporarily hold the summary of tokens i > t.
  for (Index t = tokens - 1; t >= 0; --t) {
    out.row(t) = state.mean().matrix();
    log_norm.row(t) = state.log_weight().matrix();
    state.decay(step);
    state.absorb(k.row(t).array(), v.row(t).array());
  }

  // Left to right: merge prefix, suffix and the bonus-weighted current token.
  state.reset();
  RowArray<Scalar> self(channels), prefix(channels), top(channels);
  RowArray<Scalar> w_pre(channels), w_suf(channels), w_self(channels), total(channels);
  const Scalar perturb = std::log1p(Scalar(1e-3));
  for (Index t = 0; t < tokens; ++t) {
    self = bonus + k.row(t).array();
    prefix = state.log_weight();
    top = self.max(prefix).max(log_norm.row(t).array());
    w_pre = (prefix - top).exp();
    w_suf = (log_norm.row(t).array() - top).exp();
    w_self = (self - top).exp();
    total = w_pre + w_suf + w_self;
    out.row(t) = ((w_pre * state.mean() + w_suf * out.row(t).array() + w_self * v.row(t).array()) / total).matrix();
    log_norm.row(t) = (top + total.log()).matrix();
    state.decay(step);
    if (hooks.perturb_decay_step && t == 1) state.p += perturb;
    state.absorb(k.row(t).array(), v.row(t).array());
  }
}

}  // namespace detail

/// Bidirectional WKV by direct summation over all token pairs, O(T²·d).
///
/// For each output t and channel c the weights are e^{u+k_t} for i = t and
/// e^{-(|t-i|-1)·w/T + k_i} otherwise; each output is evaluated in the log
/// domain with its own maximum subtracted.
template <typename DerivedK, typename DerivedV>
RowMatrix<typename DerivedK::Scalar> bi_wkv_direct(const Eigen::MatrixBase<DerivedK>& keys,
                                                   const Eigen::MatrixBase<DerivedV>& values,
                                                   const WkvParams<typename DerivedK::Scalar>& params) {
  using Scalar = typename DerivedK::Scalar;
  const detail::ConstRef<Scalar> k(keys);
  const detail::ConstRef<Scalar> v(values);
  detail::check_wkv_inputs(k, v, params, "bi_wkv_direct");
  const Index tokens = k.rows();
  const Index channels = k.cols();
  const RowArray<Scalar> step = params.decay.array() / Scalar(tokens);

  memory::CountedMatrix<Scalar> out(tokens, channels);
  memory::CountedMatrix<Scalar> log_weight(tokens, channels);
  auto& lw = log_weight.get();
  RowArray<Scalar> top(channels);
  for (Index t = 0; t < tokens; ++t) {
    for (Index i = 0; i < tokens; ++i) {
      if (i == t) {
        lw.row(i) = (params.bonus.array() + k.row(i).array()).matrix();
      } else {
        const Scalar gap = Scalar(std::abs(t - i) - 1);
        lw.row(i) = (k.row(i).array() - gap * step).matrix();
      }
    }
    top = lw.colwise().maxCoeff().array();
    lw = (lw.array().rowwise() - top).exp().matrix();
    out->row(t) = (lw.cwiseProduct(v).colwise().sum().array() / lw.colwise().sum().array()).matrix();
  }
  require_finite(*out, "bi_wkv_direct");
  return out.take();
}

/// Bidirectional WKV in O(T·d): a right-to-left pass summarizes tokens after
/// t, a left-to-right pass accumulates tokens before t, and the two are
/// merged with the bonus term. Agrees with bi_wkv_direct to rounding.
template <typename DerivedK, typename DerivedV>
RowMatrix<typename DerivedK::Scalar> bi_wkv_scan(const Eigen::MatrixBase<DerivedK>& keys,
                                                 const Eigen::MatrixBase<DerivedV>& values,
                                                 const WkvParams<typename DerivedK::Scalar>& params,
                                                 const ScanHooks& hooks = {}) {
  using Scalar = typename DerivedK::Scalar;
  const detail::ConstRef<Scalar> k(keys);
  const detail::ConstRef<Scalar> v(values);
  detail::check_wkv_inputs(k, v, params, "bi_wkv_scan");
  memory::CountedMatrix<Scalar> out(k.rows(), k.cols());
  memory::CountedMatrix<Scalar> log_norm(k.rows(), k.cols());
  detail::bi_wkv_scan<Scalar>(k, v, params, *out, *log_norm, hooks);
  require_finite(*out, "bi_wkv_scan");
  return out.take();
}

/// Gradients of sum(upstream ⊙ bi_wkv(K, V)) with respect to K, V, w and u.
///
/// Recomputes the forward outputs and normalizers, then runs one scan in
/// each direction. Besides the outputs it keeps O(T·d) recomputed forward
/// values and O(d) running state; no T×T weights are formed.
template <typename DerivedK, typename DerivedV, typename DerivedG>
WkvGradients<typename DerivedK::Scalar> bi_wkv_backward(const Eigen::MatrixBase<DerivedK>& keys,
                                                        const Eigen::MatrixBase<DerivedV>& values,
                                                        const WkvParams<typename DerivedK::Scalar>& params,
                                                        const Eigen::MatrixBase<DerivedG>& upstream) {
  using Scalar = typename DerivedK::Scalar;
  const detail::ConstRef<Scalar> k(keys);
  const detail::ConstRef<Scalar> v(values);
  const detail::ConstRef<Scalar> g(upstream);
  detail::check_wkv_inputs(k, v, params, "bi_wkv_backward");
  require_same_shape(k, g, "bi_wkv_backward");
  const Index tokens = k.rows();
  const Index channels = k.cols();

  memory::CountedMatrix<Scalar> y(tokens, channels);
  memory::CountedMatrix<Scalar> log_norm(tokens, channels);
  detail::bi_wkv_scan<Scalar>(k, v, params, *y, *log_norm, {});

  memory::CountedMatrix<Scalar> dk(tokens, channels);
  memory::CountedMatrix<Scalar> dv(tokens, channels);
  memory::CountedMatrix<Scalar> dw(1, channels);
  memory::CountedMatrix<Scalar> du(1, channels);
  dk->setZero();
  dv->setZero();

  const RowArray<Scalar> step = params.decay.array() / Scalar(tokens);
  const Scalar inf = std::numeric_limits<Scalar>::infinity();

  // Per query token i the coefficients α_i = g_i / D_i and β_i = -α_i·y_i
  // are carried as (g_i, -g_i·y_i) with log-scale -log D_i. For each key
  // token t the scans collect Σ_{i≠t} e^{-(|t-i|-1)λ} α_i (f) and the same
  // sum weighted by (|t-i|-1) (e), which feeds the decay gradient.
  RowArray<Scalar> p(channels), f_alpha(channels), f_beta(channels), e_alpha(channels), e_beta(channels);
  RowArray<Scalar> scale(channels), q(channels), old_scale(channels), new_scale(channels);
  RowArray<Scalar> decay_acc = RowArray<Scalar>::Zero(channels);

  auto sweep = [&](Index begin, Index end, Index stride) {
    p.setConstant(-inf);
    f_alpha.setZero();
    f_beta.setZero();
    e_alpha.setZero();
    e_beta.setZero();
    for (Index t = begin; t != end; t += stride) {
      const auto kt = k.row(t).array();
      const auto vt = v.row(t).array();
      scale = (kt + p).exp();
      dv->row(t).array() += scale * f_alpha;
      dk->row(t).array() += scale * (vt * f_alpha + f_beta);
      decay_acc += scale * (vt * e_alpha + e_beta);

      e_alpha += f_alpha;
      e_beta += f_beta;
      p -= step;
      const auto lt = -log_norm->row(t).array();
      const auto gt = g.row(t).array();
      q = p.max(lt);
      old_scale = (p - q).exp();
      new_scale = (lt - q).exp();
      f_alpha = f_alpha * old_scale + new_scale * gt;
      f_beta = f_beta * old_scale - new_scale * gt * y->row(t).array();
      e_alpha *= old_scale;
      e_beta *= old_scale;
      p = q;
    }
  };
  sweep(0, tokens, 1);
  sweep(tokens - 1, -1, -1);

  // Bonus (i = t) terms.
  du->setZero();
  for (Index t = 0; t < tokens; ++t) {
    const auto self = (params.bonus.array() + k.row(t).array() - log_norm->row(t).array()).exp();
    const RowArray<Scalar> gs = self * g.row(t).array();
    dv->row(t).array() += gs;
    const RowArray<Scalar> gk = gs * (v.row(t).array() - y->row(t).array());
    dk->row(t).array() += gk;
    du->array() += gk;
  }
  dw.get() = (-decay_acc / Scalar(tokens)).matrix();

  WkvGradients<Scalar> grads{dk.take(), dv.take(), dw->row(0), du->row(0)};
  require_finite(grads.keys, "bi_wkv_backward");
  require_finite(grads.values, "bi_wkv_backward");
  require_finite(grads.decay, "bi_wkv_backward");
  require_finite(grads.bonus, "bi_wkv_backward");
  return grads;
}

/// Reference gradients evaluated pair by pair, O(T²·d).
template <typename DerivedK, typename DerivedV, typename DerivedG>
WkvGradients<typename DerivedK::Scalar> bi_wkv_direct_backward(const Eigen::MatrixBase<DerivedK>& keys,
                                                               const Eigen::MatrixBase<DerivedV>& values,
                                                               const WkvParams<typename DerivedK::Scalar>& params,
                                                               const Eigen::MatrixBase<DerivedG>& upstream) {
  using Scalar = typename DerivedK::Scalar;
  const detail::ConstRef<Scalar> k(keys);
  const detail::ConstRef<Scalar> v(values);
  const detail::ConstRef<Scalar> g(upstream);
  detail::check_wkv_inputs(k, v, params, "bi_wkv_direct_backward");
  require_same_shape(k, g, "bi_wkv_direct_backward");
  const Index tokens = k.rows();
  const Index channels = k.cols();
  const RowArray<Scalar> step = params.decay.array() / Scalar(tokens);

  memory::CountedMatrix<Scalar> dk(tokens, channels);
  memory::CountedMatrix<Scalar> dv(tokens, channels);
  memory::CountedMatrix<Scalar> weight(tokens, channels);
  dk->setZero();
  dv->setZero();
  RowArray<Scalar> dw = RowArray<Scalar>::Zero(channels);
  RowArray<Scalar> du = RowArray<Scalar>::Zero(channels);
  RowArray<Scalar> top(channels), y(channels), coeff(channels);
  auto& P = weight.get();

  for (Index t = 0; t < tokens; ++t) {
    for (Index i = 0; i < tokens; ++i) {
      if (i == t) {
        P.row(i) = (params.bonus.array() + k.row(i).array()).matrix();
      } else {
        P.row(i) = (k.row(i).array() - Scalar(std::abs(t - i) - 1) * step).matrix();
      }
    }
    top = P.colwise().maxCoeff().array();
    P = (P.array().rowwise() - top).exp().matrix();
    P.array().rowwise() /= P.colwise().sum().array();
    y = P.cwiseProduct(v).colwise().sum().array();
    const auto gt = g.row(t).array();
    for (Index i = 0; i < tokens; ++i) {
      coeff = P.row(i).array() * gt;
      dv->row(i).array() += coeff;
      const RowArray<Scalar> dlogit = coeff * (v.row(i).array() - y);
      dk->row(i).array() += dlogit;
      if (i == t) {
        du += dlogit;
      } else {
        dw -= dlogit * Scalar(std::abs(t - i) - 1) / Scalar(tokens);
      }
    }
  }
  return {dk.take(), dv.take(), dw.matrix(), du.matrix()};
}

/// Causal WKV: token t sees tokens i < t with weight e^{-(t-1-i)·w + k_i}
/// and itself with e^{u + k_t}. Decay must be non-negative. O(T·d).
template <typename DerivedK, typename DerivedV>
RowMatrix<typename DerivedK::Scalar> causal_wkv(const Eigen::MatrixBase<DerivedK>& keys,
                                                const Eigen::MatrixBase<DerivedV>& values,
                                                const RowVector<typename DerivedK::Scalar>& decay,
                                                const RowVector<typename DerivedK::Scalar>& bonus) {
  using Scalar = typename DerivedK::Scalar;
  const detail::ConstRef<Scalar> k(keys);
  const detail::ConstRef<Scalar> v(values);
  const WkvParams<Scalar> params{decay, bonus};
  detail::check_wkv_inputs(k, v, params, "causal_wkv");
  if ((decay.array() < Scalar(0)).any()) throw ContractError("causal_wkv: decay entries must be >= 0");

  const Index channels = k.cols();
  memory::CountedMatrix<Scalar> out(k.rows(), channels);
  ScanState<Scalar> state(channels);
  RowArray<Scalar> self(channels), prefix(channels), top(channels), w_pre(channels), w_self(channels);
  const RowArray<Scalar> step = decay.array();
  for (Index t = 0; t < k.rows(); ++t) {
    self = bonus.array() + k.row(t).array();
    prefix = state.log_weight();
    top = self.max(prefix);
    w_pre = (prefix - top).exp();
    w_self = (self - top).exp();
    out->row(t) = ((w_pre * state.mean() + w_self * v.row(t).array()) / (w_pre + w_self)).matrix();
    state.decay(step);
    state.absorb(k.row(t).array(), v.row(t).array());
  }
  require_finite(*out, "causal_wkv");
  return out.take();
}

}  // namespace vrwkv
