#pragma once

#include "vrwkv/autodiff.hpp"
#include "vrwkv/core.hpp"
#include "vrwkv/tensor.hpp"
#include "vrwkv/wkv.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace vrwkv {

/// Patch grid of one frame. Tokens are numbered row-major.
struct PatchGrid {
  Index rows = 1;
  Index cols = 1;

  Index tokens() const { return rows * cols; }
};

/// Token layout of a frame sequence: `frames` blocks of grid.tokens() rows.
struct FrameLayout {
  Index frames = 1;
  PatchGrid grid;

  Index tokens_per_frame() const { return grid.tokens(); }
  Index tokens() const { return frames * grid.tokens(); }
};

/// [frames x channels x height x width] pixels to (frames·tokens) x (channels·patch²)
/// rows, one per patch. Within a row the layout is channel, then patch row,
/// then patch column.
Matrix patchify(const Tensor& frames, Index patch);
Tensor unpatchify(const Matrix& tokens, Index frames, Index channels, Index height, Index width, Index patch);
PatchGrid patch_grid(Index height, Index width, Index patch);

/// Named view onto one parameter tensor, used by optimizers and checkpoints.
struct ParamView {
  std::string name;
  Eigen::Map<Matrix> value;
};

struct ConstParamView {
  std::string name;
  Eigen::Map<const Matrix> value;
};

struct VrwkvBlockParams {
  Matrix w_r, w_k, w_v;
  Vector mu_r, mu_k, mu_v;
  WkvParams<double> wkv;
  Matrix w_rc, w_kc;
  Vector mu_rc, mu_kc;
  /// Channel-mix value transform, hidden x d; w_kc is d x hidden.
  Matrix w_c;
  /// Fraction of channels moved in each of the four shift directions.
  double gamma = 0.25;
  /// Shift distance in patches.
  Index shift = 1;
  /// Run the WKV recurrence over all frames' tokens as one sequence.
  bool joint_tokens = false;

  Index channels() const { return w_r.rows(); }
  Index hidden() const { return w_kc.cols(); }

  /// Zero projections, μ = 0.5, w = u = 0.
  static VrwkvBlockParams zeros(Index channels, Index hidden = 0);
  /// Projections uniform in ±1/√fan_in from `seed`, μ = 0.5 (1 with
  /// local_init), w = u = 0.
  static VrwkvBlockParams init(Index channels, std::uint64_t seed, bool local_init = false, Index hidden = 0);

  /// Throws DimensionError / ConfigError / ContractError on bad shapes,
  /// an invalid shift configuration, or μ outside [0, 1].
  void validate() const;

  std::vector<ParamView> views(const std::string& prefix = "");
  std::vector<ConstParamView> views(const std::string& prefix = "") const;
};

/// Moves four channel groups of gamma·d channels one direction each on the
/// patch grid, in the order right, left, down, up, zero-filling at the
/// border. Remaining channels pass through.
Matrix q_shift(const Matrix& x, PatchGrid grid, Index shift = 1, double gamma = 0.25);
/// Transpose of q_shift as a linear map.
Matrix q_shift_adjoint(const Matrix& x, PatchGrid grid, Index shift = 1, double gamma = 0.25);

struct TimeMix {
  Matrix r, k, v;
};

/// R/K/V projections of the μ-blend of the current and previous frame,
/// each blend passed through q_shift before its projection.
TimeMix time_mix(const Matrix& x, const Matrix& x_prev, const VrwkvBlockParams& params, PatchGrid grid);

/// σ(R) ⊙ bi_wkv_scan(K, V) for one token sequence.
Matrix spatial_aggregate(const Matrix& r, const Matrix& k, const Matrix& v, const WkvParams<double>& wkv);

/// σ(R_c) ⊙ relu²(K_c·W_c) with R_c, K_c projected from shifted μ-blends of o and o_prev.
Matrix channel_mix(const Matrix& o, const Matrix& o_prev, const VrwkvBlockParams& params, PatchGrid grid);

/// Rows of the previous frame for every token; the first frame maps to itself.
Matrix previous_frame(const Matrix& x, const FrameLayout& layout);

/// One block over every frame: Y = X + O + CM.
Matrix block_forward(const Matrix& tokens, const FrameLayout& layout, const VrwkvBlockParams& params);

namespace ad {

/// Tape handles for one block's parameters, in VrwkvBlockParams::views order.
struct BlockVars {
  Var w_r, w_k, w_v, mu_r, mu_k, mu_v, decay, bonus, w_rc, w_kc, mu_rc, mu_kc, w_c;
  double gamma = 0.25;
  Index shift = 1;
  bool joint_tokens = false;

  std::vector<Var> all() const;
};

/// Records every parameter as a leaf (or a constant when `trainable` is false).
BlockVars record_params(GradTape& tape, const VrwkvBlockParams& params, bool trainable = true);

Var q_shift(Var x, PatchGrid grid, Index shift = 1, double gamma = 0.25);
/// Per-frame bidirectional WKV (one sequence when frames = 1). decay and
/// bonus are 1 x d nodes.
Var bi_wkv(Var k, Var v, Var decay, Var bonus, Index frames);
Var previous_frame(Var x, const FrameLayout& layout);
Var block_forward(Var tokens, const FrameLayout& layout, const BlockVars& params);

}  // namespace ad

}  // namespace vrwkv
