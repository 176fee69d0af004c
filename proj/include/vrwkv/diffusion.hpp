#pragma once

#include "vrwkv/autodiff.hpp"
#include "vrwkv/block.hpp"
#include "vrwkv/checkpoint.hpp"
#include "vrwkv/core.hpp"
#include "vrwkv/rng.hpp"
#include "vrwkv/tensor.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace vrwkv {

/// Retention factors α_t for t = 1..steps and their running products ᾱ_t.
class NoiseSchedule {
 public:
  /// α_t = 1 - β_t with β linear from beta_first to beta_last.
  static NoiseSchedule linear(Index steps = 100, double beta_first = 1e-4, double beta_last = 2e-2);
  explicit NoiseSchedule(std::vector<double> alphas);

  Index steps() const { return static_cast<Index>(alphas_.size()); }
  /// α_t, 1 ≤ t ≤ steps.
  double alpha(Index t) const;
  /// ᾱ_t, 0 ≤ t ≤ steps, with ᾱ_0 = 1.
  double alpha_bar(Index t) const;

 private:
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
};

/// √ᾱ_t x0 + √(1-ᾱ_t) eps.
Tensor forward_diffuse(const Tensor& x0, Index t, const Tensor& eps, const NoiseSchedule& schedule);
/// One step of the chain, √α_t x_prev + √(1-α_t) eps.
Tensor forward_diffuse_step(const Tensor& x_prev, Index t, const Tensor& eps, const NoiseSchedule& schedule);

/// Class conditioning. The vector is the one-hot class indicator padded to
/// `channels`; the null condition is all zeros.
struct ConditionEmbedding {
  int class_id = -1;

  static ConditionEmbedding null() { return {}; }
  static ConditionEmbedding of(int class_id) { return {class_id}; }

  bool is_null() const { return class_id < 0; }
  Vector vector(Index channels) const;
};

enum class ShapeKind { square = 0, circle = 1, triangle = 2 };
inline constexpr int kShapeClasses = 3;

struct ShapeMotion {
  ShapeKind kind = ShapeKind::square;
  /// Centre of the shape in frame 0, in pixels.
  Index x = 0, y = 0;
  /// Pixels moved per frame.
  Index dx = 0, dy = 0;
  /// Half-extent of the shape.
  Index radius = 3;
};

/// One clip [frames x 1 x height x width], +1 inside the shape and -1 outside.
Tensor render_clip(const ShapeMotion& motion, Index frames, Index height, Index width);

struct SyntheticSet {
  std::vector<Tensor> clips;
  std::vector<int> labels;
};

/// Random shapes with random start and a velocity in {-1, 0, 1}² pixels per frame.
SyntheticSet make_synthetic_dataset(Index n_clips, Index frames, Index height, Index width, Rng& rng);

struct DenoiserConfig {
  Index frames = 4;
  Index channels = 1;
  Index height = 16;
  Index width = 16;
  Index patch = 4;
  Index d = 32;
  Index blocks = 2;
  Index steps = 100;

  PatchGrid grid() const { return patch_grid(height, width, patch); }
  FrameLayout layout() const { return {frames, grid()}; }
  Index patch_dim() const { return channels * patch * patch; }
  void validate() const;
};

/// ε_θ: patch embedding plus position, step and condition rows, a stack of
/// VRWKV blocks, and a linear read-out back to patches.
struct DenoiserParams {
  DenoiserConfig config;
  Matrix embed;         // patch_dim x d
  Vector embed_bias;
  Matrix position;      // tokens per frame x d
  Matrix condition;     // d x d, applied to ConditionEmbedding::vector
  Matrix step_table;    // steps x d, row t-1 for step t
  std::vector<VrwkvBlockParams> blocks;
  Matrix unembed;       // d x patch_dim
  Vector unembed_bias;

  /// Random projections from `seed`; the read-out starts at zero so the
  /// initial prediction is ε̂ = 0.
  static DenoiserParams init(const DenoiserConfig& config, std::uint64_t seed);

  std::vector<ParamView> views();
  std::vector<ConstParamView> views() const;
  Index parameter_count() const;
  /// Puts every μ back into [0, 1] after an optimizer step.
  void clamp_mix();

  Checkpoint to_checkpoint() const;
  static DenoiserParams from_checkpoint(const Checkpoint& ckpt);
};

/// Predicted noise for a noised clip at step t.
Tensor predict_noise(const DenoiserParams& params, const Tensor& x_t, Index t, const ConditionEmbedding& cond);

namespace ad {

/// predict_noise on a tape; `params` are the leaves of record_params.
struct DenoiserVars {
  Var embed, embed_bias, position, condition, step_table, unembed, unembed_bias;
  std::vector<BlockVars> blocks;

  std::vector<Var> all() const;
};

DenoiserVars record_params(GradTape& tape, const DenoiserParams& params);
/// Returns the prediction as patch tokens (frames·tokens x patch_dim).
Var predict_noise(const DenoiserVars& vars, const DenoiserConfig& config, const Tensor& x_t, Index t,
                  const ConditionEmbedding& cond);

}  // namespace ad

/// The random choices behind one clip's loss term.
struct NoiseDraw {
  Index step = 1;
  Tensor eps;
  bool drop_condition = false;
};

/// Uniform step, standard normal ε, and condition dropout with probability p_uncond.
NoiseDraw draw_noise(const Tensor& clip, const NoiseSchedule& schedule, double p_uncond, Rng& rng);

using NoisePredictor = std::function<Tensor(const Tensor& x_t, Index t, const ConditionEmbedding& cond)>;

/// Mean over clips of mean((ε - ε̂)²) for fixed draws.
double denoising_loss(const std::vector<Tensor>& clips, const std::vector<int>& labels,
                      const std::vector<NoiseDraw>& draws, const NoiseSchedule& schedule,
                      const NoisePredictor& predict);

struct TrainStep {
  double loss = 0.0;
  /// Aligned with DenoiserParams::views().
  std::vector<Matrix> grads;
};

/// Loss and gradients for fixed draws.
TrainStep loss_and_gradients(const std::vector<Tensor>& clips, const std::vector<int>& labels,
                             const std::vector<NoiseDraw>& draws, const DenoiserParams& params,
                             const NoiseSchedule& schedule);

/// Draws steps, noise and condition dropout for every clip, then returns
/// loss_and_gradients.
TrainStep training_step(const std::vector<Tensor>& clips, const std::vector<int>& labels,
                        const DenoiserParams& params, const NoiseSchedule& schedule, Rng& rng,
                        double p_uncond = 0.1);

class SamplerDivergence : public NumericError {
 public:
  SamplerDivergence(Index step, const std::string& what) : NumericError(what), step_(step) {}
  Index step() const { return step_; }

 private:
  Index step_;
};

struct SamplerOptions {
  Index n_steps = 50;
  double guidance = 7.5;
  /// Clamp each x̂_0 to [-1, 1] before re-noising.
  bool clip_x0 = false;
};

/// Deterministic DDIM over n_steps evenly spaced steps, starting from
/// standard normal noise of `shape`. With guidance 0 only the unconditional
/// prediction is evaluated.
Tensor ddim_sample(const NoisePredictor& predict, const NoiseSchedule& schedule, const ConditionEmbedding& cond,
                   const SamplerOptions& options, const Shape& shape, Rng& rng);

struct TrainOptions {
  Index steps = 2000;
  Index batch = 8;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  double p_uncond = 0.1;
  /// Linear β range of the noise schedule; its length is config.steps.
  double beta_first = 1e-4;
  double beta_last = 2e-2;
  /// Clips in the fixed synthetic training set; batches are drawn from it.
  Index dataset_size = 512;
};

using StepCallback = std::function<void(Index step, double loss)>;

/// Adam on the synthetic set. Everything random derives from options.seed.
DenoiserParams train_denoiser(const DenoiserConfig& config, const TrainOptions& options,
                              const StepCallback& on_step = {});

/// Mean of values[begin, begin + count).
double window_mean(const std::vector<double>& values, std::size_t begin, std::size_t count);

/// The latent codec slot. Pixels are used directly, so both maps are identity.
struct IdentityCodec {
  Tensor encode(const Tensor& x) const { return x; }
  Tensor decode(const Tensor& z) const { return z; }
};

}  // namespace vrwkv
