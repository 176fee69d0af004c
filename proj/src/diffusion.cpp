#include "vrwkv/diffusion.hpp"

#include "vrwkv/linalg.hpp"
#include "vrwkv/optim.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace vrwkv {

namespace {

Eigen::Map<const Matrix> flat(const Tensor& t) { return t.reshaped(1); }

Tensor tensor_like(const Shape& shape, const Matrix& values) {
  return Tensor(shape, std::vector<double>(values.data(), values.data() + values.size()));
}

void require_clip(const Tensor& clip, const DenoiserConfig& config, const char* what) {
  const Shape expected{static_cast<std::size_t>(config.frames), static_cast<std::size_t>(config.channels),
                       static_cast<std::size_t>(config.height), static_cast<std::size_t>(config.width)};
  if (clip.shape() != expected) {
    throw DimensionError(std::string(what) + ": clip shape " + shape_string(clip.shape()) + ", model expects " +
                         shape_string(expected));
  }
}

Matrix uniform(Rng& rng, Index rows, Index cols, double bound) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = bound * (2.0 * rng.uniform() - 1.0);
  return m;
}

Matrix sinusoidal_table(Index steps, Index d) {
  Matrix table(steps, d);
  for (Index t = 0; t < steps; ++t) {
    for (Index i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      const double angle = static_cast<double>(t + 1) * freq;
      table(t, i) = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
  }
  return table;
}

Matrix position_rows(const Matrix& position, const FrameLayout& layout) {
  Matrix out(layout.tokens(), position.cols());
  for (Index f = 0; f < layout.frames; ++f) out.middleRows(f * position.rows(), position.rows()) = position;
  return out;
}

void check_step(Index t, const NoiseSchedule& schedule, const char* what) {
  if (t < 1 || t > schedule.steps()) {
    throw ContractError(std::string(what) + ": step " + std::to_string(t) + " outside [1, " +
                        std::to_string(schedule.steps()) + "]");
  }
}

template <typename View, typename Params>
std::vector<View> denoiser_views(Params& p) {
  std::vector<View> out;
  auto add = [&](const char* name, auto& m) { out.push_back(View{name, {m.data(), m.rows(), m.cols()}}); };
  add("embed", p.embed);
  add("embed_bias", p.embed_bias);
  add("position", p.position);
  add("condition", p.condition);
  add("step_table", p.step_table);
  add("unembed", p.unembed);
  add("unembed_bias", p.unembed_bias);
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    for (auto& v : p.blocks[i].views("blocks." + std::to_string(i) + ".")) out.push_back(std::move(v));
  }
  return out;
}

Index meta_index(const Checkpoint& ckpt, const std::string& key) {
  const std::string& text = ckpt.meta_at(key);
  try {
    std::size_t used = 0;
    const long long v = std::stoll(text, &used);
    if (used != text.size()) throw IoError("");
    return static_cast<Index>(v);
  } catch (const std::exception&) {
    throw IoError("checkpoint: metadata '" + key + "' is not an integer: " + text);
  }
}

}  // namespace

NoiseSchedule NoiseSchedule::linear(Index steps, double beta_first, double beta_last) {
  if (steps < 1) throw ConfigError("schedule: need at least one step");
  std::vector<double> alphas(static_cast<std::size_t>(steps));
  for (Index t = 0; t < steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(steps - 1);
    alphas[static_cast<std::size_t>(t)] = 1.0 - (beta_first + frac * (beta_last - beta_first));
  }
  return NoiseSchedule(std::move(alphas));
}

NoiseSchedule::NoiseSchedule(std::vector<double> alphas) : alphas_(std::move(alphas)) {
  if (alphas_.empty()) throw ConfigError("schedule: need at least one step");
  alpha_bars_.reserve(alphas_.size() + 1);
  alpha_bars_.push_back(1.0);
  for (double a : alphas_) {
    if (!(a > 0.0 && a <= 1.0)) throw ConfigError("schedule: alpha " + std::to_string(a) + " outside (0, 1]");
    alpha_bars_.push_back(alpha_bars_.back() * a);
  }
}

double NoiseSchedule::alpha(Index t) const {
  check_step(t, *this, "schedule");
  return alphas_[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha_bar(Index t) const {
  if (t < 0 || t > steps()) throw ContractError("schedule: step " + std::to_string(t) + " out of range");
  return alpha_bars_[static_cast<std::size_t>(t)];
}

Tensor forward_diffuse(const Tensor& x0, Index t, const Tensor& eps, const NoiseSchedule& schedule) {
  check_step(t, schedule, "forward_diffuse");
  if (x0.shape() != eps.shape()) throw DimensionError("forward_diffuse: noise shape differs from sample");
  const double ab = schedule.alpha_bar(t);
  return tensor_like(x0.shape(), std::sqrt(ab) * flat(x0) + std::sqrt(1.0 - ab) * flat(eps));
}

Tensor forward_diffuse_step(const Tensor& x_prev, Index t, const Tensor& eps, const NoiseSchedule& schedule) {
  check_step(t, schedule, "forward_diffuse_step");
  if (x_prev.shape() != eps.shape()) throw DimensionError("forward_diffuse_step: noise shape differs from sample");
  const double a = schedule.alpha(t);
  return tensor_like(x_prev.shape(), std::sqrt(a) * flat(x_prev) + std::sqrt(1.0 - a) * flat(eps));
}

Vector ConditionEmbedding::vector(Index channels) const {
  Vector v = Vector::Zero(channels);
  if (is_null()) return v;
  if (class_id >= channels) {
    throw ConfigError("condition: class " + std::to_string(class_id) + " does not fit in " +
                      std::to_string(channels) + " channels");
  }
  v(class_id) = 1.0;
  return v;
}

Tensor render_clip(const ShapeMotion& m, Index frames, Index height, Index width) {
  std::vector<double> data(static_cast<std::size_t>(frames * height * width), -1.0);
  for (Index f = 0; f < frames; ++f) {
    const Index cx = m.x + f * m.dx, cy = m.y + f * m.dy;
    for (Index py = 0; py < height; ++py) {
      for (Index px = 0; px < width; ++px) {
        const Index ax = std::abs(px - cx), ay = std::abs(py - cy);
        bool inside = false;
        switch (m.kind) {
          case ShapeKind::square:
            inside = ax <= m.radius && ay <= m.radius;
            break;
          case ShapeKind::circle:
            inside = ax * ax + ay * ay <= m.radius * m.radius;
            break;
          case ShapeKind::triangle: {
            const Index depth = py - (cy - m.radius);
            inside = depth >= 0 && depth <= 2 * m.radius && 2 * ax <= depth;
            break;
          }
        }
        if (inside) data[static_cast<std::size_t>((f * height + py) * width + px)] = 1.0;
      }
    }
  }
  return Tensor({static_cast<std::size_t>(frames), 1, static_cast<std::size_t>(height),
                 static_cast<std::size_t>(width)},
                std::move(data));
}

SyntheticSet make_synthetic_dataset(Index n_clips, Index frames, Index height, Index width, Rng& rng) {
  if (frames < 1 || height < 1 || width < 1 || n_clips < 0) throw ConfigError("dataset: bad geometry");
  SyntheticSet set;
  for (Index i = 0; i < n_clips; ++i) {
    ShapeMotion m;
    m.kind = static_cast<ShapeKind>(rng.below(kShapeClasses));
    m.radius = std::max<Index>(1, std::min(height, width) / 5);
    m.x = m.radius + rng.below(std::max<Index>(1, width - 2 * m.radius));
    m.y = m.radius + rng.below(std::max<Index>(1, height - 2 * m.radius));
    m.dx = rng.below(3) - 1;
    m.dy = rng.below(3) - 1;
    set.clips.push_back(render_clip(m, frames, height, width));
    set.labels.push_back(static_cast<int>(m.kind));
  }
  return set;
}

void DenoiserConfig::validate() const {
  if (frames < 1 || channels < 1 || d < 4 || blocks < 0 || steps < 1) throw ConfigError("denoiser: bad config");
  if (d < kShapeClasses) throw ConfigError("denoiser: d too small for the class embedding");
  patch_grid(height, width, patch);
}

DenoiserParams DenoiserParams::init(const DenoiserConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  DenoiserParams p;
  p.config = config;
  const Index d = config.d;
  p.embed = uniform(rng, config.patch_dim(), d, 1.0 / std::sqrt(static_cast<double>(config.patch_dim())));
  p.embed_bias = Vector::Zero(d);
  p.position = uniform(rng, config.grid().tokens(), d, 0.1);
  p.condition = uniform(rng, d, d, 1.0 / std::sqrt(static_cast<double>(d)));
  p.step_table = sinusoidal_table(config.steps, d);
  for (Index b = 0; b < config.blocks; ++b) p.blocks.push_back(VrwkvBlockParams::init(d, rng.bits()));
  p.unembed = Matrix::Zero(d, config.patch_dim());
  p.unembed_bias = Vector::Zero(config.patch_dim());
  return p;
}

std::vector<ParamView> DenoiserParams::views() { return denoiser_views<ParamView>(*this); }
std::vector<ConstParamView> DenoiserParams::views() const { return denoiser_views<ConstParamView>(*this); }

Index DenoiserParams::parameter_count() const {
  Index n = 0;
  for (const auto& v : views()) n += v.value.size();
  return n;
}

void DenoiserParams::clamp_mix() {
  for (auto& b : blocks) {
    for (Vector* mu : {&b.mu_r, &b.mu_k, &b.mu_v, &b.mu_rc, &b.mu_kc}) *mu = mu->cwiseMax(0.0).cwiseMin(1.0);
  }
}

Checkpoint DenoiserParams::to_checkpoint() const {
  Checkpoint ckpt;
  const auto put = [&](const char* key, Index v) { ckpt.meta[key] = std::to_string(v); };
  put("frames", config.frames);
  put("channels", config.channels);
  put("height", config.height);
  put("width", config.width);
  put("patch", config.patch);
  put("d", config.d);
  put("blocks", config.blocks);
  put("steps", config.steps);
  if (!blocks.empty()) {
    std::ostringstream gamma;
    gamma.precision(17);
    gamma << blocks.front().gamma;
    ckpt.meta["gamma"] = gamma.str();
    put("shift", blocks.front().shift);
    put("joint_tokens", blocks.front().joint_tokens ? 1 : 0);
  }
  for (const auto& v : views()) {
    ckpt.add(v.name, Tensor::from_matrix(v.value));
  }
  return ckpt;
}

DenoiserParams DenoiserParams::from_checkpoint(const Checkpoint& ckpt) {
  DenoiserConfig config;
  config.frames = meta_index(ckpt, "frames");
  config.channels = meta_index(ckpt, "channels");
  config.height = meta_index(ckpt, "height");
  config.width = meta_index(ckpt, "width");
  config.patch = meta_index(ckpt, "patch");
  config.d = meta_index(ckpt, "d");
  config.blocks = meta_index(ckpt, "blocks");
  config.steps = meta_index(ckpt, "steps");
  DenoiserParams p = init(config, 0);
  for (auto& b : p.blocks) {
    b.gamma = std::stod(ckpt.meta_at("gamma"));
    b.shift = meta_index(ckpt, "shift");
    b.joint_tokens = meta_index(ckpt, "joint_tokens") != 0;
  }
  for (auto& v : p.views()) {
    const Tensor& t = ckpt.at(v.name);
    if (t.rank() != 2 || static_cast<Index>(t.extent(0)) != v.value.rows() ||
        static_cast<Index>(t.extent(1)) != v.value.cols()) {
      throw IoError("checkpoint: tensor '" + v.name + "' has shape " + shape_string(t.shape()));
    }
    v.value = t.matrix();
  }
  for (const auto& b : p.blocks) b.validate();
  return p;
}

Tensor predict_noise(const DenoiserParams& p, const Tensor& x_t, Index t, const ConditionEmbedding& cond) {
  require_clip(x_t, p.config, "predict_noise");
  if (t < 1 || t > p.config.steps) throw ContractError("predict_noise: step out of range");
  const FrameLayout layout = p.config.layout();
  Matrix h = matmul(patchify(x_t, p.config.patch), p.embed);
  h.rowwise() += p.embed_bias;
  h += position_rows(p.position, layout);
  h.rowwise() += matmul(cond.vector(p.config.d), p.condition).row(0);
  h.rowwise() += p.step_table.row(t - 1);
  for (const auto& block : p.blocks) h = block_forward(h, layout, block);
  Matrix out = matmul(h, p.unembed);
  out.rowwise() += p.unembed_bias;
  return unpatchify(out, p.config.frames, p.config.channels, p.config.height, p.config.width, p.config.patch);
}

namespace ad {

std::vector<Var> DenoiserVars::all() const {
  std::vector<Var> out{embed, embed_bias, position, condition, step_table, unembed, unembed_bias};
  for (const auto& b : blocks) {
    for (const Var& v : b.all()) out.push_back(v);
  }
  return out;
}

DenoiserVars record_params(GradTape& tape, const DenoiserParams& p) {
  DenoiserVars v;
  v.embed = tape.leaf(p.embed);
  v.embed_bias = tape.leaf(p.embed_bias);
  v.position = tape.leaf(p.position);
  v.condition = tape.leaf(p.condition);
  v.step_table = tape.leaf(p.step_table);
  v.unembed = tape.leaf(p.unembed);
  v.unembed_bias = tape.leaf(p.unembed_bias);
  for (const auto& b : p.blocks) v.blocks.push_back(record_params(tape, b));
  return v;
}

Var predict_noise(const DenoiserVars& v, const DenoiserConfig& config, const Tensor& x_t, Index t,
                  const ConditionEmbedding& cond) {
  require_clip(x_t, config, "predict_noise");
  if (t < 1 || t > config.steps) throw ContractError("predict_noise: step out of range");
  GradTape& tape = *v.embed.tape();
  const FrameLayout layout = config.layout();
  std::vector<Index> position_index(static_cast<std::size_t>(layout.tokens()));
  for (Index i = 0; i < layout.tokens(); ++i) position_index[static_cast<std::size_t>(i)] = i % layout.tokens_per_frame();

  Var h = add_row(matmul(tape.constant(patchify(x_t, config.patch)), v.embed), v.embed_bias);
  h = h + gather_rows(v.position, std::move(position_index));
  h = add_row(h, matmul(tape.constant(cond.vector(config.d)), v.condition));
  h = add_row(h, slice_rows(v.step_table, t - 1, 1));
  for (const auto& block : v.blocks) h = block_forward(h, layout, block);
  return add_row(matmul(h, v.unembed), v.unembed_bias);
}

}  // namespace ad

NoiseDraw draw_noise(const Tensor& clip, const NoiseSchedule& schedule, double p_uncond, Rng& rng) {
  NoiseDraw draw;
  draw.step = 1 + rng.below(schedule.steps());
  std::vector<double> eps(clip.size());
  for (auto& e : eps) e = rng.normal();
  draw.eps = Tensor(clip.shape(), std::move(eps));
  draw.drop_condition = rng.uniform() < p_uncond;
  return draw;
}

double denoising_loss(const std::vector<Tensor>& clips, const std::vector<int>& labels,
                      const std::vector<NoiseDraw>& draws, const NoiseSchedule& schedule,
                      const NoisePredictor& predict) {
  if (clips.empty()) throw EmptyInputError("denoising_loss: empty batch");
  if (labels.size() != clips.size() || draws.size() != clips.size()) {
    throw DimensionError("denoising_loss: clips, labels and draws disagree in count");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const auto& draw = draws[i];
    const Tensor x_t = forward_diffuse(clips[i], draw.step, draw.eps, schedule);
    const auto cond = draw.drop_condition ? ConditionEmbedding::null() : ConditionEmbedding::of(labels[i]);
    const Tensor pred = predict(x_t, draw.step, cond);
    if (pred.shape() != draw.eps.shape()) throw DimensionError("denoising_loss: prediction shape differs");
    total += (flat(draw.eps) - flat(pred)).squaredNorm() / static_cast<double>(pred.size());
  }
  return total / static_cast<double>(clips.size());
}

TrainStep loss_and_gradients(const std::vector<Tensor>& clips, const std::vector<int>& labels,
                             const std::vector<NoiseDraw>& draws, const DenoiserParams& params,
                             const NoiseSchedule& schedule) {
  if (clips.empty()) throw EmptyInputError("training_step: empty batch");
  if (labels.size() != clips.size() || draws.size() != clips.size()) {
    throw DimensionError("training_step: clips, labels and draws disagree in count");
  }
  if (schedule.steps() != params.config.steps) throw ConfigError("training_step: schedule length differs from model");
  ad::GradTape tape;
  const auto vars = ad::record_params(tape, params);
  ad::Var total;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const auto& draw = draws[i];
    const Tensor x_t = forward_diffuse(clips[i], draw.step, draw.eps, schedule);
    const auto cond = draw.drop_condition ? ConditionEmbedding::null() : ConditionEmbedding::of(labels[i]);
    const ad::Var pred = ad::predict_noise(vars, params.config, x_t, draw.step, cond);
    const ad::Var term = ad::mse(pred, tape.constant(patchify(draw.eps, params.config.patch)));
    total = i == 0 ? term : total + term;
  }
  const ad::Var loss = ad::scale(total, 1.0 / static_cast<double>(clips.size()));
  const auto grads = ad::backward(tape, loss);
  TrainStep step;
  step.loss = loss.value()(0, 0);
  for (const auto& v : vars.all()) step.grads.push_back(grads.at(v.id()));
  return step;
}

TrainStep training_step(const std::vector<Tensor>& clips, const std::vector<int>& labels,
                        const DenoiserParams& params, const NoiseSchedule& schedule, Rng& rng, double p_uncond) {
  std::vector<NoiseDraw> draws;
  for (const auto& clip : clips) draws.push_back(draw_noise(clip, schedule, p_uncond, rng));
  return loss_and_gradients(clips, labels, draws, params, schedule);
}

Tensor ddim_sample(const NoisePredictor& predict, const NoiseSchedule& schedule, const ConditionEmbedding& cond,
                   const SamplerOptions& options, const Shape& shape, Rng& rng) {
  const Index n = options.n_steps;
  if (n < 1 || n > schedule.steps()) {
    throw ContractError("ddim_sample: n_steps " + std::to_string(n) + " outside [1, " +
                        std::to_string(schedule.steps()) + "]");
  }
  if (!(options.guidance >= 0.0)) throw ContractError("ddim_sample: guidance must be non-negative");
  std::vector<Index> steps(static_cast<std::size_t>(n + 1));
  for (Index j = 0; j <= n; ++j) {
    steps[static_cast<std::size_t>(j)] = static_cast<Index>(
        std::llround(static_cast<double>(j) * static_cast<double>(schedule.steps()) / static_cast<double>(n)));
  }

  Matrix x(1, static_cast<Index>(shape_size(shape)));
  for (Index i = 0; i < x.size(); ++i) x(0, i) = rng.normal();
  for (Index j = n; j >= 1; --j) {
    const Index t = steps[static_cast<std::size_t>(j)], t_prev = steps[static_cast<std::size_t>(j - 1)];
    const Tensor x_t = tensor_like(shape, x);
    Matrix eps;
    try {
      eps = flat(predict(x_t, t, ConditionEmbedding::null()));
      if (options.guidance != 0.0) {
        const Matrix eps_cond = flat(predict(x_t, t, cond));
        eps += options.guidance * (eps_cond - eps);
      }
    } catch (const NumericError& e) {
      throw SamplerDivergence(t, std::string("ddim_sample: ") + e.what());
    }
    const double ab = schedule.alpha_bar(t), ab_prev = schedule.alpha_bar(t_prev);
    Matrix x0 = (x - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
    if (options.clip_x0) x0 = x0.cwiseMax(-1.0).cwiseMin(1.0);
    x = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps;
    if (!x.allFinite()) {
      throw SamplerDivergence(t, "ddim_sample: non-finite state at step " + std::to_string(t));
    }
  }
  return tensor_like(shape, x);
}

DenoiserParams train_denoiser(const DenoiserConfig& config, const TrainOptions& options, const StepCallback& on_step) {
  if (options.batch < 1 || options.dataset_size < 1 || options.steps < 0 || !(options.lr > 0.0)) {
    throw ConfigError("train: steps >= 0, batch >= 1, dataset >= 1 and lr > 0 required");
  }
  Rng rng(options.seed);
  const SyntheticSet data = make_synthetic_dataset(options.dataset_size, config.frames, config.height, config.width, rng);
  DenoiserParams params = DenoiserParams::init(config, rng.bits());
  const NoiseSchedule schedule = NoiseSchedule::linear(config.steps, options.beta_first, options.beta_last);
  Adam adam(options.lr);
  for (Index step = 0; step < options.steps; ++step) {
    std::vector<Tensor> clips;
    std::vector<int> labels;
    for (Index b = 0; b < options.batch; ++b) {
      const auto pick = static_cast<std::size_t>(rng.below(options.dataset_size));
      clips.push_back(data.clips[pick]);
      labels.push_back(data.labels[pick]);
    }
    const TrainStep result = training_step(clips, labels, params, schedule, rng, options.p_uncond);
    auto views = params.views();
    adam.step(views, result.grads);
    params.clamp_mix();
    if (on_step) on_step(step, result.loss);
  }
  return params;
}

double window_mean(const std::vector<double>& values, std::size_t begin, std::size_t count) {
  if (count == 0 || begin + count > values.size()) throw ContractError("window_mean: window out of range");
  double total = 0.0;
  for (std::size_t i = begin; i < begin + count; ++i) total += values[i];
  return total / static_cast<double>(count);
}

}  // namespace vrwkv
