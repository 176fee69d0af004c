#include "vrwkv/verify.hpp"

#include "vrwkv/attention.hpp"
#include "vrwkv/block.hpp"
#include "vrwkv/diffusion.hpp"
#include "vrwkv/wkv.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <random>

namespace vrwkv::verify {

std::string group_name(Group g) {
  switch (g) {
    case Group::equivalence: return "equivalence";
    case Group::gradient: return "gradient";
    case Group::invariant: return "invariant";
  }
  return "";
}

Group parse_group(const std::string& name) {
  for (Group g : {Group::equivalence, Group::gradient, Group::invariant}) {
    if (group_name(g) == name) return g;
  }
  throw ConfigError("unknown check group '" + name + "' (expected equivalence, gradient or invariant)");
}

Matrix uniform_matrix(std::uint64_t seed, Index rows, Index cols, double lo, double hi) {
  std::mt19937_64 gen(seed);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) {
    const double u = static_cast<double>(gen() >> 11) * 0x1.0p-53;
    m.data()[i] = lo + (hi - lo) * u;
  }
  return m;
}

Matrix numeric_gradient(const std::function<double()>& f, Eigen::Ref<Matrix> x, double h) {
  Matrix grad(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    for (Index j = 0; j < x.cols(); ++j) {
      const double saved = x(i, j);
      x(i, j) = saved + h;
      const double up = f();
      x(i, j) = saved - h;
      const double down = f();
      x(i, j) = saved;
      grad(i, j) = (up - down) / (2.0 * h);
    }
  }
  return grad;
}

double gradient_error(const Matrix& analytic, const Matrix& numeric, double floor) {
  require_same_shape(analytic, numeric, "gradient_error");
  double worst = 0.0;
  for (Index i = 0; i < analytic.size(); ++i) {
    const double a = analytic.data()[i], n = numeric.data()[i];
    worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor}));
  }
  return worst;
}

double relative_error(const Matrix& a, const Matrix& b, double floor) {
  require_same_shape(a, b, "relative_error");
  double worst = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]) / std::max(std::abs(b.data()[i]), floor));
  }
  return worst;
}

namespace {

struct Context {
  std::uint64_t seed;
  bool perturb;

  // Distinct input streams per check and case.
  std::uint64_t at(std::uint64_t check, std::uint64_t item) const {
    return seed * 0x9E3779B97F4A7C15ull + check * 100000 + item;
  }
};

WkvParams<double> random_wkv(const Context& c, std::uint64_t check, std::uint64_t item, Index d, double range) {
  return {uniform_matrix(c.at(check, item), 1, d, -range, range).row(0),
          uniform_matrix(c.at(check, item + 1), 1, d, -range, range).row(0)};
}

double weighted_scan(const Matrix& k, const Matrix& v, const WkvParams<double>& p, const Matrix& g) {
  return bi_wkv_scan(k, v, p).cwiseProduct(g).sum();
}

// Equivalence.

double scan_vs_direct(const Context& c) {
  const std::array<Index, 5> lengths = {4, 16, 64, 256, 512};
  const std::array<Index, 3> widths = {1, 8, 32};
  double worst = 0.0;
  for (std::uint64_t i = 0; i < 100; ++i) {
    const Index T = lengths[i % 5];
    const Index d = widths[(i / 5) % 3];
    const Matrix k = uniform_matrix(c.at(1, 4 * i), T, d, -3, 3);
    const Matrix v = uniform_matrix(c.at(1, 4 * i + 1), T, d, -3, 3);
    const WkvParams<double> p = random_wkv(c, 1, 4 * i + 2, d, 3);
    const Matrix scan = bi_wkv_scan(k, v, p, ScanHooks{c.perturb});
    worst = std::max(worst, relative_error(scan, bi_wkv_direct(k, v, p)));
  }
  return worst;
}

double backward_scan_vs_pairwise(const Context& c) {
  double worst = 0.0;
  for (std::uint64_t i = 0; i < 10; ++i) {
    const Index T = 4 + static_cast<Index>(3 * i), d = 4;
    const Matrix k = uniform_matrix(c.at(2, 5 * i), T, d, -3, 3);
    const Matrix v = uniform_matrix(c.at(2, 5 * i + 1), T, d, -3, 3);
    const WkvParams<double> p = random_wkv(c, 2, 5 * i + 2, d, 3);
    const Matrix g = uniform_matrix(c.at(2, 5 * i + 4), T, d);
    const auto scan = bi_wkv_backward(k, v, p, g);
    const auto pair = bi_wkv_direct_backward(k, v, p, g);
    worst = std::max({worst, gradient_error(scan.keys, pair.keys, 1e-8), gradient_error(scan.values, pair.values, 1e-8),
                      gradient_error(scan.decay, pair.decay, 1e-8), gradient_error(scan.bonus, pair.bonus, 1e-8)});
  }
  return worst;
}

double aft_vs_causal(const Context& c) {
  double worst = 0.0;
  for (std::uint64_t i = 0; i < 5; ++i) {
    const Matrix k = uniform_matrix(c.at(3, 2 * i), 12, 3, -2, 2);
    const Matrix v = uniform_matrix(c.at(3, 2 * i + 1), 12, 3);
    const double w = 0.1 + 0.3 * static_cast<double>(i);
    const Vector decay = Vector::Constant(3, w);
    worst = std::max(worst, relative_error(aft_attention(k, v, time_decay_bias<double>(12, w)),
                                           causal_wkv(k, v, decay, decay)));
  }
  return worst;
}

// Gradients.

double wkv_gradient(const Context& c) {
  double worst = 0.0;
  for (std::uint64_t i = 0; i < 5; ++i) {
    const Index T = 8, d = 4;
    Matrix k = uniform_matrix(c.at(4, 5 * i), T, d, -2, 2);
    Matrix v = uniform_matrix(c.at(4, 5 * i + 1), T, d, -2, 2);
    WkvParams<double> p = random_wkv(c, 4, 5 * i + 2, d, 2);
    const Matrix g = uniform_matrix(c.at(4, 5 * i + 4), T, d);
    const auto grads = bi_wkv_backward(k, v, p, g);
    auto f = [&] { return weighted_scan(k, v, p, g); };
    Matrix decay = p.decay, bonus = p.bonus;
    auto f_decay = [&] { return weighted_scan(k, v, {decay.row(0), p.bonus}, g); };
    auto f_bonus = [&] { return weighted_scan(k, v, {p.decay, bonus.row(0)}, g); };
    worst = std::max({worst, gradient_error(grads.keys, numeric_gradient(f, k)),
                      gradient_error(grads.values, numeric_gradient(f, v)),
                      gradient_error(grads.decay, numeric_gradient(f_decay, decay)),
                      gradient_error(grads.bonus, numeric_gradient(f_bonus, bonus))});
  }
  return worst;
}

double softmax_gradient(const Context& c) {
  double worst = 0.0;
  for (std::uint64_t i = 0; i < 3; ++i) {
    Matrix q = uniform_matrix(c.at(5, 4 * i), 8, 4, -2, 2);
    Matrix k = uniform_matrix(c.at(5, 4 * i + 1), 8, 4, -2, 2);
    Matrix v = uniform_matrix(c.at(5, 4 * i + 2), 8, 4, -2, 2);
    const Matrix g = uniform_matrix(c.at(5, 4 * i + 3), 8, 4);
    const auto fwd = softmax_attention_forward(q, k, v, true);
    const auto grads = softmax_attention_backward(q, k, v, Matrix(*fwd.probs), g, true);
    auto f = [&] { return softmax_attention(q, k, v).cwiseProduct(g).sum(); };
    worst = std::max({worst, gradient_error(grads.queries, numeric_gradient(f, q)),
                      gradient_error(grads.keys, numeric_gradient(f, k)),
                      gradient_error(grads.values, numeric_gradient(f, v))});
  }
  return worst;
}

double block_gradient(const Context& c) {
  const FrameLayout layout{2, {2, 2}};
  const Index d = 8;
  VrwkvBlockParams p = VrwkvBlockParams::init(d, c.at(6, 0));
  p.wkv = random_wkv(c, 6, 1, d, 0.5);
  std::uint64_t item = 3;
  for (auto* mu : {&p.mu_r, &p.mu_k, &p.mu_v, &p.mu_rc, &p.mu_kc}) {
    *mu = uniform_matrix(c.at(6, item++), 1, d, 0.2, 0.8).row(0);
  }
  Matrix x = uniform_matrix(c.at(6, 20), layout.tokens(), d);

  ad::GradTape tape;
  const auto vars = ad::record_params(tape, p);
  const ad::Var input = tape.leaf(x);
  const auto grads = ad::backward(tape, ad::mean(ad::block_forward(input, layout, vars)));

  auto f = [&] { return block_forward(x, layout, p).mean(); };
  double worst = gradient_error(grads.at(input.id()), numeric_gradient(f, x));
  auto views = p.views();
  const auto leaves = vars.all();
  for (std::size_t i = 0; i < views.size(); ++i) {
    worst = std::max(worst, gradient_error(grads.at(leaves[i].id()), numeric_gradient(f, views[i].value)));
  }
  return worst;
}

double loss_gradient(const Context& c) {
  DenoiserConfig config;
  config.frames = 2;
  config.height = 8;
  config.width = 8;
  config.patch = 4;
  config.d = 8;
  config.blocks = 1;
  config.steps = 10;
  const auto schedule = NoiseSchedule::linear(config.steps);
  DenoiserParams p = DenoiserParams::init(config, c.at(7, 0));
  p.unembed = uniform_matrix(c.at(7, 1), config.d, config.patch_dim(), -0.5, 0.5);
  p.unembed_bias = uniform_matrix(c.at(7, 2), 1, config.patch_dim(), -0.1, 0.1);
  p.embed_bias = uniform_matrix(c.at(7, 3), 1, config.d, -0.1, 0.1);
  p.blocks[0].wkv = random_wkv(c, 7, 4, config.d, 0.5);

  Rng rng(c.at(7, 10));
  const auto data = make_synthetic_dataset(2, config.frames, config.height, config.width, rng);
  std::vector<NoiseDraw> draws;
  for (const auto& clip : data.clips) draws.push_back(draw_noise(clip, schedule, 0.0, rng));
  draws[1].drop_condition = true;

  const TrainStep step = loss_and_gradients(data.clips, data.labels, draws, p, schedule);
  auto f = [&] {
    return denoising_loss(data.clips, data.labels, draws, schedule,
                          [&](const Tensor& x, Index t, const ConditionEmbedding& cond) {
                            return predict_noise(p, x, t, cond);
                          });
  };
  double worst = 0.0;
  auto views = p.views();
  for (std::size_t i = 0; i < views.size(); ++i) {
    worst = std::max(worst, gradient_error(step.grads[i], numeric_gradient(f, views[i].value)));
  }
  return worst;
}

// Invariants.

double zero_projection_identity(const Context& c) {
  const FrameLayout layout{3, {4, 4}};
  VrwkvBlockParams p = VrwkvBlockParams::zeros(8);
  p.wkv = random_wkv(c, 8, 0, 8, 1);
  const Matrix x = uniform_matrix(c.at(8, 2), layout.tokens(), 8, -5, 5);
  return (block_forward(x, layout, p) - x).cwiseAbs().maxCoeff();
}

double q_shift_zero_identity(const Context& c) {
  const Matrix x = uniform_matrix(c.at(9, 0), 12, 8, -3, 3);
  return (q_shift(x, {3, 4}, 0) - x).cwiseAbs().maxCoeff();
}

double softmax_row_sums(const Context& c) {
  double worst = 0.0;
  for (std::uint64_t i = 0; i < 5; ++i) {
    const Matrix q = uniform_matrix(c.at(10, 3 * i), 64, 16, -3, 3);
    const Matrix k = uniform_matrix(c.at(10, 3 * i + 1), 64, 16, -3, 3);
    const Matrix v = uniform_matrix(c.at(10, 3 * i + 2), 64, 16);
    const auto fwd = softmax_attention_forward(q, k, v, true);
    worst = std::max(worst, (fwd.probs->rowwise().sum().array() - 1.0).abs().maxCoeff());
  }
  return worst;
}

double wkv_value_bounds(const Context& c) {
  double worst = 0.0;
  for (std::uint64_t i = 0; i < 20; ++i) {
    const Index T = 1 + static_cast<Index>(i * 7 % 48);
    const Matrix k = uniform_matrix(c.at(11, 3 * i), T, 6, -3, 3);
    const Matrix v = uniform_matrix(c.at(11, 3 * i + 1), T, 6, -3, 3);
    const Matrix out = bi_wkv_scan(k, v, random_wkv(c, 11, 3 * i + 2, 6, 3));
    for (Index ch = 0; ch < 6; ++ch) {
      worst = std::max({worst, v.col(ch).minCoeff() - out.col(ch).minCoeff(),
                        out.col(ch).maxCoeff() - v.col(ch).maxCoeff()});
    }
  }
  return worst;
}

double key_shift_invariance(const Context& c) {
  double worst = 0.0;
  for (std::uint64_t i = 0; i < 10; ++i) {
    const Matrix k = uniform_matrix(c.at(12, 3 * i), 24, 5, -3, 3);
    const Matrix v = uniform_matrix(c.at(12, 3 * i + 1), 24, 5, -3, 3);
    const auto p = random_wkv(c, 12, 3 * i + 2, 5, 3);
    const Matrix shifted = (k.array() + 2.5).matrix();
    worst = std::max(worst, (bi_wkv_scan(shifted, v, p) - bi_wkv_scan(k, v, p)).cwiseAbs().maxCoeff());
  }
  return worst;
}

struct Check {
  Group group;
  const char* name;
  double tolerance;
  double (*run)(const Context&);
};

const std::array<Check, 12> kChecks = {{
    {Group::equivalence, "scan_vs_direct", 1e-5, scan_vs_direct},
    {Group::equivalence, "backward_scan_vs_pairwise", 1e-8, backward_scan_vs_pairwise},
    {Group::equivalence, "aft_vs_causal_wkv", 1e-10, aft_vs_causal},
    {Group::gradient, "bi_wkv", 1e-4, wkv_gradient},
    {Group::gradient, "softmax_attention", 1e-4, softmax_gradient},
    {Group::gradient, "vrwkv_block", 1e-4, block_gradient},
    {Group::gradient, "training_loss", 1e-4, loss_gradient},
    {Group::invariant, "zero_projection_identity", 0.0, zero_projection_identity},
    {Group::invariant, "q_shift_zero_identity", 0.0, q_shift_zero_identity},
    {Group::invariant, "softmax_row_sums", 1e-12, softmax_row_sums},
    {Group::invariant, "wkv_value_bounds", 1e-12, wkv_value_bounds},
    {Group::invariant, "key_shift_invariance", 1e-10, key_shift_invariance},
}};

}  // namespace

std::vector<CheckResult> run_checks(const Options& options) {
  const Context context{options.seed, options.perturb_scan};
  std::vector<CheckResult> results;
  for (const Check& check : kChecks) {
    if (!options.groups.empty() &&
        std::find(options.groups.begin(), options.groups.end(), check.group) == options.groups.end()) {
      continue;
    }
    CheckResult r{check.group, check.name, 0.0, check.tolerance, false};
    try {
      r.worst = check.run(context);
      r.pass = std::isfinite(r.worst) && r.worst <= check.tolerance;
    } catch (const std::exception&) {
      r.worst = std::numeric_limits<double>::infinity();
    }
    results.push_back(r);
  }
  return results;
}

void print_results(std::ostream& out, const std::vector<CheckResult>& results) {
  std::string failures;
  char line[256];
  for (const auto& r : results) {
    const std::string id = group_name(r.group) + "/" + r.name;
    std::snprintf(line, sizeof line, "%s %s worst=%.3e tol=%.0e\n", r.pass ? "PASS" : "FAIL", id.c_str(), r.worst,
                  r.tolerance);
    out << line;
    if (!r.pass) failures += (failures.empty() ? "" : ",") + id;
  }
  out << "failures: " << (failures.empty() ? "none" : failures) << "\n";
}

bool all_pass(const std::vector<CheckResult>& results) {
  return std::all_of(results.begin(), results.end(), [](const CheckResult& r) { return r.pass; });
}

}  // namespace vrwkv::verify
