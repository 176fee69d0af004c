#include "vrwkv/block.hpp"

#include "vrwkv/linalg.hpp"

#include <cmath>
#include <random>

namespace vrwkv {

namespace {

Index shift_group(Index channels, double gamma) {
  const double exact = gamma * static_cast<double>(channels);
  const auto group = static_cast<Index>(std::llround(exact));
  if (gamma < 0.0 || std::abs(exact - static_cast<double>(group)) > 1e-9 || 4 * group > channels) {
    throw ConfigError("q_shift: gamma " + std::to_string(gamma) + " does not split " + std::to_string(channels) +
                      " channels into four whole groups");
  }
  return group;
}

// Moves each channel group by (dr, dc) patches, or by (-dr, -dc) for the adjoint.
Matrix shift_impl(const Matrix& x, PatchGrid grid, Index shift, double gamma, bool adjoint) {
  if (shift < 0) throw ConfigError("q_shift: negative shift");
  const Index n = grid.tokens();
  if (n <= 0 || x.rows() % n != 0) {
    throw DimensionError("q_shift: " + std::to_string(x.rows()) + " rows do not fill a " +
                         std::to_string(grid.rows) + "x" + std::to_string(grid.cols) + " grid");
  }
  const Index group = shift_group(x.cols(), gamma);
  const Index sign = adjoint ? -1 : 1;
  // Source offset per group: right, left, down, up.
  const Index dr[4] = {0, 0, -shift, shift};
  const Index dc[4] = {-shift, shift, 0, 0};

  Matrix out = Matrix::Zero(x.rows(), x.cols());
  out.rightCols(x.cols() - 4 * group) = x.rightCols(x.cols() - 4 * group);
  for (Index base = 0; base < x.rows(); base += n) {
    for (Index r = 0; r < grid.rows; ++r) {
      for (Index c = 0; c < grid.cols; ++c) {
        for (int g = 0; g < 4; ++g) {
          const Index sr = r + sign * dr[g], sc = c + sign * dc[g];
          if (sr < 0 || sr >= grid.rows || sc < 0 || sc >= grid.cols) continue;
          out.block(base + r * grid.cols + c, g * group, 1, group) =
              x.block(base + sr * grid.cols + sc, g * group, 1, group);
        }
      }
    }
  }
  return out;
}

Matrix blend(const Matrix& x, const Matrix& other, const Vector& mu) {
  return ((x.array().rowwise() * mu.array()) + (other.array().rowwise() * (1.0 - mu.array()))).matrix();
}

Matrix uniform(std::mt19937_64& gen, Index rows, Index cols, double bound) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) {
    const double u = static_cast<double>(gen() >> 11) * 0x1.0p-53;
    m.data()[i] = bound * (2.0 * u - 1.0);
  }
  return m;
}

void require_mu(const Vector& mu, Index channels, const char* name) {
  if (mu.size() != channels) throw DimensionError(std::string("block: ") + name + " has wrong length");
  if (!mu.allFinite() || (mu.array() < 0.0).any() || (mu.array() > 1.0).any()) {
    throw ContractError(std::string("block: ") + name + " outside [0, 1]");
  }
}

void require_matrix(const Matrix& m, Index rows, Index cols, const char* name) {
  if (m.rows() != rows || m.cols() != cols) {
    throw DimensionError(std::string("block: ") + name + " is " + std::to_string(m.rows()) + "x" +
                         std::to_string(m.cols()) + ", expected " + std::to_string(rows) + "x" +
                         std::to_string(cols));
  }
}

template <typename View, typename Params>
std::vector<View> make_views(Params& p, const std::string& prefix) {
  std::vector<View> out;
  auto add = [&](const char* name, auto& m) { out.push_back(View{prefix + name, {m.data(), m.rows(), m.cols()}}); };
  add("w_r", p.w_r);
  add("w_k", p.w_k);
  add("w_v", p.w_v);
  add("mu_r", p.mu_r);
  add("mu_k", p.mu_k);
  add("mu_v", p.mu_v);
  add("wkv.decay", p.wkv.decay);
  add("wkv.bonus", p.wkv.bonus);
  add("w_rc", p.w_rc);
  add("w_kc", p.w_kc);
  add("mu_rc", p.mu_rc);
  add("mu_kc", p.mu_kc);
  add("w_c", p.w_c);
  return out;
}

}  // namespace

PatchGrid patch_grid(Index height, Index width, Index patch) {
  if (patch < 1 || height % patch != 0 || width % patch != 0 || height == 0 || width == 0) {
    throw ConfigError("patchify: " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not divisible by patch " + std::to_string(patch));
  }
  return {height / patch, width / patch};
}

Matrix patchify(const Tensor& frames, Index patch) {
  if (frames.rank() != 4) throw DimensionError("patchify: expected [frames x channels x height x width]");
  const auto f = static_cast<Index>(frames.extent(0)), ch = static_cast<Index>(frames.extent(1));
  const auto h = static_cast<Index>(frames.extent(2)), w = static_cast<Index>(frames.extent(3));
  if (f < 1) throw DimensionError("patchify: no frames");
  const PatchGrid grid = patch_grid(h, w, patch);
  Matrix out(f * grid.tokens(), ch * patch * patch);
  for (Index t = 0; t < f; ++t) {
    for (Index c = 0; c < ch; ++c) {
      for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
          const Index row = t * grid.tokens() + (y / patch) * grid.cols + x / patch;
          const Index col = c * patch * patch + (y % patch) * patch + x % patch;
          out(row, col) = frames[static_cast<std::size_t>(((t * ch + c) * h + y) * w + x)];
        }
      }
    }
  }
  return out;
}

Tensor unpatchify(const Matrix& tokens, Index frames, Index channels, Index height, Index width, Index patch) {
  const PatchGrid grid = patch_grid(height, width, patch);
  if (tokens.rows() != frames * grid.tokens() || tokens.cols() != channels * patch * patch) {
    throw DimensionError("unpatchify: token matrix does not match the frame geometry");
  }
  std::vector<double> data(static_cast<std::size_t>(frames * channels * height * width));
  for (Index t = 0; t < frames; ++t) {
    for (Index c = 0; c < channels; ++c) {
      for (Index y = 0; y < height; ++y) {
        for (Index x = 0; x < width; ++x) {
          const Index row = t * grid.tokens() + (y / patch) * grid.cols + x / patch;
          const Index col = c * patch * patch + (y % patch) * patch + x % patch;
          data[static_cast<std::size_t>(((t * channels + c) * height + y) * width + x)] = tokens(row, col);
        }
      }
    }
  }
  return Tensor({static_cast<std::size_t>(frames), static_cast<std::size_t>(channels),
                 static_cast<std::size_t>(height), static_cast<std::size_t>(width)},
                std::move(data));
}

VrwkvBlockParams VrwkvBlockParams::zeros(Index channels, Index hidden) {
  if (hidden == 0) hidden = channels;
  VrwkvBlockParams p;
  p.w_r = p.w_k = p.w_v = p.w_rc = Matrix::Zero(channels, channels);
  p.w_kc = Matrix::Zero(channels, hidden);
  p.w_c = Matrix::Zero(hidden, channels);
  p.mu_r = p.mu_k = p.mu_v = p.mu_rc = p.mu_kc = Vector::Constant(channels, 0.5);
  p.wkv = WkvParams<double>::zeros(channels);
  return p;
}

VrwkvBlockParams VrwkvBlockParams::init(Index channels, std::uint64_t seed, bool local_init, Index hidden) {
  VrwkvBlockParams p = zeros(channels, hidden);
  std::mt19937_64 gen(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
  p.w_r = uniform(gen, channels, channels, bound);
  p.w_k = uniform(gen, channels, channels, bound);
  p.w_v = uniform(gen, channels, channels, bound);
  p.w_rc = uniform(gen, channels, channels, bound);
  p.w_kc = uniform(gen, channels, p.hidden(), bound);
  p.w_c = uniform(gen, p.hidden(), channels, 1.0 / std::sqrt(static_cast<double>(p.hidden())));
  if (local_init) p.mu_r = p.mu_k = p.mu_v = p.mu_rc = p.mu_kc = Vector::Ones(channels);
  return p;
}

void VrwkvBlockParams::validate() const {
  const Index d = channels();
  if (d < 1) throw DimensionError("block: no channels");
  require_matrix(w_r, d, d, "w_r");
  require_matrix(w_k, d, d, "w_k");
  require_matrix(w_v, d, d, "w_v");
  require_matrix(w_rc, d, d, "w_rc");
  if (w_kc.rows() != d || hidden() < 1) throw DimensionError("block: w_kc has wrong shape");
  require_matrix(w_c, hidden(), d, "w_c");
  require_mu(mu_r, d, "mu_r");
  require_mu(mu_k, d, "mu_k");
  require_mu(mu_v, d, "mu_v");
  require_mu(mu_rc, d, "mu_rc");
  require_mu(mu_kc, d, "mu_kc");
  wkv.validate(d);
  shift_group(d, gamma);
  if (shift < 0) throw ConfigError("block: negative shift");
}

std::vector<ParamView> VrwkvBlockParams::views(const std::string& prefix) {
  return make_views<ParamView>(*this, prefix);
}

std::vector<ConstParamView> VrwkvBlockParams::views(const std::string& prefix) const {
  return make_views<ConstParamView>(*this, prefix);
}

Matrix q_shift(const Matrix& x, PatchGrid grid, Index shift, double gamma) {
  return shift_impl(x, grid, shift, gamma, false);
}

Matrix q_shift_adjoint(const Matrix& x, PatchGrid grid, Index shift, double gamma) {
  return shift_impl(x, grid, shift, gamma, true);
}

TimeMix time_mix(const Matrix& x, const Matrix& x_prev, const VrwkvBlockParams& params, PatchGrid grid) {
  require_same_shape(x, x_prev, "time_mix");
  if (x.cols() != params.channels()) throw DimensionError("time_mix: channel count disagrees with params");
  auto project = [&](const Vector& mu, const Matrix& w) {
    return matmul(q_shift(blend(x, x_prev, mu), grid, params.shift, params.gamma), w);
  };
  return {project(params.mu_r, params.w_r), project(params.mu_k, params.w_k), project(params.mu_v, params.w_v)};
}

Matrix spatial_aggregate(const Matrix& r, const Matrix& k, const Matrix& v, const WkvParams<double>& wkv) {
  require_same_shape(r, k, "spatial_aggregate");
  return (sigmoid(r.array()) * bi_wkv_scan(k, v, wkv).array()).matrix();
}

Matrix channel_mix(const Matrix& o, const Matrix& o_prev, const VrwkvBlockParams& params, PatchGrid grid) {
  require_same_shape(o, o_prev, "channel_mix");
  if (o.cols() != params.channels()) throw DimensionError("channel_mix: channel count disagrees with params");
  const Matrix rc = matmul(q_shift(blend(o, o_prev, params.mu_rc), grid, params.shift, params.gamma), params.w_rc);
  const Matrix kc = matmul(q_shift(blend(o, o_prev, params.mu_kc), grid, params.shift, params.gamma), params.w_kc);
  return (sigmoid(rc.array()) * relu_sq(matmul(kc, params.w_c).array())).matrix();
}

Matrix previous_frame(const Matrix& x, const FrameLayout& layout) {
  const Index n = layout.tokens_per_frame();
  if (x.rows() != layout.tokens()) throw DimensionError("previous_frame: row count disagrees with layout");
  Matrix out(x.rows(), x.cols());
  out.topRows(n) = x.topRows(n);
  if (layout.frames > 1) out.bottomRows(x.rows() - n) = x.topRows(x.rows() - n);
  return out;
}

Matrix block_forward(const Matrix& tokens, const FrameLayout& layout, const VrwkvBlockParams& params) {
  params.validate();
  if (tokens.rows() != layout.tokens() || layout.frames < 1) {
    throw DimensionError("block_forward: " + std::to_string(tokens.rows()) + " tokens for " +
                         std::to_string(layout.frames) + " frames of " + std::to_string(layout.tokens_per_frame()));
  }
  if (tokens.cols() != params.channels()) throw DimensionError("block_forward: channel count disagrees with params");
  const TimeMix tm = time_mix(tokens, previous_frame(tokens, layout), params, layout.grid);
  Matrix o(tokens.rows(), tokens.cols());
  if (params.joint_tokens) {
    o = spatial_aggregate(tm.r, tm.k, tm.v, params.wkv);
  } else {
    const Index n = layout.tokens_per_frame();
    for (Index f = 0; f < layout.frames; ++f) {
      o.middleRows(f * n, n) = spatial_aggregate(tm.r.middleRows(f * n, n), tm.k.middleRows(f * n, n),
                                                 tm.v.middleRows(f * n, n), params.wkv);
    }
  }
  const Matrix cm = channel_mix(o, previous_frame(o, layout), params, layout.grid);
  Matrix y = tokens + o + cm;
  require_finite(y, "block_forward");
  return y;
}

namespace ad {

std::vector<Var> BlockVars::all() const {
  return {w_r, w_k, w_v, mu_r, mu_k, mu_v, decay, bonus, w_rc, w_kc, mu_rc, mu_kc, w_c};
}

BlockVars record_params(GradTape& tape, const VrwkvBlockParams& params, bool trainable) {
  params.validate();
  auto put = [&](const Matrix& m) { return trainable ? tape.leaf(m) : tape.constant(m); };
  BlockVars v;
  v.w_r = put(params.w_r);
  v.w_k = put(params.w_k);
  v.w_v = put(params.w_v);
  v.mu_r = put(params.mu_r);
  v.mu_k = put(params.mu_k);
  v.mu_v = put(params.mu_v);
  v.decay = put(params.wkv.decay);
  v.bonus = put(params.wkv.bonus);
  v.w_rc = put(params.w_rc);
  v.w_kc = put(params.w_kc);
  v.mu_rc = put(params.mu_rc);
  v.mu_kc = put(params.mu_kc);
  v.w_c = put(params.w_c);
  v.gamma = params.gamma;
  v.shift = params.shift;
  v.joint_tokens = params.joint_tokens;
  return v;
}

Var q_shift(Var x, PatchGrid grid, Index shift, double gamma) {
  const std::size_t xid = x.id();
  return x.tape()->record(vrwkv::q_shift(x.value(), grid, shift, gamma), {xid},
                          [=](const GradTape&, const Matrix& g, GradientSink& sink) {
                            sink.accumulate(xid, q_shift_adjoint(g, grid, shift, gamma));
                          });
}

Var bi_wkv(Var k, Var v, Var decay, Var bonus, Index frames) {
  GradTape& tape = *k.tape();
  if (v.tape() != &tape || decay.tape() != &tape || bonus.tape() != &tape) {
    throw ContractError("bi_wkv: operands live on different tapes");
  }
  require_same_shape(k.value(), v.value(), "bi_wkv");
  if (frames < 1 || k.rows() % frames != 0) throw DimensionError("bi_wkv: rows do not split into frames");
  const Index n = k.rows() / frames;
  auto params_of = [](const GradTape& t, std::size_t d, std::size_t b) {
    return WkvParams<double>{t.value(d).row(0), t.value(b).row(0)};
  };
  const std::size_t kid = k.id(), vid = v.id(), did = decay.id(), bid = bonus.id();
  const WkvParams<double> params = params_of(tape, did, bid);
  Matrix out(k.rows(), k.cols());
  for (Index f = 0; f < frames; ++f) {
    out.middleRows(f * n, n) = bi_wkv_scan(k.value().middleRows(f * n, n), v.value().middleRows(f * n, n), params);
  }
  return tape.record(std::move(out), {kid, vid, did, bid},
                     [=](const GradTape& t, const Matrix& g, GradientSink& sink) {
                       const WkvParams<double> p = params_of(t, did, bid);
                       const Matrix& kv = t.value(kid);
                       const Matrix& vv = t.value(vid);
                       Matrix dk(kv.rows(), kv.cols()), dv(kv.rows(), kv.cols());
                       Matrix dw = Matrix::Zero(1, kv.cols()), du = Matrix::Zero(1, kv.cols());
                       for (Index f = 0; f < frames; ++f) {
                         auto grads = bi_wkv_backward(kv.middleRows(f * n, n), vv.middleRows(f * n, n), p,
                                                      g.middleRows(f * n, n));
                         dk.middleRows(f * n, n) = grads.keys;
                         dv.middleRows(f * n, n) = grads.values;
                         dw += grads.decay;
                         du += grads.bonus;
                       }
                       sink.accumulate(kid, dk);
                       sink.accumulate(vid, dv);
                       sink.accumulate(did, dw);
                       sink.accumulate(bid, du);
                     });
}

Var previous_frame(Var x, const FrameLayout& layout) {
  if (x.rows() != layout.tokens()) throw DimensionError("previous_frame: row count disagrees with layout");
  const Index n = layout.tokens_per_frame();
  std::vector<Index> index(static_cast<std::size_t>(x.rows()));
  for (Index i = 0; i < x.rows(); ++i) index[static_cast<std::size_t>(i)] = i < n ? i : i - n;
  return gather_rows(x, std::move(index));
}

Var block_forward(Var tokens, const FrameLayout& layout, const BlockVars& p) {
  if (tokens.rows() != layout.tokens() || layout.frames < 1) {
    throw DimensionError("block_forward: token count disagrees with layout");
  }
  auto shifted = [&](Var x, Var other, Var mu) { return q_shift(lerp_row(x, other, mu), layout.grid, p.shift, p.gamma); };

  const Var prev = previous_frame(tokens, layout);
  const Var r = matmul(shifted(tokens, prev, p.mu_r), p.w_r);
  const Var k = matmul(shifted(tokens, prev, p.mu_k), p.w_k);
  const Var v = matmul(shifted(tokens, prev, p.mu_v), p.w_v);
  const Var o = hadamard(sigmoid(r), bi_wkv(k, v, p.decay, p.bonus, p.joint_tokens ? 1 : layout.frames));

  const Var o_prev = previous_frame(o, layout);
  const Var rc = matmul(shifted(o, o_prev, p.mu_rc), p.w_rc);
  const Var kc = matmul(shifted(o, o_prev, p.mu_kc), p.w_kc);
  const Var cm = hadamard(sigmoid(rc), relu_sq(matmul(kc, p.w_c)));
  return tokens + o + cm;
}

}  // namespace ad

}  // namespace vrwkv
