#include "vrwkv/autodiff.hpp"

#include "vrwkv/linalg.hpp"

#include <algorithm>
#include <string>
#include <utility>

namespace vrwkv::ad {

const Matrix& Var::value() const {
  if (tape_ == nullptr) throw ContractError("ad: use of an unbound Var");
  return tape_->value(id_);
}

Var GradTape::leaf(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true, true});
  return Var(this, nodes_.size() - 1);
}

Var GradTape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false, false});
  return Var(this, nodes_.size() - 1);
}

Var GradTape::record(Matrix value, std::vector<std::size_t> parents, BackwardFn backward) {
  bool needs = false;
  for (auto p : parents) {
    if (p >= nodes_.size()) throw ContractError("ad: parent id is not on this tape");
    needs = needs || nodes_[p].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), std::move(parents), needs ? std::move(backward) : BackwardFn{},
                        false, needs});
  return Var(this, nodes_.size() - 1);
}

std::vector<std::size_t> GradTape::leaves() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].leaf) out.push_back(i);
  }
  return out;
}

std::map<std::size_t, Matrix> backward(const GradTape& tape, Var loss, std::vector<std::size_t>* visit_order) {
  if (loss.tape() != &tape) throw ContractError("backward: loss is not recorded on this tape");
  if (loss.rows() != 1 || loss.cols() != 1) {
    throw ContractError("backward: loss must be scalar, got " + std::to_string(loss.rows()) + "x" +
                        std::to_string(loss.cols()));
  }
  std::vector<Matrix> grads(tape.size());
  grads[loss.id()] = Matrix::Ones(1, 1);
  GradientSink sink(grads);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    const auto& node = tape.nodes_[i];
    if (grads[i].size() == 0 || !node.requires_grad) continue;
    if (visit_order != nullptr) visit_order->push_back(i);
    if (node.backward) node.backward(tape, grads[i], sink);
  }
  std::map<std::size_t, Matrix> out;
  for (auto id : tape.leaves()) {
    const Matrix& v = tape.value(id);
    out.emplace(id, grads[id].size() == 0 ? Matrix::Zero(v.rows(), v.cols()) : std::move(grads[id]));
  }
  return out;
}

namespace {

GradTape& same_tape(Var a, Var b, const char* what) {
  if (a.tape() == nullptr || a.tape() != b.tape()) {
    throw ContractError(std::string(what) + ": operands live on different tapes");
  }
  return *a.tape();
}

void require_row(Var x, Var row, const char* what) {
  if (row.rows() != 1 || row.cols() != x.cols()) {
    throw DimensionError(std::string(what) + ": expected a 1x" + std::to_string(x.cols()) + " row, got " +
                         std::to_string(row.rows()) + "x" + std::to_string(row.cols()));
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  auto& tape = same_tape(a, b, "matmul");
  Matrix out = vrwkv::matmul(a.value(), b.value());
  const auto ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [ia, ib](const GradTape& t, const Matrix& g, GradientSink& s) {
    if (t.requires_grad(ia)) s.accumulate(ia, vrwkv::matmul(g, t.value(ib).transpose()));
    if (t.requires_grad(ib)) s.accumulate(ib, vrwkv::matmul_tn(t.value(ia), g));
  });
}

Var add(Var a, Var b) {
  auto& tape = same_tape(a, b, "add");
  require_same_shape(a.value(), b.value(), "add");
  const auto ia = a.id(), ib = b.id();
  return tape.record(a.value() + b.value(), {ia, ib}, [ia, ib](const GradTape& t, const Matrix& g, GradientSink& s) {
    if (t.requires_grad(ia)) s.accumulate(ia, g);
    if (t.requires_grad(ib)) s.accumulate(ib, g);
  });
}

Var sub(Var a, Var b) {
  auto& tape = same_tape(a, b, "sub");
  require_same_shape(a.value(), b.value(), "sub");
  const auto ia = a.id(), ib = b.id();
  return tape.record(a.value() - b.value(), {ia, ib}, [ia, ib](const GradTape& t, const Matrix& g, GradientSink& s) {
    if (t.requires_grad(ia)) s.accumulate(ia, g);
    if (t.requires_grad(ib)) s.accumulate(ib, -g);
  });
}

Var hadamard(Var a, Var b) {
  auto& tape = same_tape(a, b, "hadamard");
  require_same_shape(a.value(), b.value(), "hadamard");
  const auto ia = a.id(), ib = b.id();
  Matrix out = a.value().cwiseProduct(b.value());
  return tape.record(std::move(out), {ia, ib}, [ia, ib](const GradTape& t, const Matrix& g, GradientSink& s) {
    if (t.requires_grad(ia)) s.accumulate(ia, g.cwiseProduct(t.value(ib)));
    if (t.requires_grad(ib)) s.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

Var scale(Var x, double factor) {
  const auto ix = x.id();
  return x.tape()->record(factor * x.value(), {ix}, [ix, factor](const GradTape&, const Matrix& g, GradientSink& s) {
    s.accumulate(ix, factor * g);
  });
}

Var add_row(Var x, Var row) {
  auto& tape = same_tape(x, row, "add_row");
  require_row(x, row, "add_row");
  const auto ix = x.id(), ir = row.id();
  Matrix out = x.value().rowwise() + row.value().row(0);
  return tape.record(std::move(out), {ix, ir}, [ix, ir](const GradTape& t, const Matrix& g, GradientSink& s) {
    if (t.requires_grad(ix)) s.accumulate(ix, g);
    if (t.requires_grad(ir)) s.accumulate(ir, g.colwise().sum());
  });
}

Var mul_row(Var x, Var row) {
  auto& tape = same_tape(x, row, "mul_row");
  require_row(x, row, "mul_row");
  const auto ix = x.id(), ir = row.id();
  Matrix out = x.value().array().rowwise() * row.value().row(0).array();
  return tape.record(std::move(out), {ix, ir}, [ix, ir](const GradTape& t, const Matrix& g, GradientSink& s) {
    if (t.requires_grad(ix)) {
      s.accumulate(ix, (g.array().rowwise() * t.value(ir).row(0).array()).matrix());
    }
    if (t.requires_grad(ir)) s.accumulate(ir, g.cwiseProduct(t.value(ix)).colwise().sum());
  });
}

Var lerp_row(Var x, Var other, Var mu) {
  auto& tape = same_tape(x, other, "lerp_row");
  same_tape(x, mu, "lerp_row");
  require_same_shape(x.value(), other.value(), "lerp_row");
  require_row(x, mu, "lerp_row");
  const auto ix = x.id(), io = other.id(), im = mu.id();
  const auto m = mu.value().row(0).array();
  Matrix out = (other.value().array() + (x.value() - other.value()).array().rowwise() * m).matrix();
  return tape.record(std::move(out), {ix, io, im}, [ix, io, im](const GradTape& t, const Matrix& g, GradientSink& s) {
    const auto m = t.value(im).row(0).array();
    if (t.requires_grad(ix)) s.accumulate(ix, (g.array().rowwise() * m).matrix());
    if (t.requires_grad(io)) s.accumulate(io, (g.array().rowwise() * (1.0 - m)).matrix());
    if (t.requires_grad(im)) {
      s.accumulate(im, g.cwiseProduct(t.value(ix) - t.value(io)).colwise().sum());
    }
  });
}

Var sigmoid(Var x) {
  const auto ix = x.id();
  Matrix out = vrwkv::sigmoid(x.value().array()).matrix();
  const std::size_t self = x.tape()->size();
  return x.tape()->record(std::move(out), {ix}, [ix, self](const GradTape& t, const Matrix& g, GradientSink& s) {
    const auto y = t.value(self).array();
    s.accumulate(ix, (g.array() * y * (1.0 - y)).matrix());
  });
}

Var relu_sq(Var x) {
  const auto ix = x.id();
  Matrix out = vrwkv::relu_sq(x.value().array()).matrix();
  return x.tape()->record(std::move(out), {ix}, [ix](const GradTape& t, const Matrix& g, GradientSink& s) {
    s.accumulate(ix, (g.array() * 2.0 * t.value(ix).array().max(0.0)).matrix());
  });
}

Var exp(Var x) {
  const auto ix = x.id();
  Matrix out = x.value().array().exp().matrix();
  require_finite(out, "ad::exp");
  const std::size_t self = x.tape()->size();
  return x.tape()->record(std::move(out), {ix}, [ix, self](const GradTape& t, const Matrix& g, GradientSink& s) {
    s.accumulate(ix, g.cwiseProduct(t.value(self)));
  });
}

Var square(Var x) {
  const auto ix = x.id();
  return x.tape()->record(x.value().array().square().matrix(), {ix},
                          [ix](const GradTape& t, const Matrix& g, GradientSink& s) {
                            s.accumulate(ix, 2.0 * g.cwiseProduct(t.value(ix)));
                          });
}

Var softmax_rows(Var x) {
  const auto ix = x.id();
  Matrix out = x.value();
  softmax_rows_inplace(out);
  const std::size_t self = x.tape()->size();
  return x.tape()->record(std::move(out), {ix}, [ix, self](const GradTape& t, const Matrix& g, GradientSink& s) {
    const Matrix& y = t.value(self);
    const Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
    s.accumulate(ix, (y.array() * (g.colwise() - dot).array()).matrix());
  });
}

Var sum(Var x) {
  const auto ix = x.id();
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  const Index r = x.rows(), c = x.cols();
  return x.tape()->record(std::move(out), {ix}, [ix, r, c](const GradTape&, const Matrix& g, GradientSink& s) {
    s.accumulate(ix, Matrix::Constant(r, c, g(0, 0)));
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var mse(Var prediction, Var target) { return mean(square(sub(prediction, target))); }

Var gather_rows(Var x, std::vector<Index> index) {
  const Matrix& v = x.value();
  Matrix out(static_cast<Index>(index.size()), v.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= v.rows()) throw DimensionError("gather_rows: row index out of range");
    out.row(static_cast<Index>(i)) = v.row(index[i]);
  }
  const auto ix = x.id();
  const Index rows = v.rows();
  return x.tape()->record(std::move(out), {ix},
                          [ix, rows, index = std::move(index)](const GradTape&, const Matrix& g, GradientSink& s) {
                            Matrix gx = Matrix::Zero(rows, g.cols());
                            for (std::size_t i = 0; i < index.size(); ++i) gx.row(index[i]) += g.row(static_cast<Index>(i));
                            s.accumulate(ix, gx);
                          });
}

Var slice_rows(Var x, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > x.rows()) throw DimensionError("slice_rows: range out of bounds");
  const auto ix = x.id();
  const Index rows = x.rows();
  return x.tape()->record(x.value().middleRows(begin, count), {ix},
                          [ix, rows, begin, count](const GradTape&, const Matrix& g, GradientSink& s) {
                            Matrix gx = Matrix::Zero(rows, g.cols());
                            gx.middleRows(begin, count) = g;
                            s.accumulate(ix, gx);
                          });
}

Var vstack(const std::vector<Var>& parts) {
  if (parts.empty()) throw EmptyInputError("vstack: no parts");
  Index rows = 0;
  const Index cols = parts.front().cols();
  std::vector<std::size_t> ids;
  std::vector<Index> offsets;
  for (const auto& p : parts) {
    same_tape(parts.front(), p, "vstack");
    if (p.cols() != cols) throw DimensionError("vstack: column counts differ");
    ids.push_back(p.id());
    offsets.push_back(rows);
    rows += p.rows();
  }
  Matrix out(rows, cols);
  for (std::size_t i = 0; i < parts.size(); ++i) out.middleRows(offsets[i], parts[i].rows()) = parts[i].value();
  return parts.front().tape()->record(
      std::move(out), ids, [ids, offsets](const GradTape& t, const Matrix& g, GradientSink& s) {
        for (std::size_t i = 0; i < ids.size(); ++i) {
          if (t.requires_grad(ids[i])) s.accumulate(ids[i], g.middleRows(offsets[i], t.value(ids[i]).rows()));
        }
      });
}

}  // namespace vrwkv::ad
