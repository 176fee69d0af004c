#pragma once

#include "vrwkv/block.hpp"
#include "vrwkv/core.hpp"

#include <cmath>
#include <vector>

namespace vrwkv {

/// Adam over a fixed list of parameter views. Moment buffers are created on
/// the first step and must see the same views, in the same order, afterwards.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(std::vector<ParamView>& params, const std::vector<Matrix>& grads) {
    if (grads.size() != params.size()) throw DimensionError("adam: gradient count disagrees with parameters");
    if (first_.empty()) {
      for (const auto& p : params) {
        first_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
        second_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
      }
    }
    if (first_.size() != params.size()) throw ContractError("adam: parameter list changed between steps");
    ++count_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(count_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(count_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      require_same_shape(params[i].value, grads[i], "adam");
      first_[i] = beta1_ * first_[i] + (1.0 - beta1_) * grads[i];
      second_[i] = beta2_ * second_[i] + (1.0 - beta2_) * grads[i].cwiseAbs2();
      params[i].value.array() -= lr_ * (first_[i].array() / c1) / ((second_[i].array() / c2).sqrt() + eps_);
    }
  }

  long steps() const { return count_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long count_ = 0;
  std::vector<Matrix> first_, second_;
};

}  // namespace vrwkv
