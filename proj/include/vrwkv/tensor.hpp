#pragma once

#include "vrwkv/core.hpp"
#include "vrwkv/linalg.hpp"

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace vrwkv {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape);

/// Immutable dense N-d array in row-major order.
///
/// Construction rejects a data length that disagrees with the shape and any
/// non-finite value, so every Tensor in circulation is finite.
template <typename Scalar>
class BasicTensor {
 public:
  using value_type = Scalar;

  BasicTensor() : shape_{0} {}

  explicit BasicTensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_)) {}

  BasicTensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw DimensionError("tensor: shape " + shape_string(shape_) + " needs " +
                           std::to_string(shape_size(shape_)) + " values, got " +
                           std::to_string(data_.size()));
    }
    for (Scalar v : data_) {
      if (!std::isfinite(v)) throw NumericError("tensor: non-finite value");
    }
  }

  template <typename Derived>
  static BasicTensor from_matrix(const Eigen::MatrixBase<Derived>& m) {
    RowMatrix<Scalar> rm = m;
    return BasicTensor({static_cast<std::size_t>(rm.rows()), static_cast<std::size_t>(rm.cols())},
                       std::vector<Scalar>(rm.data(), rm.data() + rm.size()));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::span<const Scalar> data() const { return data_; }
  Scalar operator[](std::size_t flat) const { return data_[flat]; }

  /// View of a rank-2 tensor as a row-major matrix.
  Eigen::Map<const RowMatrix<Scalar>> matrix() const {
    if (rank() != 2) throw DimensionError("tensor: matrix view needs rank 2, got " + shape_string(shape_));
    return {data_.data(), static_cast<Index>(shape_[0]), static_cast<Index>(shape_[1])};
  }

  /// The data reinterpreted as rows x (size / rows).
  Eigen::Map<const RowMatrix<Scalar>> reshaped(std::size_t rows) const {
    if (rows == 0 || size() % rows != 0) {
      throw DimensionError("tensor: cannot view " + shape_string(shape_) + " with " + std::to_string(rows) + " rows");
    }
    return {data_.data(), static_cast<Index>(rows), static_cast<Index>(size() / rows)};
  }

  BasicTensor with_shape(Shape shape) const { return BasicTensor(std::move(shape), data_); }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  Shape shape_;
  std::vector<Scalar> data_;
};

using Tensor = BasicTensor<double>;

template <typename Scalar>
BasicTensor<Scalar> matmul(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw DimensionError("matmul: operands must be rank 2, got " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  RowMatrix<Scalar> c;
  matmul_into(a.matrix(), b.matrix(), c);
  return BasicTensor<Scalar>::from_matrix(c);
}

enum class MapReduce { exp, sigmoid, relu_sq, sum_axis, max_axis, softmax_axis };

/// Elementwise maps and single-axis reductions. `axis` is ignored by the
/// elementwise kinds. Reductions drop the axis; softmax keeps the shape.
template <typename Scalar>
BasicTensor<Scalar> map_reduce(const BasicTensor<Scalar>& x, MapReduce kind, std::size_t axis = 0) {
  using std::exp;
  std::vector<Scalar> out(x.data().begin(), x.data().end());
  switch (kind) {
    case MapReduce::exp:
      for (auto& v : out) v = exp(v);
      return BasicTensor<Scalar>(x.shape(), std::move(out));
    case MapReduce::sigmoid:
      for (auto& v : out) v = sigmoid(v);
      return BasicTensor<Scalar>(x.shape(), std::move(out));
    case MapReduce::relu_sq:
      for (auto& v : out) v = v > Scalar(0) ? v * v : Scalar(0);
      return BasicTensor<Scalar>(x.shape(), std::move(out));
    default:
      break;
  }

  if (axis >= x.rank()) {
    throw DimensionError("map_reduce: axis " + std::to_string(axis) + " out of range for " + shape_string(x.shape()));
  }
  const std::size_t n = x.extent(axis);
  std::size_t inner = 1;
  for (std::size_t a = axis + 1; a < x.rank(); ++a) inner *= x.extent(a);
  const std::size_t outer = n == 0 ? 0 : x.size() / (n * inner);
  auto in = x.data();

  if (kind == MapReduce::softmax_axis) {
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * n * inner + i;
        Scalar m = in[base];
        for (std::size_t j = 1; j < n; ++j) m = std::max(m, in[base + j * inner]);
        Scalar total = 0;
        for (std::size_t j = 0; j < n; ++j) {
          out[base + j * inner] = exp(in[base + j * inner] - m);
          total += out[base + j * inner];
        }
        for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= total;
      }
    }
    return BasicTensor<Scalar>(x.shape(), std::move(out));
  }

  if (n == 0) throw EmptyInputError("map_reduce: cannot reduce an empty axis");
  Shape reduced = x.shape();
  reduced.erase(reduced.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<Scalar> red(outer * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      Scalar acc = in[base];
      for (std::size_t j = 1; j < n; ++j) {
        const Scalar v = in[base + j * inner];
        acc = kind == MapReduce::sum_axis ? acc + v : std::max(acc, v);
      }
      red[o * inner + i] = acc;
    }
  }
  return BasicTensor<Scalar>(std::move(reduced), std::move(red));
}

// Binary format: u64 rank, u64 extents, then f64 values, all little-endian.

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

/// Size in bytes of `t` in the binary format.
std::size_t serialized_size(const Tensor& t);

}  // namespace vrwkv
