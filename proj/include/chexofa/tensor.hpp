#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "chexofa/errors.hpp"

namespace cxo {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major tensor value.
///
/// Storage is a row-major Eigen matrix whose column count is the last
/// dimension and whose row count is the product of the leading dimensions, so
/// `data()` is exactly the flat row-major buffer.
template <typename Scalar>
class BasicTensor {
 public:
  using Matrix = MatrixX<Scalar>;

  BasicTensor() : shape_{1}, values_(Matrix::Zero(1, 1)) {}

  BasicTensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)) {
    check_shape(shape_);
    const std::size_t n = element_count(shape_);
    if (n != data.size()) {
      throw ShapeError("tensor: shape " + shape_string(shape_) + " needs " + std::to_string(n) +
                       " values, got " + std::to_string(data.size()));
    }
    values_ = Eigen::Map<const Matrix>(data.data(), leading(shape_), shape_.back());
  }

  /// Rank-2 tensor holding `m`.
  explicit BasicTensor(Matrix m) : shape_{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, values_(std::move(m)) {
    check_shape(shape_);
  }

  static BasicTensor zeros(Shape shape) {
    check_shape(shape);
    BasicTensor t;
    t.values_ = Matrix::Zero(leading(shape), shape.back());
    t.shape_ = std::move(shape);
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return static_cast<std::size_t>(values_.size()); }

  std::span<const Scalar> data() const { return {values_.data(), size()}; }
  std::span<Scalar> data() { return {values_.data(), size()}; }

  const Matrix& matrix() const { return values_; }
  Matrix& matrix() { return values_; }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && std::equal(a.data().begin(), a.data().end(), b.data().begin());
  }

 private:
  static std::size_t element_count(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }
  static Eigen::Index leading(const Shape& s) {
    return static_cast<Eigen::Index>(element_count(s) / s.back());
  }
  static void check_shape(const Shape& s) {
    if (s.empty()) throw ShapeError("tensor: rank must be >= 1");
    for (auto d : s) {
      if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_string(s));
    }
  }

  Shape shape_;
  Matrix values_;
};

using Tensor = BasicTensor<double>;
using Matrix = MatrixX<double>;

}  // namespace cxo
