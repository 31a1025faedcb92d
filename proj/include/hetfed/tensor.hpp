#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hetfed {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

/// Thrown whenever operand shapes are incompatible with an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1},
                         [](Index a, Index b) { return a * b; });
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major n-dimensional array with an optional gradient buffer of the
/// same shape. Storage is an Eigen column vector so that any contiguous slab
/// can be viewed as a matrix without copying.
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_dims();
    values_ = Vector::Zero(shape_size(shape_));
  }

  Tensor(Shape shape, Vector values)
      : shape_(std::move(shape)), values_(std::move(values)) {
    check_dims();
    if (values_.size() != shape_size(shape_)) {
      throw ShapeError("tensor: " + std::to_string(values_.size()) +
                       " values do not fill shape " + shape_string(shape_));
    }
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : Tensor(std::move(shape),
               Eigen::Map<const Vector>(values.begin(),
                                        static_cast<Index>(values.size()))) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor constant(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    t.values_.setConstant(value);
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const { return values_.size(); }

  Vector& values() { return values_; }
  const Vector& values() const { return values_; }
  Scalar* data() { return values_.data(); }
  const Scalar* data() const { return values_.data(); }

  Scalar& operator[](Index i) { return values_[i]; }
  Scalar operator[](Index i) const { return values_[i]; }

  /// Row-major multi-index access; the number of indices must equal rank().
  template <typename... Ix>
  Scalar& at(Ix... ix) {
    return values_[offset({static_cast<Index>(ix)...})];
  }
  template <typename... Ix>
  Scalar at(Ix... ix) const {
    return values_[offset({static_cast<Index>(ix)...})];
  }

  /// View the whole buffer as a rows x cols row-major matrix.
  MatrixMap matrix(Index rows, Index cols) {
    check_matrix(rows, cols);
    return MatrixMap(values_.data(), rows, cols);
  }
  ConstMatrixMap matrix(Index rows, Index cols) const {
    check_matrix(rows, cols);
    return ConstMatrixMap(values_.data(), rows, cols);
  }

  Tensor reshaped(Shape shape) const& {
    if (shape_size(shape) != size()) {
      throw ShapeError("reshape: " + shape_string(shape_) + " -> " +
                       shape_string(shape));
    }
    return Tensor(std::move(shape), values_);
  }
  Tensor reshaped(Shape shape) && {
    if (shape_size(shape) != size()) {
      throw ShapeError("reshape: " + shape_string(shape_) + " -> " +
                       shape_string(shape));
    }
    return Tensor(std::move(shape), std::move(values_));
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, values_.template cast<Other>());
  }

  bool has_grad() const { return grad_.has_value(); }
  Vector& grad() {
    if (!grad_) grad_ = Vector::Zero(size());
    return *grad_;
  }
  const Vector& grad() const {
    if (!grad_) throw std::logic_error("tensor: no gradient buffer");
    return *grad_;
  }
  void set_grad(Vector g) {
    if (g.size() != size()) {
      throw ShapeError("tensor: gradient size does not match " +
                       shape_string(shape_));
    }
    grad_ = std::move(g);
  }
  void zero_grad() { grad().setZero(); }
  void clear_grad() { grad_.reset(); }

  bool all_finite() const { return values_.allFinite(); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  void check_dims() const {
    for (Index d : shape_) {
      if (d < 0) throw ShapeError("tensor: negative dimension in " + shape_string(shape_));
    }
  }

  void check_matrix(Index rows, Index cols) const {
    if (rows * cols != size()) {
      throw ShapeError("tensor: cannot view " + shape_string(shape_) + " as " +
                       std::to_string(rows) + "x" + std::to_string(cols));
    }
  }

  Index offset(std::initializer_list<Index> ix) const {
    if (static_cast<Index>(ix.size()) != rank()) {
      throw ShapeError("tensor: index rank mismatch for " + shape_string(shape_));
    }
    Index off = 0;
    std::size_t axis = 0;
    for (Index i : ix) {
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  Shape shape_;
  Vector values_;
  std::optional<Vector> grad_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

/// Keeps large freed blocks on the heap instead of returning them to the OS.
/// SNN activations are hundreds of MB per batch and would otherwise be
/// page-faulted in afresh on every step. No-op outside glibc.
void configure_allocator();

}  // namespace hetfed
