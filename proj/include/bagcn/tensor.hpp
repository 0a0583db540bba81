#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bagcn {

using Scalar = double;
using Index = Eigen::Index;
using ArrayX = Eigen::ArrayXd;

// Row-major dense matrix; all flat tensor storage is row-major, so matrix
// views over it must be row-major as well.
using MatrixRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<MatrixRM>;
using CMapMat = Eigen::Map<const MatrixRM>;
using StrideMapMat = Eigen::Map<MatrixRM, 0, Eigen::OuterStride<>>;
using CStrideMapMat = Eigen::Map<const MatrixRM, 0, Eigen::OuterStride<>>;

using Shape = std::vector<Index>;

std::string shape_string(std::span<const Index> shape);
Index shape_numel(std::span<const Index> shape);

/// Throws std::invalid_argument; used for all precondition violations.
[[noreturn]] void fail(const std::string& message);

inline void require(bool condition, const std::string& message) {
  if (!condition) fail(message);
}

/// Dense n-dimensional array of 64-bit floats in row-major order, with an
/// optional same-shape gradient buffer. Values are immutable by convention
/// once placed on a tape; gradient accumulation happens on the buffer only.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);  // zero-filled
  Tensor(Shape shape, ArrayX data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, Scalar value);
  static Tensor of(Shape shape, std::initializer_list<Scalar> values);
  static Tensor scalar(Scalar value);

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index extent(Index axis) const;  // negative axis counts from the back
  Index numel() const { return data_.size(); }
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  ArrayX& array() { return data_; }
  const ArrayX& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  template <class... I>
  Scalar& operator()(I... idx) {
    return data_[flat_index({static_cast<Index>(idx)...})];
  }
  template <class... I>
  Scalar operator()(I... idx) const {
    return data_[flat_index({static_cast<Index>(idx)...})];
  }

  /// View the flat buffer as a rows x cols row-major matrix.
  MapMat matrix(Index rows, Index cols);
  CMapMat matrix(Index rows, Index cols) const;
  /// Fold every leading axis; columns = last extent.
  MapMat by_last_axis();
  CMapMat by_last_axis() const;

  // Optional gradient buffer. Absent until ensure_grad(); same shape as data.
  bool has_grad() const { return grad_.size() == data_.size() && data_.size() > 0; }
  ArrayX& grad();
  const ArrayX& grad() const;
  void ensure_grad();
  void zero_grad();
  void drop_grad() { grad_.resize(0); }

 private:
  Index flat_index(std::initializer_list<Index> idx) const;

  Shape shape_;
  ArrayX data_;
  ArrayX grad_;
};

/// Named learnable tensor. Gradients accumulate on value.grad(); `decay`
/// marks participation in L2 weight decay (off for biases and BN affine).
struct Parameter {
  std::string name;
  Tensor value;
  bool decay = true;

  Index numel() const { return value.numel(); }
  const Shape& shape() const { return value.shape(); }
};

}  // namespace bagcn
