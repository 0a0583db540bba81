#include "bagcn/tensor.hpp"

#include <numeric>
#include <sstream>

namespace bagcn {

std::string shape_string(std::span<const Index> shape) {
  std::ostringstream out;
  out << "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ")";
  return out.str();
}

Index shape_numel(std::span<const Index> shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

void fail(const std::string& message) { throw std::invalid_argument(message); }

namespace {

void check_shape(const Shape& shape) {
  require(!shape.empty(), "tensor shape must have at least one axis");
  for (Index e : shape)
    require(e > 0, "tensor extents must be positive, got " +
                       shape_string(std::span<const Index>(shape)));
}

}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_ = ArrayX::Zero(shape_numel(shape_));
}

Tensor::Tensor(Shape shape, ArrayX data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  require(shape_numel(shape_) == data_.size(),
          "data length " + std::to_string(data_.size()) + " does not match shape " +
              shape_string(std::span<const Index>(shape_)));
}

Tensor Tensor::zeros(Shape shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(Shape shape, Scalar value) {
  Tensor t(std::move(shape));
  t.data_.setConstant(value);
  return t;
}

Tensor Tensor::of(Shape shape, std::initializer_list<Scalar> values) {
  ArrayX data(static_cast<Index>(values.size()));
  Index i = 0;
  for (Scalar v : values) data[i++] = v;
  return Tensor(std::move(shape), std::move(data));
}

Tensor Tensor::scalar(Scalar value) { return Tensor::full({1}, value); }

Index Tensor::extent(Index axis) const {
  Index r = rank();
  if (axis < 0) axis += r;
  require(axis >= 0 && axis < r, "axis out of range");
  return shape_[static_cast<size_t>(axis)];
}

MapMat Tensor::matrix(Index rows, Index cols) {
  require(rows * cols == numel(), "matrix view does not cover the buffer");
  return MapMat(data_.data(), rows, cols);
}

CMapMat Tensor::matrix(Index rows, Index cols) const {
  require(rows * cols == numel(), "matrix view does not cover the buffer");
  return CMapMat(data_.data(), rows, cols);
}

MapMat Tensor::by_last_axis() {
  Index cols = shape_.back();
  return matrix(numel() / cols, cols);
}

CMapMat Tensor::by_last_axis() const {
  Index cols = shape_.back();
  return matrix(numel() / cols, cols);
}

ArrayX& Tensor::grad() {
  require(has_grad(), "gradient buffer not materialized");
  return grad_;
}

const ArrayX& Tensor::grad() const {
  require(has_grad(), "gradient buffer not materialized");
  return grad_;
}

void Tensor::ensure_grad() {
  if (!has_grad()) grad_ = ArrayX::Zero(data_.size());
}

void Tensor::zero_grad() {
  if (has_grad())
    grad_.setZero();
  else
    ensure_grad();
}

Index Tensor::flat_index(std::initializer_list<Index> idx) const {
  require(static_cast<Index>(idx.size()) == rank(), "index rank mismatch");
  Index flat = 0;
  size_t axis = 0;
  for (Index i : idx) {
    Index e = shape_[axis++];
    require(i >= 0 && i < e, "index out of range");
    flat = flat * e + i;
  }
  return flat;
}

}  // namespace bagcn
