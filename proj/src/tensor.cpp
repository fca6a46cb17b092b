#include "acdis/tensor.hpp"

#include <cmath>
#include <sstream>
#include <utility>

#include "acdis/common.hpp"

namespace acdis {

std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::vector<std::int64_t> row_major_strides(
    const std::vector<std::int64_t>& shape) {
  std::vector<std::int64_t> strides(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    strides[i] = strides[i + 1] * shape[i + 1];
  }
  return strides;
}

Tensor::Tensor(std::vector<std::int64_t> shape) : shape_(std::move(shape)) {
  for (auto d : shape_) {
    if (d < 0) throw ShapeError("tensor: negative dimension");
  }
  buf_ = std::make_shared<std::vector<double>>(
      static_cast<size_t>(shape_numel(shape_)), 0.0);
}

Tensor Tensor::zeros(std::vector<std::int64_t> shape) {
  return Tensor(std::move(shape));
}

Tensor Tensor::full(std::vector<std::int64_t> shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

Tensor Tensor::from(std::vector<std::int64_t> shape,
                    std::vector<double> values) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("tensor: payload size does not match shape");
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.buf_ = std::make_shared<std::vector<double>>(std::move(values));
  return t;
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

std::int64_t Tensor::size() const { return shape_numel(shape_); }

double Tensor::item() const {
  if (!defined() || size() != 1) {
    throw ShapeError("tensor: item() requires exactly one element");
  }
  return (*buf_)[0];
}

Tensor Tensor::clone() const {
  Tensor t;
  t.shape_ = shape_;
  t.buf_ = std::make_shared<std::vector<double>>(*buf_);
  return t;
}

Tensor Tensor::reshaped(std::vector<std::int64_t> new_shape) const {
  if (shape_numel(new_shape) != size()) {
    throw ShapeError("tensor: reshape size mismatch (" + shape_str() + ")");
  }
  Tensor t;
  t.shape_ = std::move(new_shape);
  t.buf_ = buf_;
  return t;
}

void Tensor::fill(double value) {
  for (auto& v : *buf_) v = value;
}

bool Tensor::all_finite() const {
  for (double v : *buf_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << ",";
    os << shape_[i];
  }
  os << ")";
  return os.str();
}

}  // namespace acdis
