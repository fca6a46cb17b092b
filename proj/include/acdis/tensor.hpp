#ifndef ACDIS_TENSOR_HPP_
#define ACDIS_TENSOR_HPP_

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace acdis {

// Dense row-major double tensor. Copies share the underlying buffer
// (clone() for a deep copy); reshape returns an alias with a new shape.
// Double precision everywhere: the verification core is finite-difference
// gradient checking, which float32 cannot support at the required tolerances.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> shape);

  static Tensor zeros(std::vector<std::int64_t> shape);
  static Tensor full(std::vector<std::int64_t> shape, double value);
  static Tensor from(std::vector<std::int64_t> shape,
                     std::vector<double> values);
  static Tensor scalar(double value);

  const std::vector<std::int64_t>& shape() const { return shape_; }
  std::int64_t dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  int ndim() const { return static_cast<int>(shape_.size()); }
  std::int64_t size() const;
  bool defined() const { return buf_ != nullptr; }

  double* data() { return buf_->data(); }
  const double* data() const { return buf_->data(); }
  double& operator[](std::int64_t i) { return (*buf_)[static_cast<size_t>(i)]; }
  double operator[](std::int64_t i) const {
    return (*buf_)[static_cast<size_t>(i)];
  }

  // Scalar accessor; throws unless size() == 1.
  double item() const;

  Tensor clone() const;
  Tensor reshaped(std::vector<std::int64_t> new_shape) const;
  void fill(double value);

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;

  std::string shape_str() const;

 private:
  std::vector<std::int64_t> shape_;
  std::shared_ptr<std::vector<double>> buf_;
};

std::int64_t shape_numel(const std::vector<std::int64_t>& shape);
std::vector<std::int64_t> row_major_strides(
    const std::vector<std::int64_t>& shape);

}  // namespace acdis

#endif  // ACDIS_TENSOR_HPP_
