// SPDX-License-Identifier: Apache-2.0
/**
 * @file   tensor.hpp
 * @brief  Dense row-major double tensor used by every module.
 */
#ifndef DFKD_TENSOR_HPP_
#define DFKD_TENSOR_HPP_

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dfkd {

/// Raised when an operation's preconditions on shapes or arguments fail.
class ContractError : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

/// Raised when a computation produces NaN/Inf or an otherwise unusable value.
class NumericError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Raised for bad configuration values or degenerate inputs.
class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Raised for file-system and format problems.
class IoError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape &s);
std::size_t shape_numel(const Shape &s);

class Tensor {
public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({1}, v); }

  const Shape &shape() const { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double *data() { return data_.data(); }
  const double *data() const { return data_.data(); }
  std::span<double> span() { return data_; }
  std::span<const double> span() const { return data_; }
  std::vector<double> &vec() { return data_; }
  const std::vector<double> &vec() const { return data_; }

  double &operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double &at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  double at4(std::size_t n, std::size_t c, std::size_t h,
             std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  /// Same data, new shape; element counts must agree.
  Tensor reshaped(Shape s) const;
  /// Items [begin, end) along the leading axis.
  Tensor slice0(std::size_t begin, std::size_t end) const;

  void fill(double v);
  Tensor &operator+=(const Tensor &o);
  Tensor &operator*=(double s);

  double sum() const;
  double max_abs() const;
  double l2_norm() const;
  bool all_finite() const;

  bool same_shape(const Tensor &o) const { return shape_ == o.shape_; }
  bool operator==(const Tensor &o) const {
    return shape_ == o.shape_ && data_ == o.data_;
  }

private:
  Shape shape_;
  std::vector<double> data_;
};

/// Concatenate tensors along the leading axis; trailing shapes must match.
Tensor concat0(std::span<const Tensor> parts);

void require(bool cond, const std::string &msg);
void require_same_shape(const Tensor &a, const Tensor &b, const char *what);

/// FNV-1a over the raw bytes of the tensor contents.
std::uint64_t checksum(const Tensor &t);
std::uint64_t fnv1a(const void *data, std::size_t len,
                    std::uint64_t seed = 1469598103934665603ULL);
std::string hex64(std::uint64_t v);

} // namespace dfkd

#endif // DFKD_TENSOR_HPP_
