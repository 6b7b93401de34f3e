// SPDX-License-Identifier: Apache-2.0
#include "tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace dfkd {

std::string shape_str(const Shape &s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i)
      os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape &s) {
  std::size_t n = 1;
  for (auto d : s)
    n *= d;
  return n;
}

void require(bool cond, const std::string &msg) {
  if (!cond)
    throw ContractError(msg);
}

void require_same_shape(const Tensor &a, const Tensor &b, const char *what) {
  if (!a.same_shape(b))
    throw ContractError(std::string(what) + ": shape mismatch " +
                        shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  require(data_.size() == shape_numel(shape_),
          "Tensor: data size does not match shape " + shape_str(shape_));
}

Tensor Tensor::reshaped(Shape s) const {
  require(shape_numel(s) == numel(), "reshape: " + shape_str(shape_) +
                                         " -> " + shape_str(s));
  return Tensor(std::move(s), data_);
}

Tensor Tensor::slice0(std::size_t begin, std::size_t end) const {
  require(!shape_.empty() && begin <= end && end <= shape_[0],
          "slice0: range out of bounds");
  Shape s = shape_;
  s[0] = end - begin;
  const std::size_t inner = shape_[0] ? numel() / shape_[0] : 0;
  return Tensor(s, std::vector<double>(data_.begin() + begin * inner,
                                       data_.begin() + end * inner));
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor &Tensor::operator+=(const Tensor &o) {
  require_same_shape(*this, o, "Tensor::operator+=");
  for (std::size_t i = 0; i < data_.size(); ++i)
    data_[i] += o.data_[i];
  return *this;
}

Tensor &Tensor::operator*=(double s) {
  for (auto &v : data_)
    v *= s;
  return *this;
}

double Tensor::sum() const {
  double s = 0.0;
  for (double v : data_)
    s += v;
  return s;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_)
    m = std::max(m, std::fabs(v));
  return m;
}

double Tensor::l2_norm() const {
  double s = 0.0;
  for (double v : data_)
    s += v * v;
  return std::sqrt(s);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

Tensor concat0(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat0: no parts");
  Shape s = parts[0].shape();
  std::size_t lead = 0;
  for (const auto &p : parts) {
    require(p.rank() == s.size() &&
                std::equal(p.shape().begin() + 1, p.shape().end(),
                           s.begin() + 1),
            "concat0: trailing shapes differ");
    lead += p.dim(0);
  }
  s[0] = lead;
  std::vector<double> data;
  data.reserve(shape_numel(s));
  for (const auto &p : parts)
    data.insert(data.end(), p.vec().begin(), p.vec().end());
  return Tensor(s, std::move(data));
}

std::uint64_t fnv1a(const void *data, std::size_t len, std::uint64_t seed) {
  const auto *p = static_cast<const unsigned char *>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t checksum(const Tensor &t) {
  std::uint64_t h = fnv1a(t.shape().data(), t.shape().size() * sizeof(std::size_t));
  return fnv1a(t.data(), t.numel() * sizeof(double), h);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

} // namespace dfkd
