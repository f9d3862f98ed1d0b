#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace losa {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

class DimensionError : public std::invalid_argument {
 public:
  DimensionError(const std::string& what, Shape lhs, Shape rhs)
      : std::invalid_argument(what + ": " + to_string(lhs) + " vs " + to_string(rhs)),
        lhs_(std::move(lhs)),
        rhs_(std::move(rhs)) {}

  const Shape& lhs() const { return lhs_; }
  const Shape& rhs() const { return rhs_; }

 private:
  Shape lhs_;
  Shape rhs_;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major tensor. Value semantics; the element buffer is owned.
template <typename Scalar>
class Tensor {
 public:
  using MatrixMap = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstMatrixMap =
      Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(numel(shape_), Scalar(0)) {}

  Tensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != numel(shape_)) {
      throw DimensionError("element count does not match shape", shape_, Shape{data_.size()});
    }
  }

  Tensor(Shape shape, std::initializer_list<Scalar> data)
      : Tensor(std::move(shape), std::vector<Scalar>(data)) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = Scalar(1);
    return t;
  }

  static Tensor scalar(Scalar value) { return Tensor(Shape{}, {value}); }

  /// Normal(0, stddev) resampled into [-2 stddev, 2 stddev].
  template <typename Rng>
  static Tensor truncated_normal(Shape shape, Scalar stddev, Rng& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : t.data_) {
      double x = dist(rng);
      while (std::abs(x) > 2.0) x = dist(rng);
      v = static_cast<Scalar>(x * static_cast<double>(stddev));
    }
    return t;
  }

  template <typename Rng>
  static Tensor normal(Shape shape, Scalar stddev, Rng& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : t.data_) v = static_cast<Scalar>(dist(rng) * static_cast<double>(stddev));
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  const std::vector<Scalar>& data() const { return data_; }
  std::vector<Scalar>& data() { return data_; }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  const Scalar& operator[](std::size_t i) const { return data_[i]; }

  Scalar& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const Scalar& at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  Scalar item() const {
    if (data_.size() != 1) throw DimensionError("item() needs a single element", shape_, Shape{});
    return data_[0];
  }

  /// View as rows x cols with the last axis as columns.
  ConstMatrixMap matrix() const {
    return ConstMatrixMap(data_.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols()));
  }
  MatrixMap matrix() {
    return MatrixMap(data_.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols()));
  }

  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : data_.size() / cols(); }

  bool all_finite() const {
    for (const auto& v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  std::size_t bytes() const { return data_.size() * sizeof(Scalar); }

  template <typename Other>
  Tensor<Other> cast() const {
    std::vector<Other> out(data_.begin(), data_.end());
    return Tensor<Other>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<Scalar> data_;
};

template <typename Scalar>
Scalar max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) throw DimensionError("max_abs_diff", a.shape(), b.shape());
  Scalar m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<Scalar>(std::abs(a[i] - b[i])));
  return m;
}

}  // namespace losa
