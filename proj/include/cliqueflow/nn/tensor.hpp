#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace cliqueflow::nn {

using Shape = std::vector<std::size_t>;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
// Vectorized Eigen reductions peel leading elements up to the first aligned
// address, so buffer alignment must not depend on where malloc lands.
using Storage = std::vector<double, Eigen::aligned_allocator<double>>;

std::string shape_string(const Shape& shape);

// Dense row-major array of doubles. Operations treat a tensor as a matrix of
// rows() x cols(), where cols() is the last dimension.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }
  static Tensor row(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({1, n}, std::move(values));
  }
  static Tensor scalar(double v) { return Tensor({1, 1}, std::vector<double>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t rows() const noexcept;
  std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }
  bool empty() const noexcept { return data_.empty(); }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  MatrixMap matrix() {
    return MatrixMap(data_.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols()));
  }
  ConstMatrixMap matrix() const {
    return ConstMatrixMap(data_.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols()));
  }

  Tensor reshaped(Shape shape) const;
  void fill(double v);
  double item() const;

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  Storage data_;
};

}  // namespace cliqueflow::nn
