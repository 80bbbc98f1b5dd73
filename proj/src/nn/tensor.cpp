#include "cliqueflow/nn/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>

#include "cliqueflow/error.hpp"

namespace cliqueflow::nn {

std::string shape_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

namespace {
std::size_t product(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}
}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(product(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(values.begin(), values.end()) {
  if (data_.size() != product(shape_))
    throw DimensionError("tensor of shape " + shape_string(shape_) + " cannot hold " +
                         std::to_string(data_.size()) + " values");
}

std::size_t Tensor::rows() const noexcept {
  if (shape_.empty()) return 0;
  std::size_t r = 1;
  for (std::size_t i = 0; i + 1 < shape_.size(); ++i) r *= shape_[i];
  return r;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (product(shape) != data_.size())
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

double Tensor::item() const {
  if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

}  // namespace cliqueflow::nn
