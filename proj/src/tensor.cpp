#include "wayrvs/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace wayrvs {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

namespace {

void check_extents(const Shape& shape) {
  for (std::size_t extent : shape) {
    if (extent == 0) {
      throw ShapeError("tensor: zero extent in shape " + shape_str(shape));
    }
  }
}

}  // namespace

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
  check_extents(shape_);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  check_extents(shape_);
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeError("tensor: " + std::to_string(data_.size()) +
                     " values do not fill shape " + shape_str(shape_));
  }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{1}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor(Shape{n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::vector<double> values) {
  return Tensor(Shape{rows, cols}, std::move(values));
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ShapeError("item: tensor of shape " + shape_str(shape_) +
                     " is not a scalar");
  }
  return data_[0];
}

std::span<double> Tensor::grad() {
  if (!grad_) throw std::logic_error("tensor has no gradient buffer");
  return *grad_;
}

std::span<const double> Tensor::grad() const {
  if (!grad_) throw std::logic_error("tensor has no gradient buffer");
  return *grad_;
}

void Tensor::zero_grad() {
  if (!grad_) {
    grad_.emplace(data_.size(), 0.0);
  } else {
    std::fill(grad_->begin(), grad_->end(), 0.0);
  }
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

Tensor Tensor::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

}  // namespace wayrvs
