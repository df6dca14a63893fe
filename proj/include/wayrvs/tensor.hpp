#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace wayrvs {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Raised when operand shapes do not conform; the message names the op and
// both shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised when a forward or backward pass produces NaN or Inf.
class NumericFault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dense row-major array of doubles. The last axis is the "column" axis for
// every op; all leading axes are flattened into rows.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t numel() const noexcept { return data_.size(); }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t row, std::size_t col) { return data_[row * cols() + col]; }
  double at(std::size_t row, std::size_t col) const { return data_[row * cols() + col]; }
  // Value of a single-element tensor.
  double item() const;

  bool requires_grad() const noexcept { return requires_grad_; }
  void set_requires_grad(bool flag) noexcept { requires_grad_ = flag; }
  bool has_grad() const noexcept { return grad_.has_value(); }
  std::span<double> grad();
  std::span<const double> grad() const;
  // Allocates (if needed) and zeroes the gradient buffer.
  void zero_grad();
  void clear_grad() noexcept { grad_.reset(); }

  bool all_finite() const noexcept;
  Tensor reshaped(Shape shape) const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
  std::optional<std::vector<double>> grad_;
};

// A trainable tensor together with the name used in checkpoints and error
// messages.
struct NamedParam {
  std::string name;
  Tensor* tensor = nullptr;
};

}  // namespace wayrvs
