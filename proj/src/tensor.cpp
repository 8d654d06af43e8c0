#include "flowseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "flowseg/errors.hpp"

namespace flowseg {

Tensor::Tensor(std::size_t rows, std::size_t cols, double fill)
    : shape_{rows, cols}, data_(rows * cols, fill), rows_(rows), cols_(cols) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  const std::size_t n = std::accumulate(shape_.begin(), shape_.end(), std::size_t{1},
                                        std::multiplies<>());
  if (n != data_.size()) {
    throw ShapeError("tensor shape product " + std::to_string(n) + " != data length " +
                     std::to_string(data_.size()));
  }
  cache_view();
}

void Tensor::cache_view() noexcept {
  if (shape_.empty()) {
    rows_ = cols_ = 0;
  } else if (shape_.size() == 1) {
    rows_ = 1;
    cols_ = shape_[0];
  } else {
    rows_ = shape_[0];
    cols_ = shape_[0] ? data_.size() / shape_[0] : 0;
  }
}

Tensor Tensor::zeros_like(const Tensor& other) {
  Tensor t;
  t.shape_ = other.shape_;
  t.data_.assign(other.data_.size(), 0.0);
  t.rows_ = other.rows_;
  t.cols_ = other.cols_;
  return t;
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor& Tensor::operator+=(const Tensor& other) {
  if (other.data_.size() != data_.size()) throw ShapeError("tensor += size mismatch");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeError("max_abs_diff size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace flowseg
