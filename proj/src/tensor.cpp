#include "compostruct/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace compostruct {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace {
void validate_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor: empty shape");
  for (auto d : shape)
    if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_to_string(shape));
}
}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  validate_shape(shape_);
  values_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  validate_shape(shape_);
  if (values_.size() != shape_numel(shape_))
    throw ShapeError("tensor: " + std::to_string(values_.size()) + " values for shape " +
                     shape_to_string(shape_));
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw ShapeError("tensor: rows() on rank-" + std::to_string(rank()) + " tensor");
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw ShapeError("tensor: cols() on rank-" + std::to_string(rank()) + " tensor");
  return shape_[1];
}

std::span<double> Tensor::grad() {
  if (grad_.empty()) grad_.assign(values_.size(), 0.0);
  return grad_;
}

void Tensor::zero_grad() {
  if (grad_.empty())
    grad_.assign(values_.size(), 0.0);
  else
    std::fill(grad_.begin(), grad_.end(), 0.0);
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != values_.size())
    throw ShapeError("reshape: cannot view " + shape_to_string(shape_) + " as " + shape_to_string(shape));
  return Tensor(std::move(shape), values_);
}

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::check_finite(const std::string& where) const {
  if (!all_finite()) throw NonFiniteError("non-finite value produced by " + where);
}

}  // namespace compostruct
