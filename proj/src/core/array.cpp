#include "svqa/core/array.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace svqa {

std::int64_t shape_size(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Array::Array(Shape shape, double fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_size(shape_)), fill) {}

Array::Array(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
  if (static_cast<std::int64_t>(data_.size()) != shape_size(shape_)) {
    throw ShapeError("array of " + std::to_string(data_.size()) + " values cannot have shape " +
                     shape_str(shape_));
  }
}

std::int64_t Array::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
  }
  return shape_[static_cast<std::size_t>(axis)];
}

double Array::item() const {
  if (data_.size() != 1) throw ShapeError("item() on array of shape " + shape_str(shape_));
  return data_[0];
}

Array Array::reshaped(Shape shape) const& {
  Array out = *this;
  return std::move(out).reshaped(std::move(shape));
}

Array Array::reshaped(Shape shape) && {
  if (shape_size(shape) != static_cast<std::int64_t>(data_.size())) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  shape_ = std::move(shape);
  return std::move(*this);
}

void Array::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Array::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Array stack(std::span<const Array* const> items) {
  if (items.empty()) throw ShapeError("stack of zero arrays");
  Shape shape = items[0]->shape();
  shape.insert(shape.begin(), static_cast<std::int64_t>(items.size()));
  Array out(shape);
  const std::size_t n = items[0]->size();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i]->shape() != items[0]->shape()) {
      throw ShapeError("stack: " + shape_str(items[i]->shape()) + " differs from " + shape_str(items[0]->shape()));
    }
    std::copy_n(items[i]->data(), n, out.data() + i * n);
  }
  return out;
}

}  // namespace svqa
