#include "glmask/tensor.hpp"

#include <sstream>

namespace glmask {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor() : storage_(std::make_shared<const std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  for (auto e : shape_)
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape_));
  if (shape_size(shape_) != data.size())
    throw ShapeError("tensor of shape " + shape_str(shape_) + " cannot hold " +
                     std::to_string(data.size()) + " values");
  storage_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::zeros(const Shape& shape) { return full(shape, 0.0); }

Tensor Tensor::full(const Shape& shape, double value) {
  return Tensor(shape, std::vector<double>(shape_size(shape), value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return (*storage_)[0];
}

Tensor Tensor::detach() const {
  Tensor t;
  t.storage_ = storage_;
  t.shape_ = shape_;
  return t;
}

}  // namespace glmask
