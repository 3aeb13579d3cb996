#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace glmask {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a forward primitive produces NaN or Inf from finite inputs.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tape;

/// Immutable n-dimensional array of doubles, optionally bound to a Tape node.
///
/// A tensor with no tape is a plain value. Ops on tape-bound inputs record
/// their result on that tape so it can be differentiated later. The storage
/// is shared between copies, so copying a Tensor is cheap.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor scalar(double value);

  const Shape& shape() const { return shape_; }
  std::size_t dim() const { return shape_.size(); }
  std::size_t size() const { return storage_->size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  std::span<const double> data() const { return *storage_; }
  double operator[](std::size_t i) const { return (*storage_)[i]; }
  double item() const;

  bool requires_grad() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }

  /// Same values, no graph binding.
  Tensor detach() const;

 private:
  friend class Tape;

  std::shared_ptr<const std::vector<double>> storage_;
  Shape shape_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

}  // namespace glmask
