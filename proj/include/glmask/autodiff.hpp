#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "glmask/ops.hpp"
#include "glmask/tape.hpp"
#include "glmask/tensor.hpp"

namespace glmask {

using Layout = std::vector<std::pair<std::string, Shape>>;

/// Named model parameters. Iteration (and therefore flattening) order is
/// lexicographic by name.
class ParameterSet {
 public:
  void set(const std::string& name, Tensor value);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  std::size_t size() const { return params_.size(); }
  std::size_t num_values() const;

  Layout layout() const;
  std::vector<Tensor> tensors() const;

  /// Copy whose tensors are leaves on `tape`.
  [[nodiscard]] ParameterSet watch(Tape& tape) const;

  /// Concatenated values in layout order.
  std::vector<double> flatten() const;
  /// Replaces all values from a flat vector in layout order.
  void unflatten(std::span<const double> values);

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  bool operator==(const ParameterSet& other) const;

 private:
  std::map<std::string, Tensor> params_;
};

/// Parameter gradient flattened in a fixed layout.
struct FlatGradient {
  std::vector<double> values;
  Layout layout;

  static FlatGradient zeros(const Layout& layout);
  static FlatGradient from_tensors(const Layout& layout, const std::vector<Tensor>& grads);

  double norm() const;
  /// Slice of `values` belonging to the named parameter.
  std::span<const double> span_of(const std::string& name) const;
  /// Per-parameter tensors, in layout order.
  std::vector<Tensor> tensors() const;
};

double dot(const FlatGradient& a, const FlatGradient& b);

/// Exact reverse-mode gradient of a scalar loss with respect to the
/// tape-bound `params`. Parameters that the loss does not reach get zeros.
FlatGradient backward(const Tensor& loss, const ParameterSet& params);

/// Per-unit gradient dot products through dummy weights.
///
/// Builds L(z) = sum_i z_i * losses_i with `weights` = z (a leaf holding
/// ones, same shape as `per_unit_losses`), then differentiates
/// grad_theta L(z) . direction with respect to z. Because L is linear in z,
/// entry i of the result is exactly grad_theta(losses_i) . direction.
///
/// Cost is two reverse sweeps on the tape regardless of the number of units:
/// one that records the parameter gradient, one back through it to z.
Tensor grad_dot_per_weight(const Tensor& per_unit_losses, const Tensor& weights,
                           const ParameterSet& params, const FlatGradient& direction);

}  // namespace glmask
