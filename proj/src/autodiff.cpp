#include "glmask/autodiff.hpp"

#include <cmath>
#include <stdexcept>

namespace glmask {

void ParameterSet::set(const std::string& name, Tensor value) {
  params_.insert_or_assign(name, std::move(value));
}

const Tensor& ParameterSet::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParameterSet::num_values() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.size();
  return n;
}

Layout ParameterSet::layout() const {
  Layout out;
  out.reserve(params_.size());
  for (const auto& [name, t] : params_) out.emplace_back(name, t.shape());
  return out;
}

std::vector<Tensor> ParameterSet::tensors() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& [_, t] : params_) out.push_back(t);
  return out;
}

ParameterSet ParameterSet::watch(Tape& tape) const {
  ParameterSet out;
  for (const auto& [name, t] : params_) out.set(name, tape.watch(t));
  return out;
}

std::vector<double> ParameterSet::flatten() const {
  std::vector<double> out;
  out.reserve(num_values());
  for (const auto& [_, t] : params_) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

void ParameterSet::unflatten(std::span<const double> values) {
  if (values.size() != num_values())
    throw std::invalid_argument("unflatten: expected " + std::to_string(num_values()) +
                                " values, got " + std::to_string(values.size()));
  std::size_t offset = 0;
  for (auto& [_, t] : params_) {
    const std::size_t n = t.size();
    t = Tensor(t.shape(), std::vector<double>(values.begin() + static_cast<long>(offset),
                                              values.begin() + static_cast<long>(offset + n)));
    offset += n;
  }
}

bool ParameterSet::operator==(const ParameterSet& other) const {
  if (layout() != other.layout()) return false;
  auto it = other.params_.begin();
  for (const auto& [_, t] : params_) {
    const auto a = t.data();
    const auto b = (it++)->second.data();
    if (!std::equal(a.begin(), a.end(), b.begin())) return false;
  }
  return true;
}

FlatGradient FlatGradient::zeros(const Layout& layout) {
  std::size_t n = 0;
  for (const auto& [_, s] : layout) n += shape_size(s);
  return FlatGradient{std::vector<double>(n, 0.0), layout};
}

FlatGradient FlatGradient::from_tensors(const Layout& layout, const std::vector<Tensor>& grads) {
  if (grads.size() != layout.size())
    throw std::invalid_argument("FlatGradient: tensor count does not match layout");
  FlatGradient g;
  g.layout = layout;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].shape() != layout[i].second)
      throw ShapeError("FlatGradient: gradient of '" + layout[i].first + "' has shape " +
                       shape_str(grads[i].shape()) + ", expected " +
                       shape_str(layout[i].second));
    g.values.insert(g.values.end(), grads[i].data().begin(), grads[i].data().end());
  }
  return g;
}

double FlatGradient::norm() const { return std::sqrt(dot(*this, *this)); }

std::span<const double> FlatGradient::span_of(const std::string& name) const {
  std::size_t offset = 0;
  for (const auto& [n, s] : layout) {
    if (n == name) return std::span<const double>(values).subspan(offset, shape_size(s));
    offset += shape_size(s);
  }
  throw std::out_of_range("FlatGradient has no entry '" + name + "'");
}

std::vector<Tensor> FlatGradient::tensors() const {
  std::vector<Tensor> out;
  std::size_t offset = 0;
  for (const auto& [_, s] : layout) {
    const std::size_t n = shape_size(s);
    out.emplace_back(s, std::vector<double>(values.begin() + static_cast<long>(offset),
                                            values.begin() + static_cast<long>(offset + n)));
    offset += n;
  }
  return out;
}

double dot(const FlatGradient& a, const FlatGradient& b) {
  if (a.layout != b.layout) throw std::invalid_argument("dot: gradient layouts differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) s += a.values[i] * b.values[i];
  return s;
}

FlatGradient backward(const Tensor& loss, const ParameterSet& params) {
  if (loss.size() != 1)
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  const auto wrt = params.tensors();
  if (!loss.tape()) return FlatGradient::zeros(params.layout());
  return FlatGradient::from_tensors(params.layout(), loss.tape()->gradient(loss, wrt));
}

Tensor grad_dot_per_weight(const Tensor& per_unit_losses, const Tensor& weights,
                           const ParameterSet& params, const FlatGradient& direction) {
  if (per_unit_losses.shape() != weights.shape())
    throw ShapeError("grad_dot_per_weight: losses " + shape_str(per_unit_losses.shape()) +
                     " and weights " + shape_str(weights.shape()) + " differ in shape");
  Tape* tape = weights.tape();
  if (!tape || !tape->is_leaf(weights))
    throw std::invalid_argument("grad_dot_per_weight: weights must be a leaf on the loss tape");
  if (per_unit_losses.tape() && per_unit_losses.tape() != tape)
    throw std::invalid_argument("grad_dot_per_weight: losses and weights are on different tapes");
  for (double w : weights.data())
    if (w != 1.0) throw std::invalid_argument("grad_dot_per_weight: weights must all equal 1");
  if (per_unit_losses.tape() && tape->depends_on(per_unit_losses, weights))
    throw std::invalid_argument("grad_dot_per_weight: losses depend on the weights");
  if (direction.layout != params.layout())
    throw std::invalid_argument("grad_dot_per_weight: direction layout does not match parameters");

  const auto wrt = params.tensors();
  for (const auto& p : wrt)
    if (p.tape() != tape)
      throw std::invalid_argument("grad_dot_per_weight: parameters are not watched on the loss tape");

  const Tensor weighted = sum_all(mul(weights, per_unit_losses));
  const std::vector<Tensor> grads = tape->gradient(weighted, wrt, nullptr, /*create_graph=*/true);

  const std::vector<Tensor> dir = direction.tensors();
  Tensor projection;
  bool first = true;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const Tensor term = sum_all(mul(grads[i], dir[i]));
    projection = first ? term : add(projection, term);
    first = false;
  }
  if (first || !projection.tape()) return Tensor::zeros(weights.shape());
  const Tensor z = weights;
  return tape->gradient(projection, std::span<const Tensor>(&z, 1))[0].detach();
}

}  // namespace glmask
