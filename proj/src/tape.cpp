#include "glmask/tape.hpp"

#include <optional>
#include <stdexcept>

#include "glmask/ops.hpp"

namespace glmask {

std::atomic<std::size_t> Tape::global_backward_passes_{0};

std::size_t Tape::total_backward_passes() { return global_backward_passes_.load(); }

Tensor Tape::bound(int id) const {
  Tensor t = nodes_[static_cast<std::size_t>(id)].value;
  t.tape_ = const_cast<Tape*>(this);
  t.node_ = id;
  return t;
}

void Tape::check_owned(const Tensor& t, const char* what) const {
  if (t.tape_ != this || t.node_ < 0 || static_cast<std::size_t>(t.node_) >= nodes_.size())
    throw std::invalid_argument(std::string(what) + " is not recorded on this tape");
}

Tensor Tape::watch(const Tensor& value) {
  nodes_.push_back(Node{{}, {}, value.detach()});
  return bound(static_cast<int>(nodes_.size() - 1));
}

Tensor Tape::record(const Tensor& value, std::vector<Tensor> inputs, BackwardFn fn) {
  nodes_.push_back(Node{std::move(inputs), std::move(fn), value.detach()});
  return bound(static_cast<int>(nodes_.size() - 1));
}

bool Tape::is_leaf(const Tensor& t) const {
  return t.tape_ == this && t.node_ >= 0 && !nodes_[static_cast<std::size_t>(t.node_)].fn;
}

bool Tape::depends_on(const Tensor& output, const Tensor& leaf) const {
  if (output.tape_ != this || leaf.tape_ != this) return false;
  const auto last = static_cast<std::size_t>(output.node_);
  const auto first = static_cast<std::size_t>(leaf.node_);
  if (first > last) return false;
  std::vector<char> reach(last + 1, 0);
  reach[first] = 1;
  for (std::size_t i = first + 1; i <= last; ++i)
    for (const auto& in : nodes_[i].inputs)
      if (in.tape_ == this && reach[static_cast<std::size_t>(in.node_)]) {
        reach[i] = 1;
        break;
      }
  return reach[last] != 0;
}

std::vector<Tensor> Tape::gradient(const Tensor& output, std::span<const Tensor> wrt,
                                   const Tensor* seed, bool create_graph) {
  check_owned(output, "gradient output");
  for (const auto& w : wrt) check_owned(w, "gradient target");

  Tensor start;
  if (seed) {
    if (seed->shape() != output.shape())
      throw ShapeError("gradient seed shape " + shape_str(seed->shape()) +
                       " does not match output shape " + shape_str(output.shape()));
    start = *seed;
  } else {
    if (output.size() != 1)
      throw ShapeError("gradient of non-scalar output " + shape_str(output.shape()) +
                       " needs an explicit seed");
    start = Tensor::full(output.shape(), 1.0);
  }

  const auto last = static_cast<std::size_t>(output.node_);
  // Only nodes that depend on a requested leaf take part in the sweep.
  std::vector<char> live(last + 1, 0);
  std::vector<char> target(last + 1, 0);
  for (const auto& w : wrt)
    if (static_cast<std::size_t>(w.node_) <= last)
      live[static_cast<std::size_t>(w.node_)] = target[static_cast<std::size_t>(w.node_)] = 1;
  for (std::size_t i = 0; i <= last; ++i) {
    if (live[i]) continue;
    for (const auto& in : nodes_[i].inputs)
      if (in.tape_ == this && live[static_cast<std::size_t>(in.node_)]) {
        live[i] = 1;
        break;
      }
  }

  std::vector<std::optional<Tensor>> adjoint(last + 1);
  if (live[last]) adjoint[last] = create_graph ? start : start.detach();

  for (std::size_t i = last + 1; i-- > 0;) {
    if (!live[i] || !adjoint[i]) continue;
    // Copy out: with create_graph the rule appends to nodes_.
    const BackwardFn fn = nodes_[i].fn;
    if (!fn) continue;
    std::vector<Tensor> inputs = nodes_[i].inputs;
    Tensor out;
    if (create_graph) {
      out = bound(static_cast<int>(i));
    } else {
      for (auto& in : inputs) in = in.detach();
      out = nodes_[i].value;
    }
    const Tensor grad = *adjoint[i];
    if (!create_graph && !target[i]) adjoint[i].reset();

    std::vector<char> needs(inputs.size(), 0);
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      const Tensor& in = nodes_[i].inputs[k];
      needs[k] = in.tape_ == this && live[static_cast<std::size_t>(in.node_)];
    }

    std::vector<Tensor> grads = fn(grad, inputs, out, needs);
    if (grads.size() != inputs.size())
      throw std::logic_error("backward rule returned wrong number of adjoints");
    for (std::size_t k = 0; k < grads.size(); ++k) {
      const Tensor& in = nodes_[i].inputs[k];
      if (!needs[k]) continue;
      if (grads[k].shape() != in.shape())
        throw std::logic_error("backward rule produced adjoint of shape " +
                               shape_str(grads[k].shape()) + " for input " + shape_str(in.shape()));
      auto& slot = adjoint[static_cast<std::size_t>(in.node_)];
      slot = slot ? add(*slot, grads[k]) : grads[k];
    }
  }

  ++backward_passes_;
  ++global_backward_passes_;

  std::vector<Tensor> result;
  result.reserve(wrt.size());
  for (const auto& w : wrt) {
    const auto id = static_cast<std::size_t>(w.node_);
    if (id <= last && adjoint[id])
      result.push_back(create_graph ? *adjoint[id] : adjoint[id]->detach());
    else
      result.push_back(Tensor::zeros(w.shape()));
  }
  return result;
}

}  // namespace glmask
