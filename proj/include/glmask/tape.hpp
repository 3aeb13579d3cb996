#pragma once

#include <atomic>
#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "glmask/tensor.hpp"

namespace glmask {

/// Backward rule of a recorded op. Receives the adjoint of the output, the
/// op inputs, the op output and a flag per input saying whether its adjoint
/// is wanted. Returns one adjoint per input; unwanted slots may hold any
/// placeholder.
///
/// Rules are written with the same differentiable ops as the forward pass.
/// When a sweep runs with create_graph, the tensors passed in are tape-bound,
/// so the adjoints themselves are recorded and can be differentiated again.
using BackwardFn = std::function<std::vector<Tensor>(
    const Tensor& grad, std::span<const Tensor> inputs, const Tensor& output,
    std::span<const char> needs)>;

/// Append-only computation record. Node ids are assigned in creation order,
/// so the record is always topologically ordered.
///
/// A tape is single-threaded; independent tapes can live on different
/// threads.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers `value` as a differentiable leaf.
  Tensor watch(const Tensor& value);

  /// Used by ops. `value` must be detached; `inputs` may mix bound and plain
  /// tensors, only bound ones (on this tape) take part in differentiation.
  Tensor record(const Tensor& value, std::vector<Tensor> inputs, BackwardFn fn);

  /// Reverse sweep from `output` to each tensor in `wrt`.
  ///
  /// `seed` defaults to ones and is then only allowed for single-element
  /// outputs. Leaves that `output` does not depend on get zero adjoints.
  /// With `create_graph` the returned adjoints are bound to this tape.
  std::vector<Tensor> gradient(const Tensor& output, std::span<const Tensor> wrt,
                               const Tensor* seed = nullptr, bool create_graph = false);

  bool is_leaf(const Tensor& t) const;
  bool depends_on(const Tensor& output, const Tensor& leaf) const;

  std::size_t num_nodes() const { return nodes_.size(); }
  std::size_t backward_passes() const { return backward_passes_; }

  /// Number of reverse sweeps run by any tape in this process.
  static std::size_t total_backward_passes();

 private:
  struct Node {
    std::vector<Tensor> inputs;
    BackwardFn fn;  // empty for leaves
    Tensor value;   // detached output
  };

  Tensor bound(int id) const;
  void check_owned(const Tensor& t, const char* what) const;

  std::deque<Node> nodes_;
  std::size_t backward_passes_ = 0;
  static std::atomic<std::size_t> global_backward_passes_;
};

}  // namespace glmask
