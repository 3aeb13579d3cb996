#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "glmask/rng.hpp"
#include "glmask/tensor.hpp"

// Differentiable primitives. Each op records itself on the tape of its bound
// inputs (if any); backward rules are expressed with these same ops, which
// is what makes a gradient differentiable a second time.
//
// Every op checks its output for NaN/Inf and throws NumericError instead of
// letting a non-finite value reach a gradient sign.
namespace glmask {

// Elementwise with numpy-style (right-aligned) broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor pow_scalar(const Tensor& x, double p);
Tensor relu(const Tensor& x);

// Reductions and their broadcast duals.
Tensor sum_all(const Tensor& x);
Tensor sum_last(const Tensor& x);  // keeps a trailing extent of 1
Tensor sum_to(const Tensor& x, const Shape& shape);
Tensor broadcast_to(const Tensor& x, const Shape& shape);

// a[..., k] x b[k, n] -> [..., n]
Tensor matmul(const Tensor& a, const Tensor& b);
// a[t, m, k] x b[t, k, n] -> [t, m, n]
Tensor bmm(const Tensor& a, const Tensor& b);
Tensor transpose_last2(const Tensor& x);
Tensor reshape(const Tensor& x, const Shape& shape);
// [a, b, c, d] -> [a, c, b, d]
Tensor permute_0213(const Tensor& x);

Tensor softmax_last(const Tensor& x);
Tensor log_softmax_last(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-6);

// table[V, d] indexed by `ids` laid out as `index_shape` -> index_shape + [d]
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids, const Shape& index_shape);
// src[N, d] summed into `rows` rows at `ids` -> [rows, d]
Tensor scatter_add_rows(const Tensor& src, std::span<const std::size_t> ids, std::size_t rows);
// x[..., V] -> [...], picking x[..., idx] per leading position
Tensor pick_last(const Tensor& x, std::span<const std::size_t> idx);
// x[...] -> [..., V], zeros except x at position idx
Tensor scatter_last(const Tensor& x, std::span<const std::size_t> idx, std::size_t width);

/// Inverted dropout. The keep-mask is drawn from `rng` and treated as a
/// constant by differentiation.
Tensor dropout(const Tensor& x, double rate, Rng& rng);

/// Label-smoothed cross-entropy per leading position of `logits` [..., V].
/// The smoothed target puts 1 - eps + eps/V on the label and eps/V elsewhere.
Tensor cross_entropy_smoothed(const Tensor& logits, std::span<const std::size_t> targets,
                              double eps);

/// Entropy of the smoothed target distribution; the minimum attainable
/// value of cross_entropy_smoothed.
double smoothed_target_entropy(std::size_t vocab, double eps);

}  // namespace glmask
