#include "glmask/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>

#include "glmask/kernels.hpp"
#include "glmask/tape.hpp"

namespace glmask {

namespace {

using Ids = std::shared_ptr<const std::vector<std::size_t>>;

Ids share(std::span<const std::size_t> ids) {
  return std::make_shared<const std::vector<std::size_t>>(ids.begin(), ids.end());
}

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

Tensor finish(const char* op, Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
              BackwardFn fn) {
  for (double v : data)
    if (!std::isfinite(v))
      throw NumericError(std::string(op) + ": non-finite value in output of shape " +
                         shape_str(shape));
  Tensor value(std::move(shape), std::move(data));
  Tape* tape = nullptr;
  for (const auto& in : inputs) {
    if (!in.tape()) continue;
    if (tape && tape != in.tape())
      throw std::invalid_argument(std::string(op) + ": inputs are recorded on different tapes");
    tape = in.tape();
  }
  if (!tape) return value;
  return tape->record(value, std::move(inputs), std::move(fn));
}

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1)
      shape_fail(op, "cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Maps a flat index of `out` to the flat index of `in` broadcast into it.
class BroadcastIndex {
 public:
  BroadcastIndex(const Shape& in, const Shape& out) {
    const std::size_t n = shape_size(out);
    in_size_ = shape_size(in);
    if (in_size_ == n) {
      mode_ = Mode::kIdentity;
      return;
    }
    if (in_size_ == 1) {
      mode_ = Mode::kZero;
      return;
    }
    const std::size_t rank = out.size();
    Shape aligned(rank, 1);
    std::copy(in.begin(), in.end(), aligned.begin() + static_cast<long>(rank - in.size()));
    // Suffix match: in = [1, .., 1, out_k, .., out_r]
    std::size_t first = 0;
    while (first < rank && aligned[first] == 1) ++first;
    if (std::equal(aligned.begin() + static_cast<long>(first), aligned.end(),
                   out.begin() + static_cast<long>(first))) {
      mode_ = Mode::kCycle;
      return;
    }
    // Prefix match: in = [out_0, .., out_k, 1, .., 1]
    std::size_t stop = rank;
    while (stop > 0 && aligned[stop - 1] == 1) --stop;
    if (std::equal(aligned.begin(), aligned.begin() + static_cast<long>(stop), out.begin())) {
      mode_ = Mode::kRepeat;
      repeat_ = n / in_size_;
      return;
    }
    mode_ = Mode::kTable;
    table_.resize(n);
    std::vector<std::size_t> stride(rank, 0);
    std::size_t s = 1;
    for (std::size_t i = rank; i-- > 0;) {
      stride[i] = aligned[i] == 1 ? 0 : s;
      s *= aligned[i];
    }
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t flat = 0; flat < n; ++flat) {
      std::size_t off = 0;
      for (std::size_t d = 0; d < rank; ++d) off += idx[d] * stride[d];
      table_[flat] = off;
      for (std::size_t d = rank; d-- > 0;) {
        if (++idx[d] < out[d]) break;
        idx[d] = 0;
      }
    }
  }

  std::size_t operator()(std::size_t i) const {
    switch (mode_) {
      case Mode::kIdentity: return i;
      case Mode::kZero: return 0;
      case Mode::kCycle: return i % in_size_;
      case Mode::kRepeat: return i / repeat_;
      case Mode::kTable: return table_[i];
    }
    return 0;
  }

 private:
  enum class Mode { kIdentity, kZero, kCycle, kRepeat, kTable };
  Mode mode_ = Mode::kIdentity;
  std::size_t in_size_ = 1;
  std::size_t repeat_ = 1;
  std::vector<std::size_t> table_;
};

template <class F>
std::pair<Shape, std::vector<double>> binary_kernel(const char* op, const Tensor& a,
                                                    const Tensor& b, F f) {
  Shape out = a.shape() == b.shape() ? a.shape() : broadcast_shape(op, a.shape(), b.shape());
  const std::size_t n = shape_size(out);
  std::vector<double> data(n);
  const auto x = a.data();
  const auto y = b.data();
  if (a.shape() == out && b.shape() == out) {
    for (std::size_t i = 0; i < n; ++i) data[i] = f(x[i], y[i]);
  } else {
    const BroadcastIndex ia(a.shape(), out), ib(b.shape(), out);
    for (std::size_t i = 0; i < n; ++i) data[i] = f(x[ia(i)], y[ib(i)]);
  }
  return {std::move(out), std::move(data)};
}

template <class F>
std::vector<double> unary_kernel(const Tensor& x, F f) {
  const auto in = x.data();
  std::vector<double> data(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) data[i] = f(in[i]);
  return data;
}

Tensor reduce_like(const Tensor& g, const Shape& shape) {
  return g.shape() == shape ? g : sum_to(g, shape);
}

std::size_t last_extent(const char* op, const Tensor& x) {
  if (x.dim() == 0) shape_fail(op, "needs at least one axis");
  return x.shape().back();
}

Shape leading(const Shape& s) { return Shape(s.begin(), s.end() - 1); }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  auto [shape, data] = binary_kernel("add", a, b, [](double x, double y) { return x + y; });
  return finish("add", std::move(shape), std::move(data), {a, b},
                [](const Tensor& g, std::span<const Tensor> in, const Tensor&,
                   std::span<const char> needs) {
                  return std::vector<Tensor>{needs[0] ? reduce_like(g, in[0].shape()) : Tensor(),
                                             needs[1] ? reduce_like(g, in[1].shape()) : Tensor()};
                });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  auto [shape, data] = binary_kernel("sub", a, b, [](double x, double y) { return x - y; });
  return finish("sub", std::move(shape), std::move(data), {a, b},
                [](const Tensor& g, std::span<const Tensor> in, const Tensor&,
                   std::span<const char> needs) {
                  return std::vector<Tensor>{
                      needs[0] ? reduce_like(g, in[0].shape()) : Tensor(),
                      needs[1] ? neg(reduce_like(g, in[1].shape())) : Tensor()};
                });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  auto [shape, data] = binary_kernel("mul", a, b, [](double x, double y) { return x * y; });
  return finish("mul", std::move(shape), std::move(data), {a, b},
                [](const Tensor& g, std::span<const Tensor> in, const Tensor&,
                   std::span<const char> needs) {
                  return std::vector<Tensor>{
                      needs[0] ? reduce_like(mul(g, in[1]), in[0].shape()) : Tensor(),
                      needs[1] ? reduce_like(mul(g, in[0]), in[1].shape()) : Tensor()};
                });
}

Tensor div(const Tensor& a, const Tensor& b) {
  auto [shape, data] = binary_kernel("div", a, b, [](double x, double y) { return x / y; });
  return finish("div", std::move(shape), std::move(data), {a, b},
                [](const Tensor& g, std::span<const Tensor> in, const Tensor& out,
                   std::span<const char> needs) {
                  return std::vector<Tensor>{
                      needs[0] ? reduce_like(div(g, in[1]), in[0].shape()) : Tensor(),
                      needs[1] ? reduce_like(neg(div(mul(g, out), in[1])), in[1].shape())
                               : Tensor()};
                });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor scale(const Tensor& x, double c) {
  return finish("scale", x.shape(), unary_kernel(x, [c](double v) { return c * v; }), {x},
                [c](const Tensor& g, std::span<const Tensor>, const Tensor&, std::span<const char>) {
                  return std::vector<Tensor>{scale(g, c)};
                });
}

Tensor add_scalar(const Tensor& x, double c) {
  return finish("add_scalar", x.shape(), unary_kernel(x, [c](double v) { return v + c; }), {x},
                [](const Tensor& g, std::span<const Tensor>, const Tensor&, std::span<const char>) {
                  return std::vector<Tensor>{g};
                });
}

Tensor exp(const Tensor& x) {
  return finish("exp", x.shape(), unary_kernel(x, [](double v) { return std::exp(v); }), {x},
                [](const Tensor& g, std::span<const Tensor>, const Tensor& out,
                   std::span<const char>) { return std::vector<Tensor>{mul(g, out)}; });
}

Tensor log(const Tensor& x) {
  for (double v : x.data())
    if (v <= 0.0) throw NumericError("log: non-positive input");
  return finish("log", x.shape(), unary_kernel(x, [](double v) { return std::log(v); }), {x},
                [](const Tensor& g, std::span<const Tensor> in, const Tensor&,
                   std::span<const char>) { return std::vector<Tensor>{div(g, in[0])}; });
}

Tensor pow_scalar(const Tensor& x, double p) {
  return finish("pow_scalar", x.shape(),
                unary_kernel(x, [p](double v) { return std::pow(v, p); }), {x},
                [p](const Tensor& g, std::span<const Tensor> in, const Tensor&,
                    std::span<const char>) {
                  return std::vector<Tensor>{mul(g, scale(pow_scalar(in[0], p - 1.0), p))};
                });
}

Tensor relu(const Tensor& x) {
  return finish("relu", x.shape(), unary_kernel(x, [](double v) { return v > 0.0 ? v : 0.0; }),
                {x},
                [](const Tensor& g, std::span<const Tensor> in, const Tensor&,
                   std::span<const char>) {
                  // The step function is piecewise constant: its own derivative is zero.
                  Tensor step(in[0].shape(),
                              unary_kernel(in[0], [](double v) { return v > 0.0 ? 1.0 : 0.0; }));
                  return std::vector<Tensor>{mul(g, step)};
                });
}

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return finish("sum_all", {}, {s}, {x},
                [](const Tensor& g, std::span<const Tensor> in, const Tensor&,
                   std::span<const char>) {
                  return std::vector<Tensor>{broadcast_to(g, in[0].shape())};
                });
}

Tensor sum_last(const Tensor& x) {
  const std::size_t width = last_extent("sum_last", x);
  const std::size_t rows = x.size() / width;
  const auto in = x.data();
  std::vector<double> data(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < width; ++c) s += in[r * width + c];
    data[r] = s;
  }
  Shape shape = x.shape();
  shape.back() = 1;
  return finish("sum_last", std::move(shape), std::move(data), {x},
                [](const Tensor& g, std::span<const Tensor> in, const Tensor&,
                   std::span<const char>) {
                  return std::vector<Tensor>{broadcast_to(g, in[0].shape())};
                });
}

Tensor sum_to(const Tensor& x, const Shape& shape) {
  if (broadcast_shape("sum_to", shape, x.shape()) != x.shape())
    shape_fail("sum_to", "cannot reduce " + shape_str(x.shape()) + " to " + shape_str(shape));
  std::vector<double> data(shape_size(shape), 0.0);
  const BroadcastIndex idx(shape, x.shape());
  const auto in = x.data();
  for (std::size_t i = 0; i < in.size(); ++i) data[idx(i)] += in[i];
  return finish("sum_to", shape, std::move(data), {x},
                [](const Tensor& g, std::span<const Tensor> in, const Tensor&,
                   std::span<const char>) {
                  return std::vector<Tensor>{broadcast_to(g, in[0].shape())};
                });
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  if (broadcast_shape("broadcast_to", x.shape(), shape) != shape)
    shape_fail("broadcast_to",
               "cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(shape));
  const std::size_t n = shape_size(shape);
  std::vector<double> data(n);
  const BroadcastIndex idx(x.shape(), shape);
  const auto in = x.data();
  for (std::size_t i = 0; i < n; ++i) data[i] = in[idx(i)];
  return finish("broadcast_to", shape, std::move(data), {x},
                [](const Tensor& g, std::span<const Tensor> in, const Tensor&,
                   std::span<const char>) {
                  return std::vector<Tensor>{sum_to(g, in[0].shape())};
                });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() < 1 || b.dim() != 2 || a.shape().back() != b.extent(0))
    shape_fail("matmul", "incompatible shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
  const std::size_t k = b.extent(0), n = b.extent(1), m = a.size() / k;
  std::vector<double> data(m * n);
  kernels::matmul(a.data().data(), b.data().data(), data.data(), m, k, n);
  Shape shape = a.shape();
  shape.back() = n;
  return finish("matmul", std::move(shape), std::move(data), {a, b},
                [](const Tensor& g, std::span<const Tensor> in, const Tensor&,
                   std::span<const char> needs) {
                  Tensor ga, gb;
                  if (needs[0]) ga = matmul(g, transpose_last2(in[1]));
                  if (needs[1]) {
                    const std::size_t k = in[1].extent(0), n = in[1].extent(1);
                    const std::size_t m = in[0].size() / k;
                    gb = matmul(transpose_last2(reshape(in[0], {m, k})), reshape(g, {m, n}));
                  }
                  return std::vector<Tensor>{ga, gb};
                });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.dim() != 3 || b.dim() != 3 || a.extent(0) != b.extent(0) || a.extent(2) != b.extent(1))
    shape_fail("bmm", "incompatible shapes " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()));
  const std::size_t t = a.extent(0), m = a.extent(1), k = a.extent(2), n = b.extent(2);
  std::vector<double> data(t * m * n);
  kernels::bmm(a.data().data(), b.data().data(), data.data(), t, m, k, n);
  return finish("bmm", {t, m, n}, std::move(data), {a, b},
                [](const Tensor& g, std::span<const Tensor> in, const Tensor&,
                   std::span<const char> needs) {
                  return std::vector<Tensor>{
                      needs[0] ? bmm(g, transpose_last2(in[1])) : Tensor(),
                      needs[1] ? bmm(transpose_last2(in[0]), g) : Tensor()};
                });
}

Tensor transpose_last2(const Tensor& x) {
  if (x.dim() < 2) shape_fail("transpose_last2", "needs two axes, got " + shape_str(x.shape()));
  const std::size_t rows = x.extent(x.dim() - 2), cols = x.extent(x.dim() - 1);
  const std::size_t batch = x.size() / (rows * cols);
  std::vector<double> data(x.size());
  kernels::transpose(x.data().data(), data.data(), batch, rows, cols);
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  return finish("transpose_last2", std::move(shape), std::move(data), {x},
                [](const Tensor& g, std::span<const Tensor>, const Tensor&,
                   std::span<const char>) { return std::vector<Tensor>{transpose_last2(g)}; });
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape_size(shape) != x.size())
    shape_fail("reshape", "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  const auto in = x.data();
  return finish("reshape", shape, std::vector<double>(in.begin(), in.end()), {x},
                [](const Tensor& g, std::span<const Tensor> in, const Tensor&,
                   std::span<const char>) {
                  return std::vector<Tensor>{reshape(g, in[0].shape())};
                });
}

Tensor permute_0213(const Tensor& x) {
  if (x.dim() != 4) shape_fail("permute_0213", "needs four axes, got " + shape_str(x.shape()));
  const std::size_t d0 = x.extent(0), d1 = x.extent(1), d2 = x.extent(2), d3 = x.extent(3);
  const auto in = x.data();
  std::vector<double> data(x.size());
  for (std::size_t a = 0; a < d0; ++a)
    for (std::size_t b = 0; b < d1; ++b)
      for (std::size_t c = 0; c < d2; ++c) {
        const double* src = in.data() + ((a * d1 + b) * d2 + c) * d3;
        double* dst = data.data() + ((a * d2 + c) * d1 + b) * d3;
        std::copy(src, src + d3, dst);
      }
  return finish("permute_0213", {d0, d2, d1, d3}, std::move(data), {x},
                [](const Tensor& g, std::span<const Tensor>, const Tensor&,
                   std::span<const char>) { return std::vector<Tensor>{permute_0213(g)}; });
}

Tensor softmax_last(const Tensor& x) {
  const std::size_t width = last_extent("softmax_last", x);
  const std::size_t rows = x.size() / width;
  const auto in = x.data();
  std::vector<double> data(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = in.data() + r * width;
    double* dst = data.data() + r * width;
    const double top = *std::max_element(src, src + width);
    double total = 0.0;
    for (std::size_t c = 0; c < width; ++c) total += (dst[c] = std::exp(src[c] - top));
    for (std::size_t c = 0; c < width; ++c) dst[c] /= total;
  }
  return finish("softmax_last", x.shape(), std::move(data), {x},
                [](const Tensor& g, std::span<const Tensor>, const Tensor& out,
                   std::span<const char>) {
                  return std::vector<Tensor>{mul(out, sub(g, sum_last(mul(g, out))))};
                });
}

Tensor log_softmax_last(const Tensor& x) {
  const std::size_t width = last_extent("log_softmax_last", x);
  const std::size_t rows = x.size() / width;
  const auto in = x.data();
  std::vector<double> data(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = in.data() + r * width;
    double* dst = data.data() + r * width;
    const double top = *std::max_element(src, src + width);
    double total = 0.0;
    for (std::size_t c = 0; c < width; ++c) total += std::exp(src[c] - top);
    const double lse = top + std::log(total);
    for (std::size_t c = 0; c < width; ++c) dst[c] = src[c] - lse;
  }
  return finish("log_softmax_last", x.shape(), std::move(data), {x},
                [](const Tensor& g, std::span<const Tensor>, const Tensor& out,
                   std::span<const char>) {
                  return std::vector<Tensor>{sub(g, mul(exp(out), sum_last(g)))};
                });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t width = last_extent("layer_norm", x);
  if (gain.shape() != Shape{width} || bias.shape() != Shape{width})
    shape_fail("layer_norm", "gain/bias must be [" + std::to_string(width) + "], got " +
                                 shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
  const double inv_width = 1.0 / static_cast<double>(width);
  const Tensor centered = sub(x, scale(sum_last(x), inv_width));
  const Tensor variance = scale(sum_last(mul(centered, centered)), inv_width);
  const Tensor inv_std = pow_scalar(add_scalar(variance, eps), -0.5);
  return add(mul(mul(centered, inv_std), gain), bias);
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids,
                   const Shape& index_shape) {
  if (table.dim() != 2) shape_fail("gather_rows", "table must be 2-D, got " + shape_str(table.shape()));
  if (shape_size(index_shape) != ids.size())
    shape_fail("gather_rows", "index shape " + shape_str(index_shape) + " does not hold " +
                                  std::to_string(ids.size()) + " ids");
  const std::size_t rows = table.extent(0), width = table.extent(1);
  const auto in = table.data();
  std::vector<double> data(ids.size() * width);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= rows)
      throw std::out_of_range("gather_rows: id " + std::to_string(ids[i]) +
                              " out of range for table with " + std::to_string(rows) + " rows");
    std::copy(in.begin() + static_cast<long>(ids[i] * width),
              in.begin() + static_cast<long>((ids[i] + 1) * width),
              data.begin() + static_cast<long>(i * width));
  }
  Shape shape = index_shape;
  shape.push_back(width);
  return finish("gather_rows", std::move(shape), std::move(data), {table},
                [ids = share(ids)](const Tensor& g, std::span<const Tensor> in, const Tensor&,
                                   std::span<const char>) {
                  const std::size_t width = in[0].extent(1);
                  return std::vector<Tensor>{
                      scatter_add_rows(reshape(g, {ids->size(), width}), *ids, in[0].extent(0))};
                });
}

Tensor scatter_add_rows(const Tensor& src, std::span<const std::size_t> ids, std::size_t rows) {
  if (src.dim() != 2 || src.extent(0) != ids.size())
    shape_fail("scatter_add_rows", "source " + shape_str(src.shape()) + " does not match " +
                                       std::to_string(ids.size()) + " ids");
  const std::size_t width = src.extent(1);
  const auto in = src.data();
  std::vector<double> data(rows * width, 0.0);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= rows) throw std::out_of_range("scatter_add_rows: id out of range");
    for (std::size_t c = 0; c < width; ++c) data[ids[i] * width + c] += in[i * width + c];
  }
  return finish("scatter_add_rows", {rows, width}, std::move(data), {src},
                [ids = share(ids)](const Tensor& g, std::span<const Tensor>, const Tensor&,
                                   std::span<const char>) {
                  return std::vector<Tensor>{gather_rows(g, *ids, {ids->size()})};
                });
}

Tensor pick_last(const Tensor& x, std::span<const std::size_t> idx) {
  const std::size_t width = last_extent("pick_last", x);
  const std::size_t rows = x.size() / width;
  if (idx.size() != rows)
    shape_fail("pick_last", std::to_string(idx.size()) + " indices for " + std::to_string(rows) +
                                " rows of " + shape_str(x.shape()));
  const auto in = x.data();
  std::vector<double> data(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (idx[r] >= width) throw std::out_of_range("pick_last: index out of range");
    data[r] = in[r * width + idx[r]];
  }
  return finish("pick_last", leading(x.shape()), std::move(data), {x},
                [idx = share(idx)](const Tensor& g, std::span<const Tensor> in, const Tensor&,
                                   std::span<const char>) {
                  return std::vector<Tensor>{scatter_last(g, *idx, in[0].shape().back())};
                });
}

Tensor scatter_last(const Tensor& x, std::span<const std::size_t> idx, std::size_t width) {
  if (idx.size() != x.size())
    shape_fail("scatter_last", std::to_string(idx.size()) + " indices for " +
                                   shape_str(x.shape()));
  const auto in = x.data();
  std::vector<double> data(x.size() * width, 0.0);
  for (std::size_t r = 0; r < x.size(); ++r) {
    if (idx[r] >= width) throw std::out_of_range("scatter_last: index out of range");
    data[r * width + idx[r]] = in[r];
  }
  Shape shape = x.shape();
  shape.push_back(width);
  return finish("scatter_last", std::move(shape), std::move(data), {x},
                [idx = share(idx)](const Tensor& g, std::span<const Tensor>, const Tensor&,
                                   std::span<const char>) {
                  return std::vector<Tensor>{pick_last(g, *idx)};
                });
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0))
    throw std::invalid_argument("dropout: rate must be in [0, 1), got " + std::to_string(rate));
  if (rate == 0.0) return x;
  const double keep = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.size());
  for (auto& m : mask) m = rng.uniform() < rate ? 0.0 : keep;
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

Tensor cross_entropy_smoothed(const Tensor& logits, std::span<const std::size_t> targets,
                              double eps) {
  if (!(eps >= 0.0 && eps < 1.0))
    throw std::invalid_argument("cross_entropy_smoothed: smoothing must be in [0, 1)");
  const std::size_t vocab = last_extent("cross_entropy_smoothed", logits);
  const Tensor logp = log_softmax_last(logits);
  const Tensor picked = pick_last(logp, targets);
  Tensor loss = scale(picked, -(1.0 - eps));
  if (eps > 0.0) {
    const Tensor total = reshape(sum_last(logp), leading(logits.shape()));
    loss = add(loss, scale(total, -eps / static_cast<double>(vocab)));
  }
  return loss;
}

double smoothed_target_entropy(std::size_t vocab, double eps) {
  const double v = static_cast<double>(vocab);
  const double on = 1.0 - eps + eps / v;
  const double off = eps / v;
  double h = -on * std::log(on);
  if (off > 0.0) h -= (v - 1.0) * off * std::log(off);
  return h;
}

}  // namespace glmask
