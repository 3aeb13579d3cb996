#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "doctest.h"
#include "glmask/autodiff.hpp"
#include "glmask/kernels.hpp"
#include "oracles.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

using namespace glmask;
using glmask::testing::finite_difference;
using glmask::testing::max_abs_diff;
using glmask::testing::max_relative_error;
using glmask::testing::random_values;

namespace {

using Builder = std::function<Tensor(const std::vector<Tensor>&)>;

struct InputSpec {
  Shape shape;
  double lo = -1.0;
  double hi = 1.0;
};

// f(x) = sum(y * r1) + sum(y * y * r2) with y = op(x); the quadratic term
// gives every op a non-zero Hessian so second-order rules get exercised.
Tensor probe_loss(const Tensor& y, const Tensor& r1, const Tensor& r2) {
  return add(sum_all(mul(y, r1)), sum_all(mul(mul(y, y), r2)));
}

struct PrimitiveCheck {
  double grad_error = 0.0;
  double hvp_error = 0.0;
};

PrimitiveCheck check_primitive(const Builder& op, const std::vector<InputSpec>& specs,
                               std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Tensor> inputs;
  for (const auto& s : specs)
    inputs.emplace_back(s.shape, random_values(rng, shape_size(s.shape), s.lo, s.hi));
  const Tensor probe = op(inputs);
  const Tensor r1(probe.shape(), random_values(rng, probe.size()));
  const Tensor r2(probe.shape(), random_values(rng, probe.size()));

  // Flatten all inputs into one vector for the finite-difference oracle.
  std::vector<double> flat;
  for (const auto& t : inputs) flat.insert(flat.end(), t.data().begin(), t.data().end());
  auto unpack = [&](const std::vector<double>& x) {
    std::vector<Tensor> out;
    std::size_t off = 0;
    for (const auto& t : inputs) {
      out.emplace_back(t.shape(), std::vector<double>(x.begin() + static_cast<long>(off),
                                                      x.begin() + static_cast<long>(off + t.size())));
      off += t.size();
    }
    return out;
  };
  auto value = [&](const std::vector<double>& x) { return probe_loss(op(unpack(x)), r1, r2).item(); };

  auto analytic = [&](const std::vector<double>& x) {
    Tape tape;
    std::vector<Tensor> bound;
    for (const auto& t : unpack(x)) bound.push_back(tape.watch(t));
    const Tensor loss = probe_loss(op(bound), r1, r2);
    std::vector<double> g;
    for (const auto& t : tape.gradient(loss, bound)) g.insert(g.end(), t.data().begin(), t.data().end());
    return g;
  };

  PrimitiveCheck result;
  result.grad_error = max_relative_error(analytic(flat), finite_difference(value, flat));

  // Hessian-vector product through create_graph versus finite differences of
  // the (already verified) first derivative.
  const std::vector<double> v = random_values(rng, flat.size());
  std::vector<double> hvp;
  {
    Tape tape;
    std::vector<Tensor> bound;
    for (const auto& t : unpack(flat)) bound.push_back(tape.watch(t));
    const Tensor loss = probe_loss(op(bound), r1, r2);
    const auto grads = tape.gradient(loss, bound, nullptr, true);
    Tensor proj = Tensor::scalar(0.0);
    std::size_t off = 0;
    for (const auto& g : grads) {
      const Tensor dir(g.shape(), std::vector<double>(v.begin() + static_cast<long>(off),
                                                      v.begin() + static_cast<long>(off + g.size())));
      proj = add(proj, sum_all(mul(g, dir)));
      off += g.size();
    }
    if (proj.tape()) {
      for (const auto& t : tape.gradient(proj, bound)) hvp.insert(hvp.end(), t.data().begin(), t.data().end());
    } else {
      hvp.assign(flat.size(), 0.0);
    }
  }
  const double h = 1e-5;
  std::vector<double> up = flat, down = flat;
  for (std::size_t i = 0; i < flat.size(); ++i) {
    up[i] += h * v[i];
    down[i] -= h * v[i];
  }
  const auto gu = analytic(up), gd = analytic(down);
  std::vector<double> fd_hvp(flat.size());
  for (std::size_t i = 0; i < flat.size(); ++i) fd_hvp[i] = (gu[i] - gd[i]) / (2.0 * h);
  result.hvp_error = max_relative_error(hvp, fd_hvp);
  return result;
}

const std::vector<std::size_t> kIds = {2, 0, 2, 1, 3, 2};

}  // namespace

TEST_CASE("forward primitive examples") {
  const Tensor s = softmax_last(Tensor({3}, {0.0, 0.0, 0.0}));
  for (double v : s.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  const Tensor ones23({2, 3}, std::vector<double>(6, 1.0));
  const Tensor ones32({3, 2}, std::vector<double>(6, 1.0));
  const Tensor prod = matmul(ones23, ones32);
  CHECK(prod.shape() == Shape{2, 2});
  for (double v : prod.data()) CHECK(v == 3.0);

  for (double eps : {0.0, 0.1, 0.5, 0.9}) {
    const std::vector<std::size_t> target = {3};
    const double loss = cross_entropy_smoothed(Tensor::zeros({1, 7}), target, eps)[0];
    CHECK(loss == doctest::Approx(std::log(7.0)).epsilon(1e-14));
  }
}

TEST_CASE("shape errors name the primitive") {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({2, 2});
  try {
    (void)matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), ShapeError);
  Rng rng(1);
  CHECK_THROWS(dropout(a, 1.0, rng));
  CHECK_THROWS_AS(gather_rows(Tensor::zeros({3, 2}), std::vector<std::size_t>{3}, {1}),
                  std::out_of_range);
}

TEST_CASE("non-finite forward values raise") {
  CHECK_THROWS_AS(exp(Tensor({1}, {1000.0})), NumericError);
  CHECK_THROWS_AS(log(Tensor({1}, {0.0})), NumericError);
  CHECK_THROWS_AS(div(Tensor({1}, {1.0}), Tensor({1}, {0.0})), NumericError);
}

TEST_CASE("gradient and Hessian-vector checks per primitive") {
  struct Case {
    const char* name;
    Builder op;
    std::vector<InputSpec> inputs;
  };
  const std::vector<Case> cases = {
      {"add broadcast", [](auto& x) { return add(x[0], x[1]); }, {{{3, 4}}, {{4}}}},
      {"sub keepdim", [](auto& x) { return sub(x[0], x[1]); }, {{{3, 4}}, {{3, 1}}}},
      {"mul general broadcast", [](auto& x) { return mul(x[0], x[1]); }, {{{2, 3, 4}}, {{3, 1}}}},
      {"div", [](auto& x) { return div(x[0], x[1]); }, {{{2, 3}}, {{2, 3}, 0.5, 2.0}}},
      {"exp", [](auto& x) { return exp(x[0]); }, {{{5}}}},
      {"log", [](auto& x) { return log(x[0]); }, {{{5}, 0.5, 2.0}}},
      {"pow", [](auto& x) { return pow_scalar(x[0], -0.5); }, {{{5}, 0.5, 2.0}}},
      {"relu", [](auto& x) { return relu(x[0]); }, {{{7}}}},
      {"scale", [](auto& x) { return add_scalar(scale(x[0], -2.5), 0.3); }, {{{4}}}},
      {"sum_all", [](auto& x) { return sum_all(x[0]); }, {{{2, 3}}}},
      {"sum_last", [](auto& x) { return sum_last(x[0]); }, {{{2, 3}}}},
      {"sum_to", [](auto& x) { return sum_to(x[0], {3, 1}); }, {{{2, 3, 4}}}},
      {"broadcast_to", [](auto& x) { return broadcast_to(x[0], {2, 3, 4}); }, {{{3, 1}}}},
      {"matmul", [](auto& x) { return matmul(x[0], x[1]); }, {{{2, 3, 4}}, {{4, 5}}}},
      {"bmm", [](auto& x) { return bmm(x[0], x[1]); }, {{{2, 3, 4}}, {{2, 4, 2}}}},
      {"transpose", [](auto& x) { return transpose_last2(x[0]); }, {{{2, 3, 4}}}},
      {"reshape", [](auto& x) { return reshape(x[0], {6, 2}); }, {{{3, 4}}}},
      {"permute", [](auto& x) { return permute_0213(x[0]); }, {{{2, 3, 2, 2}}}},
      {"softmax", [](auto& x) { return softmax_last(x[0]); }, {{{3, 5}}}},
      {"log_softmax", [](auto& x) { return log_softmax_last(x[0]); }, {{{3, 5}}}},
      {"layer_norm", [](auto& x) { return layer_norm(x[0], x[1], x[2]); },
       {{{3, 6}}, {{6}}, {{6}}}},
      {"gather_rows", [](auto& x) { return gather_rows(x[0], kIds, {2, 3}); }, {{{4, 3}}}},
      {"scatter_add_rows", [](auto& x) { return scatter_add_rows(x[0], kIds, 5); }, {{{6, 2}}}},
      {"pick_last", [](auto& x) { return pick_last(x[0], kIds); }, {{{6, 4}}}},
      {"scatter_last", [](auto& x) { return scatter_last(x[0], kIds, 4); }, {{{6}}}},
      {"cross_entropy", [](auto& x) { return cross_entropy_smoothed(x[0], kIds, 0.1); },
       {{{6, 5}}}},
  };
  std::uint64_t seed = 11;
  for (const auto& c : cases) {
    CAPTURE(c.name);
    const auto r = check_primitive(c.op, c.inputs, seed++);
    CHECK(r.grad_error < 1e-4);
    CHECK(r.hvp_error < 1e-4);
  }
}

TEST_CASE("backward of simple losses") {
  ParameterSet params;
  params.set("theta", Tensor({1}, {3.0}));
  {
    Tape tape;
    const auto bound = params.watch(tape);
    const Tensor t = bound.at("theta");
    const FlatGradient g = backward(sum_all(mul(t, t)), bound);
    CHECK(g.values == std::vector<double>{6.0});
  }
  {
    Tape tape;
    const auto bound = params.watch(tape);
    const FlatGradient g = backward(Tensor::scalar(4.0), bound);
    CHECK(g.values == std::vector<double>{0.0});
  }
  {
    Tape tape;
    const auto bound = params.watch(tape);
    CHECK_THROWS_AS(backward(mul(bound.at("theta"), Tensor({1, 2}, {1.0, 2.0})), bound), ShapeError);
  }
}

namespace {

ParameterSet random_mlp(std::uint64_t seed) {
  Rng rng(seed);
  ParameterSet p;
  p.set("b1", Tensor({5}, random_values(rng, 5)));
  p.set("b2", Tensor({3}, random_values(rng, 3)));
  p.set("w1", Tensor({4, 5}, random_values(rng, 20)));
  p.set("w2", Tensor({5, 3}, random_values(rng, 15)));
  return p;
}

// Per-example losses of a 2-layer tanh-free MLP (relu + log-softmax CE).
Tensor mlp_losses(const ParameterSet& p, const Tensor& x, std::span<const std::size_t> y) {
  const Tensor h = relu(add(matmul(x, p.at("w1")), p.at("b1")));
  return cross_entropy_smoothed(add(matmul(h, p.at("w2")), p.at("b2")), y, 0.1);
}

}  // namespace

TEST_CASE("two-layer MLP gradient matches finite differences") {
  Rng rng(5);
  const ParameterSet params = random_mlp(3);
  const Tensor x({6, 4}, random_values(rng, 24));
  const std::vector<std::size_t> y = {0, 2, 1, 1, 0, 2};

  Tape tape;
  const auto bound = params.watch(tape);
  const FlatGradient g = backward(sum_all(mlp_losses(bound, x, y)), bound);

  auto f = [&](const std::vector<double>& flat) {
    ParameterSet p = params;
    p.unflatten(flat);
    return sum_all(mlp_losses(p, x, y)).item();
  };
  CHECK(max_relative_error(g.values, finite_difference(f, params.flatten())) < 1e-4);
}

TEST_CASE("grad_dot_per_weight on a linear model") {
  // loss_i = (theta . x_i - y_i)^2 / 2 at theta = 0; grad = (theta . x - y) x
  ParameterSet params;
  params.set("theta", Tensor({2}, {0.0, 0.0}));
  const Tensor xs({2, 2}, {1.0, 0.0, 1.0, 0.0});
  const Tensor ys({2}, {1.0, -1.0});

  auto run = [&](const std::vector<double>& dir) {
    Tape tape;
    const auto bound = params.watch(tape);
    const Tensor pred = reshape(matmul(xs, reshape(bound.at("theta"), {2, 1})), {2});
    const Tensor resid = sub(pred, ys);
    const Tensor losses = scale(mul(resid, resid), 0.5);
    const Tensor z = tape.watch(Tensor::full({2}, 1.0));
    const FlatGradient direction{dir, params.layout()};
    const std::size_t before = tape.backward_passes();
    const Tensor g = grad_dot_per_weight(losses, z, bound, direction);
    CHECK(tape.backward_passes() - before == 2);
    return std::vector<double>(g.data().begin(), g.data().end());
  };
  CHECK(run({-1.0, 0.0}) == std::vector<double>{1.0, -1.0});
  CHECK(run({0.0, 0.0}) == std::vector<double>{0.0, 0.0});
}

TEST_CASE("grad_dot_per_weight matches per-unit backward and is linear in the direction") {
  Rng rng(21);
  const ParameterSet params = random_mlp(9);
  const Tensor x({5, 4}, random_values(rng, 20));
  const std::vector<std::size_t> y = {0, 2, 1, 1, 0};
  const FlatGradient direction{random_values(rng, params.num_values()), params.layout()};

  auto trick = [&](const FlatGradient& d) {
    Tape tape;
    const auto bound = params.watch(tape);
    const Tensor losses = mlp_losses(bound, x, y);
    const Tensor z = tape.watch(Tensor::full(losses.shape(), 1.0));
    const Tensor g = grad_dot_per_weight(losses, z, bound, d);
    return std::vector<double>(g.data().begin(), g.data().end());
  };

  std::vector<double> oracle;
  for (std::size_t i = 0; i < y.size(); ++i) {
    Tape tape;
    const auto bound = params.watch(tape);
    const Tensor loss = pick_last(reshape(mlp_losses(bound, x, y), {1, y.size()}),
                                  std::vector<std::size_t>{i});
    oracle.push_back(dot(backward(loss, bound), direction));
  }
  const auto got = trick(direction);
  CHECK(max_abs_diff(got, oracle) < 1e-9);

  FlatGradient scaled = direction;
  for (auto& v : scaled.values) v *= -3.5;
  const auto got_scaled = trick(scaled);
  for (std::size_t i = 0; i < got.size(); ++i)
    CHECK(got_scaled[i] == doctest::Approx(-3.5 * got[i]).epsilon(1e-12));
}

TEST_CASE("grad_dot_per_weight rejects weights that are not a loss factor") {
  ParameterSet params;
  params.set("theta", Tensor({2}, {0.5, -0.5}));
  Tape tape;
  const auto bound = params.watch(tape);
  const Tensor losses = mul(bound.at("theta"), bound.at("theta"));
  const FlatGradient dir{{1.0, 1.0}, params.layout()};

  CHECK_THROWS(grad_dot_per_weight(losses, Tensor::full({2}, 1.0), bound, dir));
  const Tensor z = tape.watch(Tensor::full({2}, 1.0));
  CHECK_THROWS(grad_dot_per_weight(mul(losses, z), z, bound, dir));
  const Tensor z2 = tape.watch(Tensor::full({2}, 2.0));
  CHECK_THROWS(grad_dot_per_weight(losses, z2, bound, dir));
  const FlatGradient wrong{{1.0}, {{"other", {1}}}};
  CHECK_THROWS(grad_dot_per_weight(losses, z, bound, wrong));
}

TEST_CASE("dot product of flat gradients") {
  const Layout layout = {{"a", {2}}};
  const FlatGradient a{{1.0, 2.0}, layout}, b{{3.0, 4.0}, layout};
  CHECK(dot(a, b) == 11.0);
  CHECK(dot(a, FlatGradient::zeros(layout)) == 0.0);
  CHECK(dot(a, a) == doctest::Approx(a.norm() * a.norm()));
  CHECK_THROWS(dot(a, FlatGradient{{1.0, 2.0}, {{"b", {2}}}}));
}

TEST_CASE("repeated backward sweeps are bitwise identical") {
  Rng rng(2);
  const ParameterSet params = random_mlp(4);
  const Tensor x({3, 4}, random_values(rng, 12));
  const std::vector<std::size_t> y = {1, 0, 2};
  Tape tape;
  const auto bound = params.watch(tape);
  const Tensor loss = sum_all(mlp_losses(bound, x, y));
  const auto first = backward(loss, bound).values;
  const auto second = backward(loss, bound).values;
  CHECK(first == second);
}

TEST_CASE("serial and parallel kernels agree bit for bit") {
  Rng rng(8);
  const std::size_t m = 37, k = 29, n = 41;
  const auto a = random_values(rng, 3 * m * k), b = random_values(rng, 3 * k * n);
  std::vector<double> c1(3 * m * n), c2(3 * m * n);
#ifdef _OPENMP
  const int saved = omp_get_max_threads();
  omp_set_num_threads(4);
#endif
  kernels::matmul_serial(a.data(), b.data(), c1.data(), m, k, n);
  kernels::matmul_parallel(a.data(), b.data(), c2.data(), m, k, n);
  CHECK(std::equal(c1.begin(), c1.begin() + static_cast<long>(m * n), c2.begin()));
  kernels::bmm_serial(a.data(), b.data(), c1.data(), 3, m, k, n);
  kernels::bmm_parallel(a.data(), b.data(), c2.data(), 3, m, k, n);
  CHECK(c1 == c2);
  std::vector<double> t1(3 * m * k), t2(3 * m * k);
  kernels::transpose_serial(a.data(), t1.data(), 3, m, k);
  kernels::transpose_parallel(a.data(), t2.data(), 3, m, k);
  CHECK(t1 == t2);
#ifdef _OPENMP
  omp_set_num_threads(saved);
#endif
}
