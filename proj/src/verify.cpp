#include "glmask/verify.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>

#include "glmask/ops.hpp"
#include "glmask/tape.hpp"
#include "glmask/trainer.hpp"

namespace glmask {

namespace {

ModelConfig tiny_model(const Corpus& c, std::size_t layers) {
  ModelConfig m;
  m.num_layers = layers;
  m.num_heads = 2;
  m.d_model = 8;
  m.d_ff = 16;
  m.src_vocab_size = c.source_vocab.size();
  m.trg_vocab_size = c.target_vocab.size();
  return m;
}

// Perturbed away from the near-uniform init so scores take both signs.
ParameterSet jittered(const ModelConfig& m, std::uint64_t seed) {
  ParameterSet p = init_model(m, seed);
  std::vector<double> flat = p.flatten();
  Rng rng(seed, Stream::kNoise, 1);
  for (auto& v : flat) v += rng.uniform(-0.3, 0.3);
  p.unflatten(flat);
  return p;
}

TokenBatch random_batch(const Corpus& c, Rng& rng, std::size_t size, std::size_t max_trg) {
  std::vector<std::size_t> idx;
  while (idx.size() < size) {
    const std::size_t i = rng.below(c.size());
    if (c.pairs[i].target.size() + 2 <= max_trg) idx.push_back(i);
  }
  return make_batch(c, idx);
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

CheckResult finish(std::string name, double err, double tol, std::string detail = {}) {
  return {std::move(name), err <= tol, err, tol, std::move(detail)};
}

}  // namespace

CheckResult check_gradient(std::uint64_t seed) {
  const Corpus c = generate_cipher_corpus(2, 10, 2, 4, seed);
  const ModelConfig m = tiny_model(c, 2);
  const ParameterSet p0 = init_model(m, seed);
  const std::vector<std::size_t> idx = {0, 1};
  const TokenBatch batch = make_batch(c, idx);
  auto loss_at = [&](const ParameterSet& p) { return sum_all(sentence_losses(per_token_losses(p, m, batch, Mode::kEval))); };

  Tape tape;
  const ParameterSet bound = p0.watch(tape);
  const FlatGradient g = backward(loss_at(bound), bound);

  const std::vector<double> flat = p0.flatten();
  constexpr double h = 1e-5;
  double worst = 0.0;
  ParameterSet shifted = p0;
  for (std::size_t i = 0; i < flat.size(); ++i) {
    std::vector<double> x = flat;
    x[i] = flat[i] + h;
    shifted.unflatten(x);
    const double up = loss_at(shifted).item();
    x[i] = flat[i] - h;
    shifted.unflatten(x);
    const double numeric = (up - loss_at(shifted).item()) / (2 * h);
    const double scale = std::max({std::abs(numeric), std::abs(g.values[i]), 1e-3});
    worst = std::max(worst, std::abs(numeric - g.values[i]) / scale);
  }
  return finish("gradient-finite-difference", worst, 1e-4, std::to_string(flat.size()) + " parameters");
}

CheckResult check_alignment(std::uint64_t seed, std::size_t trials) {
  const Corpus c = generate_cipher_corpus(200, 12, 2, 7, seed);
  const ModelConfig m = tiny_model(c, 1);
  const ParameterSet p = jittered(m, seed);
  Rng rng(seed, Stream::kData, 7);
  double worst = 0.0;
  bool passes_ok = true, masks_ok = true;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    const FlatGradient clean = clean_gradient(p, m, random_batch(c, rng, 4, 99));
    for (Granularity g : {Granularity::kSentence, Granularity::kWord}) {
      const TokenBatch b = random_batch(c, rng, 1 + rng.below(8), 8);
      const AlignmentResult fast = g == Granularity::kWord ? align_word(p, m, b, clean) : align_sentence(p, m, b, clean);
      const AlignmentResult slow = oracle_align(p, m, b, clean, g);
      worst = std::max(worst, max_abs_diff(fast.scores.data(), slow.scores.data()));
      passes_ok = passes_ok && fast.backward_passes == 2;
      masks_ok = masks_ok && fast.mask == slow.mask;
    }
  }
  CheckResult r = finish("alignment-vs-oracle", worst, 1e-9, "backward passes per alignment: 2");
  if (!passes_ok) r.detail = "backward pass count differs from 2";
  if (!masks_ok) r.detail = "masks differ";
  r.passed = r.passed && passes_ok && masks_ok;
  return r;
}

CheckResult check_decomposition(std::uint64_t seed, std::size_t trials) {
  const Corpus c = generate_cipher_corpus(60, 10, 2, 6, seed);
  const ModelConfig m = tiny_model(c, 1);
  const ParameterSet p = jittered(m, seed);
  Rng rng(seed, Stream::kData, 11);
  double worst = 0.0;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    const TokenBatch batch = random_batch(c, rng, 1 + rng.below(4), 99);
    Tape tape;
    const ParameterSet bound = p.watch(tape);
    const PerTokenLoss losses = per_token_losses(bound, m, batch, Mode::kEval);
    const auto wrt = bound.tensors();
    auto grad_of = [&](const Tensor& y) { return FlatGradient::from_tensors(bound.layout(), tape.gradient(y, wrt)); };
    const double rows = static_cast<double>(losses.rows);

    std::vector<double> scores(losses.rows * losses.cols);
    for (auto& v : scores) v = rng.uniform(-1.0, 1.0);
    const AlignmentResult mask = mask_from_scores(Tensor({losses.rows, losses.cols}, scores), Granularity::kWord, 1.0, losses.pad);
    const FlatGradient got = grad_of(masked_objective(losses, &mask));
    std::vector<double> expected(got.values.size(), 0.0);
    for (std::size_t r = 0; r < losses.rows; ++r) {
      const double n = static_cast<double>(losses.tokens_in_row(r));
      for (std::size_t t = 0; t < losses.cols; ++t) {
        if (!mask.mask[r * losses.cols + t]) continue;
        std::vector<double> pick(scores.size(), 0.0);
        pick[r * losses.cols + t] = 1.0;
        const FlatGradient g = grad_of(sum_all(mul(losses.values, Tensor({losses.rows, losses.cols}, pick))));
        for (std::size_t i = 0; i < expected.size(); ++i) expected[i] += g.values[i] / (n * rows);
      }
    }
    worst = std::max(worst, max_abs_diff(got.values, expected));
  }
  return finish("masked-objective-decomposition", worst, 1e-9);
}

CheckResult check_vanilla_equivalence(std::uint64_t seed, std::size_t steps) {
  const Corpus noisy = inject_noise(generate_cipher_corpus(160, 10, 2, 6, seed), {0.2, 0.1, 0.1, seed});
  const Splits s = split_clean(noisy, 16, 8, 8, seed);
  const ModelConfig m = tiny_model(noisy, 1);
  TrainConfig t;
  t.total_steps = steps;
  t.batch_size = 4;
  t.warmup_steps = 5;
  t.peak_lr = 3e-3;
  t.seed = seed;
  t.glmask_start_fraction = 0.0;
  auto positive = [](const Tensor& x) { return Tensor::full(x.shape(), 1.0); };
  double worst = 0.0;
  for (TrainMode mode : {TrainMode::kGlmaskSent, TrainMode::kGlmaskWord}) {
    TrainConfig g = t;
    g.mode = mode;
    Trainer a(m, t, s.train, &s.clean, init_model(m, seed));
    Trainer b(m, g, s.train, &s.clean, init_model(m, seed));
    while (!a.finished()) {
      a.step();
      b.step(positive);
      worst = std::max(worst, max_abs_diff(a.params().flatten(), b.params().flatten()));
    }
  }
  return finish("vanilla-equivalence", worst, 1e-12, std::to_string(steps) + " steps per mode");
}

std::vector<CheckResult> run_checks(std::uint64_t seed, std::size_t trials) {
  if (trials == 0) throw std::invalid_argument("trials must be >= 1");
  std::vector<CheckResult> out(4);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < 4; ++i) {
    try {
      switch (i) {
        case 0: out[0] = check_gradient(seed); break;
        case 1: out[1] = check_alignment(seed, trials); break;
        case 2: out[2] = check_decomposition(seed, trials); break;
        default: out[3] = check_vanilla_equivalence(seed, 5 * trials); break;
      }
    } catch (const std::exception& e) {
      out[i] = {"check-" + std::to_string(i), false, 0.0, 0.0, e.what()};
    }
  }
  return out;
}

}  // namespace glmask
