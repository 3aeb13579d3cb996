#include <cmath>

#include "doctest.h"
#include "glmask/alignment.hpp"
#include "glmask/ops.hpp"
#include "glmask/tape.hpp"
#include "json.hpp"
#include "oracles.hpp"

using namespace glmask;

namespace {

// l_i = 0.5 * (theta . x_i - y_i)^2
UnitLossFn quadratic_units(std::vector<double> xs, std::vector<double> ys) {
  return [xs = std::move(xs), ys = std::move(ys)](const ParameterSet& p) {
    const std::size_t n = ys.size();
    const Tensor x({n, 2}, xs);
    const Tensor pred = reshape(matmul(x, reshape(p.at("theta"), {2, 1})), {n});
    const Tensor r = sub(pred, Tensor({n}, ys));
    return scale(mul(r, r), 0.5);
  };
}

ParameterSet toy_params(double a = 0.0, double b = 0.0) {
  ParameterSet p;
  p.set("theta", Tensor({2}, {a, b}));
  return p;
}

struct Fixture {
  Corpus corpus = generate_cipher_corpus(200, 12, 2, 7, 21);
  ModelConfig config;
  ParameterSet params;

  Fixture() {
    config.num_layers = 1;
    config.num_heads = 2;
    config.d_model = 8;
    config.d_ff = 16;
    config.src_vocab_size = corpus.source_vocab.size();
    config.trg_vocab_size = corpus.target_vocab.size();
    params = init_model(config, 5);
    // Move away from the near-uniform init so scores have both signs.
    std::vector<double> flat = params.flatten();
    Rng rng(77);
    for (auto& v : flat) v += rng.uniform(-0.3, 0.3);
    params.unflatten(flat);
  }

  TokenBatch random_batch(Rng& rng, std::size_t size, std::size_t max_trg = 99) {
    std::vector<std::size_t> idx;
    while (idx.size() < size) {
      const std::size_t i = rng.below(corpus.size());
      if (corpus.pairs[i].target.size() + 2 <= max_trg) idx.push_back(i);
    }
    return make_batch(corpus, idx);
  }
};

void check_mask_rule(const AlignmentResult& r) {
  const auto s = r.scores.data();
  for (std::size_t i = 0; i < s.size(); ++i) {
    CHECK((r.mask[i] != 0) == (s[i] > 0.0));
    if (!r.pad.empty() && r.pad[i]) {
      CHECK(s[i] == 0.0);
      CHECK(r.mask[i] == 0);
    }
  }
}

}  // namespace

TEST_CASE("toy linear model: clean gradient and alignment") {
  const ParameterSet p = toy_params();
  const FlatGradient clean = mean_gradient(quadratic_units({1, 0}, {1}), p);
  CHECK(clean.values == std::vector<double>{-1.0, 0.0});

  const auto train = quadratic_units({1, 0, 1, 0, 0, 1}, {1, -1, 5});
  const AlignmentResult fast = align_units(train, p, clean, Granularity::kSentence);
  const AlignmentResult slow = oracle_units(train, p, clean, Granularity::kSentence);
  CHECK(fast.scores[0] == 1.0);
  CHECK(fast.scores[1] == -1.0);
  CHECK(fast.scores[2] == 0.0);
  CHECK(fast.mask == std::vector<char>{1, 0, 0});
  CHECK(slow.scores[0] == 1.0);
  CHECK(slow.scores[1] == -1.0);
  CHECK(slow.mask == fast.mask);
  CHECK(fast.backward_passes == 2);
  CHECK(fast.frac_unmasked() == doctest::Approx(1.0 / 3.0));
  check_mask_rule(fast);
}

TEST_CASE("clean_gradient") {
  Fixture f;
  Rng rng(1);
  const TokenBatch b = f.random_batch(rng, 5);
  const FlatGradient g = clean_gradient(f.params, f.config, b);
  const FlatGradient twice = clean_gradient(f.params, f.config, concat_batches(b, b));
  CHECK(testing::max_abs_diff(g.values, twice.values) < 1e-12);

  ParameterSet with_frozen = f.params;
  with_frozen.set("unused.w", Tensor::full({3, 2}, 0.5));
  const FlatGradient gf = clean_gradient(with_frozen, f.config, b);
  for (double v : gf.span_of("unused.w")) CHECK(v == 0.0);

  TokenBatch empty;
  CHECK_THROWS_AS(clean_gradient(f.params, f.config, empty), std::invalid_argument);
}

TEST_CASE("efficient alignment matches the per-unit oracle") {
  Fixture f;
  Rng rng(2024);
  double worst_sent = 0.0, worst_word = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const FlatGradient clean = clean_gradient(f.params, f.config, f.random_batch(rng, 4));

    const TokenBatch sb = f.random_batch(rng, 1 + rng.below(8), 8);
    const AlignmentResult s = align_sentence(f.params, f.config, sb, clean);
    const AlignmentResult so = oracle_align(f.params, f.config, sb, clean, Granularity::kSentence);
    worst_sent = std::max(worst_sent, testing::max_abs_diff(s.scores.data(), so.scores.data()));
    CHECK(s.mask == so.mask);
    CHECK(s.backward_passes == 2);
    check_mask_rule(s);

    const TokenBatch wb = f.random_batch(rng, 1 + rng.below(4), 8);
    const AlignmentResult w = align_word(f.params, f.config, wb, clean);
    const AlignmentResult wo = oracle_align(f.params, f.config, wb, clean, Granularity::kWord);
    worst_word = std::max(worst_word, testing::max_abs_diff(w.scores.data(), wo.scores.data()));
    CHECK(w.mask == wo.mask);
    CHECK(w.backward_passes == 2);
    check_mask_rule(w);
  }
  CHECK(worst_sent < 1e-9);
  CHECK(worst_word < 1e-9);
}

TEST_CASE("word scores average to the sentence score") {
  Fixture f;
  Rng rng(5);
  const FlatGradient clean = clean_gradient(f.params, f.config, f.random_batch(rng, 6));
  const TokenBatch b = f.random_batch(rng, 6);
  const AlignmentResult s = align_sentence(f.params, f.config, b, clean);
  const AlignmentResult w = align_word(f.params, f.config, b, clean);
  for (std::size_t r = 0; r < w.rows; ++r) {
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t t = 0; t < w.cols; ++t)
      if (!w.pad[r * w.cols + t]) {
        total += w.scores[r * w.cols + t];
        ++n;
      }
    CHECK(std::abs(total / static_cast<double>(n) - s.scores[r]) < 1e-9);
  }
}

TEST_CASE("pad neutrality and all-pad rows") {
  Fixture f;
  Rng rng(6);
  const FlatGradient clean = clean_gradient(f.params, f.config, f.random_batch(rng, 4));
  TokenBatch b = f.random_batch(rng, 3);
  for (std::size_t t = 0; t < b.trg_len; ++t) {
    b.trg_ids[t] = Vocabulary::kPad;
    b.trg_pad[t] = 1;
  }
  const AlignmentResult w = align_word(f.params, f.config, b, clean);
  for (std::size_t t = 0; t < w.cols; ++t) {
    CHECK(w.scores[t] == 0.0);
    CHECK(w.mask[t] == 0);
  }
  check_mask_rule(w);
}

TEST_CASE("mask is invariant to positive rescaling of the clean loss") {
  Fixture f;
  Rng rng(7);
  const TokenBatch clean_batch = f.random_batch(rng, 4);
  const FlatGradient clean = clean_gradient(f.params, f.config, clean_batch);
  const double c = 3.7;
  const FlatGradient scaled = mean_gradient(
      [&](const ParameterSet& bound) {
        return scale(sentence_losses(per_token_losses(bound, f.config, clean_batch, Mode::kEval)), c);
      },
      f.params);
  const TokenBatch b = f.random_batch(rng, 6);
  for (auto g : {Granularity::kSentence, Granularity::kWord}) {
    const AlignmentResult a = g == Granularity::kWord ? align_word(f.params, f.config, b, clean)
                                                      : align_sentence(f.params, f.config, b, clean);
    const AlignmentResult s = g == Granularity::kWord ? align_word(f.params, f.config, b, scaled)
                                                      : align_sentence(f.params, f.config, b, scaled);
    CHECK(a.mask == s.mask);
    for (std::size_t i = 0; i < a.scores.size(); ++i)
      CHECK(std::abs(s.scores[i] - c * a.scores[i]) <= 1e-9 * std::max(1.0, std::abs(s.scores[i])));
  }
}

TEST_CASE("self-alignment is positive") {
  Fixture f;
  Rng rng(8);
  const TokenBatch one = f.random_batch(rng, 1);
  const FlatGradient g1 = clean_gradient(f.params, f.config, one);
  const AlignmentResult r1 = align_sentence(f.params, f.config, one, g1);
  const double sq = dot(g1, g1);
  CHECK(std::abs(r1.scores[0] - sq) <= 1e-9 * sq);
  CHECK(r1.mask[0] == 1);

  const TokenBatch many = f.random_batch(rng, 6);
  const FlatGradient g = clean_gradient(f.params, f.config, many);
  const AlignmentResult r = align_sentence(f.params, f.config, many, g);
  CHECK(r.mean_score() > 0.0);
  CHECK(std::abs(r.mean_score() - dot(g, g)) <= 1e-9 * dot(g, g));
}

TEST_CASE("alignment errors and telemetry") {
  Fixture f;
  Rng rng(9);
  const TokenBatch b = f.random_batch(rng, 2);
  FlatGradient wrong = FlatGradient::zeros({{"theta", {2}}});
  CHECK_THROWS_AS(align_sentence(f.params, f.config, b, wrong), std::invalid_argument);
  CHECK_THROWS_AS(align_word(f.params, f.config, b, wrong), std::invalid_argument);

  const AlignmentResult r = mask_from_scores(Tensor({4}, {0.5, -1.0, 0.0, 2.0}), Granularity::kSentence, 3.0);
  CHECK(r.mask == std::vector<char>{1, 0, 0, 1});
  const auto j = nlohmann::json::parse(telemetry_line(12, r));
  CHECK(j["step"] == 12);
  CHECK(j["granularity"] == "sentence");
  CHECK(j["frac_unmasked"].get<double>() == doctest::Approx(0.5));
  CHECK(j["clean_grad_norm"].get<double>() == 3.0);
  CHECK(j["mean_g"].get<double>() == doctest::Approx(0.375));
  CHECK(j["min_g"].get<double>() == -1.0);
  CHECK(j["max_g"].get<double>() == 2.0);
  CHECK(parse_granularity("sent") == Granularity::kSentence);
  CHECK_THROWS(parse_granularity("phrase"));
}
