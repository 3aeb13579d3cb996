#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "glmask/model.hpp"
#include "glmask/ops.hpp"
#include "glmask/tape.hpp"
#include "oracles.hpp"

using namespace glmask;

namespace {

ModelConfig tiny_config(const Corpus& c) {
  ModelConfig m;
  m.num_layers = 1;
  m.num_heads = 2;
  m.d_model = 8;
  m.d_ff = 16;
  m.src_vocab_size = c.source_vocab.size();
  m.trg_vocab_size = c.target_vocab.size();
  return m;
}

ModelConfig desk_config(const Corpus& c) {
  ModelConfig m;
  m.src_vocab_size = c.source_vocab.size();
  m.trg_vocab_size = c.target_vocab.size();
  return m;
}

TokenBatch first_rows(const Corpus& c, std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return make_batch(c, idx);
}

// Appends extra pad columns to both sides of a batch.
TokenBatch widen(const TokenBatch& b, std::size_t extra_src, std::size_t extra_trg) {
  TokenBatch w = b;
  w.src_len += extra_src;
  w.trg_len += extra_trg;
  w.src_ids.assign(w.batch * w.src_len, Vocabulary::kPad);
  w.src_pad.assign(w.batch * w.src_len, 1);
  w.trg_ids.assign(w.batch * w.trg_len, Vocabulary::kPad);
  w.trg_pad.assign(w.batch * w.trg_len, 1);
  for (std::size_t r = 0; r < b.batch; ++r) {
    for (std::size_t s = 0; s < b.src_len; ++s) {
      w.src_ids[r * w.src_len + s] = b.src(r, s);
      w.src_pad[r * w.src_len + s] = b.src_pad[r * b.src_len + s];
    }
    for (std::size_t t = 0; t < b.trg_len; ++t) {
      w.trg_ids[r * w.trg_len + t] = b.trg(r, t);
      w.trg_pad[r * w.trg_len + t] = b.trg_pad[r * b.trg_len + t];
    }
  }
  return w;
}

}  // namespace

TEST_CASE("model config validation") {
  ModelConfig m;
  m.src_vocab_size = m.trg_vocab_size = 20;
  m.d_model = 65;
  try {
    m.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("divisible") != std::string::npos);
  }
  m.d_model = 64;
  m.dropout_rate = 1.0;
  m.label_smoothing = -0.1;
  CHECK(m.violations().size() == 2);
  m.dropout_rate = 0.1;
  m.label_smoothing = 0.1;
  CHECK(m.violations().empty());
  CHECK(ModelConfig::from_map(m.to_map()) == m);
}

TEST_CASE("init_model is deterministic in the seed") {
  const Corpus c = generate_cipher_corpus(10, 20, 2, 5, 1);
  const ModelConfig m = desk_config(c);
  const ParameterSet a = init_model(m, 3), b = init_model(m, 3), d = init_model(m, 4);
  CHECK(a == b);
  CHECK_FALSE(a == d);
  CHECK(a.contains("out.w"));
  CHECK(a.at("src_embed").shape() == Shape{m.src_vocab_size, m.d_model});
}

TEST_CASE("untrained token losses sit near ln V") {
  const Corpus c = generate_cipher_corpus(16, 40, 3, 10, 2);
  const ModelConfig m = desk_config(c);
  const ParameterSet p = init_model(m, 1);
  const PerTokenLoss l = per_token_losses(p, m, first_rows(c, 16), Mode::kEval);
  const double ln_v = std::log(static_cast<double>(m.trg_vocab_size));
  double worst = 0.0;
  for (std::size_t i = 0; i < l.values.size(); ++i)
    if (!l.pad[i]) worst = std::max(worst, std::abs(l.values[i] - ln_v));
  CHECK(worst < 0.05);
  const Tensor s = sentence_losses(l);
  for (std::size_t r = 0; r < s.size(); ++r) CHECK(std::abs(s[r] - ln_v) < 0.05);
}

TEST_CASE("per-token losses respect padding") {
  const Corpus c = generate_cipher_corpus(6, 20, 2, 7, 5);
  const ModelConfig m = tiny_config(c);
  const ParameterSet p = init_model(m, 2);
  const TokenBatch b = first_rows(c, 6);
  const PerTokenLoss base = per_token_losses(p, m, b, Mode::kEval);
  for (std::size_t i = 0; i < base.values.size(); ++i)
    if (base.pad[i]) CHECK(base.values[i] == 0.0);

  const PerTokenLoss wide = per_token_losses(p, m, widen(b, 3, 4), Mode::kEval);
  double diff = 0.0;
  for (std::size_t r = 0; r < base.rows; ++r)
    for (std::size_t t = 0; t < base.cols; ++t)
      if (!base.pad[r * base.cols + t])
        diff = std::max(diff, std::abs(base.values[r * base.cols + t] - wide.values[r * wide.cols + t]));
  CHECK(diff <= 1e-12);

  // A row whose target is all padding contributes nothing.
  TokenBatch hollow = b;
  for (std::size_t t = 0; t < b.trg_len; ++t) {
    hollow.trg_ids[t] = Vocabulary::kPad;
    hollow.trg_pad[t] = 1;
  }
  const PerTokenLoss h = per_token_losses(p, m, hollow, Mode::kEval);
  for (std::size_t t = 0; t < h.cols; ++t) CHECK(h.values[t] == 0.0);
  CHECK(h.tokens_in_row(0) == 0);
  CHECK_THROWS_AS(sentence_losses(h), std::invalid_argument);
}

TEST_CASE("eval mode is deterministic, train mode follows the rng") {
  const Corpus c = generate_cipher_corpus(4, 20, 2, 6, 5);
  const ModelConfig m = tiny_config(c);
  const ParameterSet p = init_model(m, 2);
  const TokenBatch b = first_rows(c, 4);
  const PerTokenLoss a = per_token_losses(p, m, b, Mode::kEval);
  const PerTokenLoss e = per_token_losses(p, m, b, Mode::kEval);
  CHECK(testing::max_abs_diff(a.values.data(), e.values.data()) == 0.0);

  Rng r1(9), r2(9), r3(10);
  const PerTokenLoss t1 = per_token_losses(p, m, b, Mode::kTrain, &r1);
  const PerTokenLoss t2 = per_token_losses(p, m, b, Mode::kTrain, &r2);
  const PerTokenLoss t3 = per_token_losses(p, m, b, Mode::kTrain, &r3);
  CHECK(testing::max_abs_diff(t1.values.data(), t2.values.data()) == 0.0);
  CHECK(testing::max_abs_diff(t1.values.data(), t3.values.data()) > 0.0);
  CHECK_THROWS(per_token_losses(p, m, b, Mode::kTrain, nullptr));
}

TEST_CASE("losses are bounded below by the smoothed-target entropy") {
  const Corpus c = generate_cipher_corpus(8, 12, 2, 6, 5);
  ModelConfig m = tiny_config(c);
  m.label_smoothing = 0.2;
  ParameterSet p = init_model(m, 2);
  // Sharpen the output layer so losses vary widely.
  const Tensor w = p.at("out.w");
  p.set("out.w", scale(w, 40.0));
  const PerTokenLoss l = per_token_losses(p, m, first_rows(c, 8), Mode::kEval);
  const double floor = smoothed_target_entropy(m.trg_vocab_size, m.label_smoothing);
  for (std::size_t i = 0; i < l.values.size(); ++i)
    if (!l.pad[i]) CHECK(l.values[i] >= floor - 1e-12);
}

TEST_CASE("sentence_losses averages non-pad tokens") {
  PerTokenLoss l;
  l.rows = 2;
  l.cols = 3;
  l.values = Tensor({2, 3}, {1.0, 3.0, 0.0, 4.2, 0.0, 0.0});
  l.pad = {0, 0, 1, 0, 1, 1};
  const Tensor s = sentence_losses(l);
  CHECK(s[0] == doctest::Approx(2.0));
  CHECK(s[1] == doctest::Approx(4.2));
}

TEST_CASE("full model gradient matches finite differences") {
  const Corpus c = generate_cipher_corpus(2, 10, 2, 4, 8);
  ModelConfig m = tiny_config(c);
  m.num_layers = 2;
  const ParameterSet p0 = init_model(m, 6);
  const TokenBatch b = first_rows(c, 2);

  auto loss_at = [&](const ParameterSet& p) {
    return sum_all(sentence_losses(per_token_losses(p, m, b, Mode::kEval)));
  };

  Tape tape;
  const ParameterSet watched = p0.watch(tape);
  const FlatGradient g = backward(loss_at(watched), watched);

  const std::vector<double> flat = p0.flatten();
  std::vector<double> numeric(flat.size());
  const double h = 1e-5;
  for (std::size_t i = 0; i < flat.size(); ++i) {
    std::vector<double> x = flat;
    x[i] = flat[i] + h;
    ParameterSet shifted = p0;
    shifted.unflatten(x);
    const double up = loss_at(shifted).item();
    x[i] = flat[i] - h;
    shifted.unflatten(x);
    const double down = loss_at(shifted).item();
    numeric[i] = (up - down) / (2 * h);
  }
  CHECK(testing::max_relative_error(g.values, numeric, 1e-3) < 1e-4);
}

TEST_CASE("greedy decoding") {
  const Corpus c = generate_cipher_corpus(3, 10, 2, 4, 8);
  const ModelConfig m = tiny_config(c);
  const ParameterSet p = init_model(m, 1);
  const std::vector<std::vector<std::size_t>> src = {{4, 5, 6}, {7}};
  const auto none = greedy_decode(p, m, src, 0);
  CHECK(none.size() == 2);
  CHECK(none[0].empty());
  const auto a = greedy_decode(p, m, src, 6), b = greedy_decode(p, m, src, 6);
  CHECK(a == b);
  for (const auto& row : a) {
    CHECK(row.size() <= 6);
    for (auto id : row) CHECK(id > Vocabulary::kEnd);
  }
}

TEST_CASE("checkpoint round trip") {
  const Corpus c = generate_cipher_corpus(3, 10, 2, 4, 8);
  const ModelConfig m = tiny_config(c);
  const ParameterSet p = init_model(m, 1);
  const auto dir = std::filesystem::temp_directory_path() / "glmask_tests";
  std::filesystem::create_directories(dir);
  const auto path = dir / "model.ckpt";

  Checkpoint ck = model_checkpoint(m, p);
  ck.config["train.step"] = "17";
  ck.tensors.emplace_back("opt.m.out.w", Tensor::zeros(p.at("out.w").shape()));
  write_checkpoint(path, ck);
  const Checkpoint back = read_checkpoint(path);
  CHECK(back.config == ck.config);
  REQUIRE(back.find("opt.m.out.w") != nullptr);
  const auto [m2, p2] = load_model(back);
  CHECK(m2 == m);
  CHECK(p2 == p);

  { std::ofstream(path, std::ios::binary) << "NOTACKPT"; }
  CHECK_THROWS(read_checkpoint(path));
  CHECK_THROWS(read_checkpoint(dir / "missing.ckpt"));
}
