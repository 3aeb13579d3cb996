#include <cmath>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "glmask/metrics.hpp"
#include "glmask/trainer.hpp"

using namespace glmask;

TEST_CASE("a small model learns the noise-free cipher") {
  const Corpus corpus = generate_cipher_corpus(3000, 12, 1, 6, 11);
  const Splits splits = split_clean(corpus, 10, 100, 100, 3);
  ModelConfig m;
  m.num_layers = 1;
  m.num_heads = 2;
  m.d_model = 32;
  m.d_ff = 64;
  m.src_vocab_size = corpus.source_vocab.size();
  m.trg_vocab_size = corpus.target_vocab.size();
  TrainConfig t;
  t.total_steps = 1000;
  t.batch_size = 32;
  t.peak_lr = 0.01;
  t.warmup_steps = 100;
  t.checkpoint_every = 1000;
  RunOptions o;
  o.out_dir = std::filesystem::temp_directory_path() / "glmask_tests" / "converge";
  const RunResult r = run_training(m, t, splits.train, nullptr, init_model(m, 1), o);

  const Translation tr = translate(r.params, m, splits.test);
  CHECK(tr.accuracy.value() > 0.99);
  CHECK(tr.hypotheses[0] == tr.references[0]);
  if (tr.accuracy.value() == 1.0) CHECK(corpus_bleu(tr.hypotheses, tr.references).smoothed > 99.0);
}

TEST_CASE("untrained models decode at chance level") {
  // Tokens decoded by one model are correlated, so the spread is measured
  // across independently initialised models.
  const Corpus corpus = generate_cipher_corpus(200, 64, 3, 10, 5);
  ModelConfig m;
  m.num_layers = 1;
  m.num_heads = 2;
  m.d_model = 16;
  m.d_ff = 32;
  m.src_vocab_size = corpus.source_vocab.size();
  m.trg_vocab_size = corpus.target_vocab.size();
  std::vector<double> acc;
  for (std::uint64_t seed = 1; seed <= 12; ++seed) acc.push_back(token_accuracy(init_model(m, seed), m, corpus));
  const double k = static_cast<double>(acc.size());
  const double mean = std::accumulate(acc.begin(), acc.end(), 0.0) / k;
  double ss = 0.0;
  for (double a : acc) ss += (a - mean) * (a - mean);
  const double se = std::sqrt(ss / (k - 1) / k);
  MESSAGE("mean accuracy " << mean << ", standard error " << se);
  CHECK(std::abs(mean - 1.0 / 64.0) < 3.0 * se);
}
