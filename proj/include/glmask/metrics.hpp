#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "glmask/data.hpp"
#include "glmask/model.hpp"

namespace glmask {

struct BleuScore {
  double smoothed = 0.0;    // add-one on 2..4-gram precisions
  double unsmoothed = 0.0;
};

/// Corpus-level 4-gram BLEU in [0, 100] with brevity penalty.
BleuScore corpus_bleu(const std::vector<Tokens>& hypotheses, const std::vector<Tokens>& references);

struct AccuracyCount {
  std::size_t matched = 0;
  std::size_t total = 0;
  double value() const { return total == 0 ? 0.0 : static_cast<double>(matched) / static_cast<double>(total); }
};

/// Position-wise exact match of a hypothesis against its reference,
/// truncated or padded to the reference length. Empty references count nothing.
AccuracyCount token_matches(const std::vector<std::size_t>& hypothesis,
                            const std::vector<std::size_t>& reference);

struct Translation {
  std::vector<Tokens> hypotheses;
  std::vector<Tokens> references;
  AccuracyCount accuracy;
};

/// Greedy-decodes every pair of `corpus` (or its first `limit` pairs) and
/// scores token accuracy. Decoding may run up to `extra_len` past each reference.
Translation translate(const ParameterSet& params, const ModelConfig& config, const Corpus& corpus,
                      std::size_t limit = 0, std::size_t extra_len = 5);

double token_accuracy(const ParameterSet& params, const ModelConfig& config, const Corpus& corpus,
                      std::size_t limit = 0);

}  // namespace glmask
