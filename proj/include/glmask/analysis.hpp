#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "glmask/alignment.hpp"
#include "glmask/data.hpp"
#include "glmask/model.hpp"

namespace glmask {

struct WordCount {
  std::size_t masked = 0;
  std::size_t seen = 0;
};

struct PositionCount {
  std::size_t masked = 0;
  std::size_t seen = 0;
  double rate() const { return seen == 0 ? 0.0 : static_cast<double>(masked) / static_cast<double>(seen); }
};

/// Units are target words; the end-of-sentence prediction is not a word and
/// is left out of every count here.
struct MaskingStats {
  Granularity granularity = Granularity::kWord;
  std::map<std::size_t, double> per_sentence;        // pair id -> unmasked fraction
  std::map<std::size_t, Provenance> provenance;      // pair id -> label
  std::map<std::string, WordCount> per_word;
  std::map<std::string, double> per_provenance_mean; // label -> mean unmasked fraction
  std::size_t n_sentences = 0;
  /// Within junk sentences: positions the generator overwrote vs the rest.
  PositionCount corrupted;
  PositionCount uncorrupted;
  double clean_grad_norm = 0.0;
};

/// Unmasked share of `mask` (1 = kept); rows with no units count as 0.
double unmasked_fraction(const std::vector<char>& mask);

/// Gradient of the mean sentence loss over every pair of `clean`.
FlatGradient full_clean_gradient(const ParameterSet& params, const ModelConfig& config,
                                 const Corpus& clean, std::size_t batch_size = 64);

/// Aligns every pair of `subset` against the full clean gradient in eval mode.
/// Batches are scored in parallel; results merge in input order.
MaskingStats score_corpus(const ParameterSet& params, const ModelConfig& config, const Corpus& subset,
                          const Corpus& clean, Granularity granularity, std::size_t batch_size = 32);

/// Fills per_provenance_mean from per_sentence and provenance.
void summarize_provenance(MaskingStats& stats);

struct ProvenanceRow {
  std::string label;  // provenance name or "all"
  double mean_unmasked = 0.0;
  std::size_t count = 0;
};

/// One row per provenance present, then "all".
std::vector<ProvenanceRow> provenance_comparison(const MaskingStats& stats);

struct WordMaskProfile {
  std::string word;
  double mask_rate = 0.0;
  bool is_alphabetical = false;
  std::size_t count = 0;
};

struct ExtremeWords {
  std::vector<WordMaskProfile> top;     // highest mask rate first
  std::vector<WordMaskProfile> bottom;  // lowest mask rate first
  std::size_t eligible = 0;
  bool truncated = false;  // fewer than k eligible words
};

/// Ranks words seen at least `min_count` times. Ties go to the more frequent
/// word, then lexicographic order.
ExtremeWords extreme_word_profiles(const MaskingStats& stats, std::size_t k, std::size_t min_count = 5);

/// True iff every character of `word` is a letter. UTF-8 aware.
bool is_alphabetical(const std::string& word);
/// Percentage (0-100) of alphabetical words in `words`.
double alphabetical_percentage(const std::vector<WordMaskProfile>& words);

/// Target tokens with masked ones wrapped as ⟦word⟧.
std::string render_masked(const Tokens& target, const std::vector<char>& kept);

/// Word-level masks for the first `n` pairs of `pairs`, rendered one block per pair.
std::vector<std::string> dump_masked_examples(const ParameterSet& params, const ModelConfig& config,
                                              const Corpus& pairs, const FlatGradient& clean_grad,
                                              std::size_t n);

struct ReportInputs {
  MaskingStats stats;
  ExtremeWords words;
  std::vector<std::string> examples;
};

/// stats.json, provenance.csv, word_profiles.csv, examples.txt, plotdata/*.csv.
void write_report(const std::filesystem::path& dir, const ReportInputs& report);

}  // namespace glmask
