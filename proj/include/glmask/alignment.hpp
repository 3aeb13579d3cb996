#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "glmask/autodiff.hpp"
#include "glmask/model.hpp"

namespace glmask {

enum class Granularity { kSentence, kWord };

std::string to_string(Granularity g);
Granularity parse_granularity(const std::string& label);  // "sent"/"sentence"/"word"

/// Clean-gradient norms below this make every sign meaningless; the trainer
/// falls back to unmasked training for that step.
inline constexpr double kMinCleanGradNorm = 1e-8;

struct AlignmentResult {
  Tensor scores;           // [rows] or [rows, cols]
  std::vector<char> mask;  // 1 where scores > 0
  std::vector<char> pad;   // word level only; empty for sentences
  std::size_t rows = 0;
  std::size_t cols = 1;
  Granularity granularity = Granularity::kSentence;
  double clean_grad_norm = 0.0;
  std::size_t backward_passes = 0;

  /// Share of non-pad units left unmasked.
  double frac_unmasked() const;
  std::size_t num_units() const;
  /// Mean, min and max score over non-pad units.
  double mean_score() const;
  double min_score() const;
  double max_score() const;
  bool all_masked() const;
};

/// Applies the strict rule mask = (score > 0); pad units are masked with a
/// score of exactly zero.
AlignmentResult mask_from_scores(Tensor scores, Granularity granularity, double clean_grad_norm,
                                 std::vector<char> pad = {});

/// Builds per-unit losses on the tape that `bound` parameters live on.
using UnitLossFn = std::function<Tensor(const ParameterSet& bound)>;

/// Gradient of the mean of the units produced by `fn`.
FlatGradient mean_gradient(const UnitLossFn& fn, const ParameterSet& params);

/// Scores every unit through dummy weights in two reverse sweeps.
AlignmentResult align_units(const UnitLossFn& fn, const ParameterSet& params,
                            const FlatGradient& clean_grad, Granularity granularity,
                            std::vector<char> pad = {});

/// Scores every unit with its own reverse sweep. Verification only.
AlignmentResult oracle_units(const UnitLossFn& fn, const ParameterSet& params,
                             const FlatGradient& clean_grad, Granularity granularity,
                             std::vector<char> pad = {});

/// Gradient of the mean sentence loss over a clean batch, dropout off.
FlatGradient clean_gradient(const ParameterSet& params, const ModelConfig& config,
                            const TokenBatch& clean_batch);

AlignmentResult align_sentence(const ParameterSet& params, const ModelConfig& config,
                               const TokenBatch& batch, const FlatGradient& clean_grad);
AlignmentResult align_word(const ParameterSet& params, const ModelConfig& config,
                           const TokenBatch& batch, const FlatGradient& clean_grad);
AlignmentResult oracle_align(const ParameterSet& params, const ModelConfig& config,
                             const TokenBatch& batch, const FlatGradient& clean_grad,
                             Granularity granularity);

/// One JSON object per line:
/// {step, granularity, frac_unmasked, clean_grad_norm, mean_g, min_g, max_g}.
/// `fallback` is added when the step trained unmasked because of a tiny
/// clean gradient, `active` = false marks steps before the schedule starts.
std::string telemetry_line(std::size_t step, const AlignmentResult& result, bool fallback = false);
std::string inactive_telemetry_line(std::size_t step, Granularity granularity);

}  // namespace glmask
