#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "glmask/alignment.hpp"
#include "glmask/data.hpp"
#include "glmask/model.hpp"

namespace glmask {

enum class TrainMode { kVanilla, kFinetune, kGlmaskSent, kGlmaskWord };
enum class SkipPolicy { kSkip, kZeroUpdate };

std::string to_string(TrainMode m);
TrainMode parse_train_mode(const std::string& label);  // accepts '-' or '_'
std::string to_string(SkipPolicy p);
SkipPolicy parse_skip_policy(const std::string& label);

bool is_glmask(TrainMode m);
Granularity granularity_of(TrainMode m);

struct TrainConfig {
  std::size_t total_steps = 6000;
  std::size_t batch_size = 32;
  TrainMode mode = TrainMode::kVanilla;
  double glmask_start_fraction = 0.8;
  double peak_lr = 1e-3;
  std::size_t warmup_steps = 400;
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 1000;
  SkipPolicy skip_policy = SkipPolicy::kSkip;
  std::size_t max_len = 64;
  /// Finetune runs this share of total_steps on the clean split...
  double finetune_fraction = 0.1;
  /// ...at this multiple of the peak learning rate.
  double finetune_lr_scale = 0.1;
  /// Dev pairs decoded at each checkpoint; 0 decodes the whole dev split.
  std::size_t dev_eval_size = 200;

  std::vector<std::string> violations() const;
  void validate() const;

  /// "train.<field>" keys.
  std::map<std::string, std::string> to_map() const;
  static TrainConfig from_map(const std::map<std::string, std::string>& kv);

  bool operator==(const TrainConfig&) const = default;
};

std::size_t glmask_start_step(const TrainConfig& config);
bool glmask_active(std::size_t step, const TrainConfig& config);

/// Linear warmup to `peak` over `warmup` updates, then peak * sqrt(warmup / update).
/// `update` counts from 1.
double learning_rate(std::size_t update, double peak, std::size_t warmup);

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.98;
inline constexpr double kAdamEps = 1e-9;

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t t = 0;  // updates applied so far
};

/// One bias-corrected adaptive-moment step in place.
void adam_update(ParameterSet& params, AdamState& state, const FlatGradient& grad, double lr);

/// (1/B) * sum_i sum_t keep[i,t] * loss[i,t] / n_i, where n_i is row i's
/// token count. keep is 1 without an alignment, the sentence mask broadcast
/// over the row, or the word mask. The denominator never depends on the mask.
Tensor masked_objective(const PerTokenLoss& losses, const AlignmentResult* alignment);

/// Test hook: rewrites alignment scores before the mask is derived.
using ScoreOverride = std::function<Tensor(const Tensor& scores)>;

struct StepReport {
  std::size_t step = 0;
  bool active = false;
  bool updated = false;
  bool fallback = false;
  bool all_masked = false;
  double loss = 0.0;
  std::optional<AlignmentResult> alignment;
  std::string telemetry;  // empty for non-glmask modes
};

class Trainer {
 public:
  /// `clean` may be null unless the mode is a glmask mode. Both corpora must
  /// outlive the trainer.
  Trainer(ModelConfig model, TrainConfig config, const Corpus& train, const Corpus* clean,
          ParameterSet params);

  StepReport step(const ScoreOverride& override_scores = {});

  std::size_t step_index() const { return step_; }
  bool finished() const { return step_ >= config_.total_steps; }
  const ParameterSet& params() const { return params_; }
  const AdamState& optimizer() const { return opt_; }
  const ModelConfig& model_config() const { return model_; }
  const TrainConfig& train_config() const { return config_; }

  /// Parameters, moments ("opt.m.*", "opt.v.*"), step and stream positions.
  Checkpoint checkpoint() const;
  /// Restores a checkpoint of this run. With `allow_mode_change` a run of a
  /// different mode (same everything else) may be continued, which is how a
  /// glmask run branches off a vanilla run that shares its first steps.
  void restore(const Checkpoint& ckpt, bool allow_mode_change = false);

 private:
  ModelConfig model_;
  TrainConfig config_;
  ParameterSet params_;
  AdamState opt_;
  BatchStream train_stream_;
  std::optional<BatchStream> clean_stream_;
  std::size_t step_ = 0;
};

struct RunOptions {
  std::filesystem::path out_dir;
  /// Dev split for periodic token accuracy; skipped when null.
  const Corpus* dev = nullptr;
  /// Receives one JSON object per dev evaluation.
  std::ostream* log = nullptr;
  /// Continue a run of the same configuration from this checkpoint.
  std::optional<std::filesystem::path> resume_from;
  /// Continue from a checkpoint of a run that differs only in mode.
  std::optional<std::filesystem::path> branch_from;
  /// Model to start from; required for finetune.
  std::optional<std::filesystem::path> init_checkpoint;
  /// Stop (with a checkpoint) once this many steps are done; 0 runs to the end.
  std::size_t stop_at = 0;
  ScoreOverride override_scores;
};

struct RunResult {
  ParameterSet params;
  std::size_t final_step = 0;
  std::vector<std::pair<std::size_t, double>> dev_accuracy;
  std::filesystem::path final_checkpoint;
};

/// The effective configuration a finetune run uses: a share of the budget on
/// the clean split, lower peak rate, short warmup.
TrainConfig finetune_config(const TrainConfig& config);

/// Writes step_<n>.ckpt every checkpoint_every steps, final.ckpt at the end,
/// telemetry.jsonl for glmask modes and metrics.jsonl for dev evaluations.
RunResult run_training(const ModelConfig& model, const TrainConfig& config, const Corpus& train,
                       const Corpus* clean, ParameterSet init, const RunOptions& options);

}  // namespace glmask
