#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "glmask/autodiff.hpp"
#include "glmask/config.hpp"
#include "glmask/data.hpp"
#include "glmask/rng.hpp"

namespace glmask {

struct ModelConfig {
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  std::size_t d_model = 64;
  std::size_t d_ff = 256;
  std::size_t src_vocab_size = 0;
  std::size_t trg_vocab_size = 0;
  double dropout_rate = 0.1;
  double label_smoothing = 0.1;
  std::size_t max_positions = 256;

  /// Human-readable list of every invalid field; empty when valid.
  std::vector<std::string> violations() const;
  void validate() const;

  /// "model.<field>" keys.
  std::map<std::string, std::string> to_map() const;
  static ModelConfig from_map(const std::map<std::string, std::string>& kv);

  bool operator==(const ModelConfig&) const = default;
};

/// Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit layer-norm gains,
/// Uniform(+-1/sqrt(d_model)) embeddings. Deterministic in (config, seed).
ParameterSet init_model(const ModelConfig& config, std::uint64_t seed);

enum class Mode { kTrain, kEval };

/// Teacher-forced token losses. Column t scores the prediction of target
/// token t+1 from tokens 0..t, so there are trg_len - 1 columns.
struct PerTokenLoss {
  Tensor values;           // [rows, cols], exactly 0 at pad positions
  std::vector<char> pad;   // [rows, cols]
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t tokens_in_row(std::size_t r) const;
  std::size_t total_tokens() const;
};

/// `rng` is required in train mode (dropout) and ignored in eval mode.
PerTokenLoss per_token_losses(const ParameterSet& params, const ModelConfig& config,
                              const TokenBatch& batch, Mode mode, Rng* rng = nullptr);

/// Mean of the non-pad token losses of each row; shape [rows].
Tensor sentence_losses(const PerTokenLoss& losses);

/// Autoregressive argmax decoding. Returned sequences exclude the begin and
/// end markers; decoding of a row stops at the end marker or `max_len`.
std::vector<std::vector<std::size_t>> greedy_decode(
    const ParameterSet& params, const ModelConfig& config,
    const std::vector<std::vector<std::size_t>>& sources, std::size_t max_len);

/// Sectioned binary checkpoint: "GLMASK1" magic, a key=value text block,
/// a layout listing, then little-endian doubles in layout order.
struct Checkpoint {
  std::map<std::string, std::string> config;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

Checkpoint model_checkpoint(const ModelConfig& config, const ParameterSet& params);
/// Model parameters are the tensors whose names do not start with "opt.".
std::pair<ModelConfig, ParameterSet> load_model(const Checkpoint& ckpt);

}  // namespace glmask
