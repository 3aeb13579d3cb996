#include "glmask/alignment.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

#include "glmask/ops.hpp"
#include "glmask/tape.hpp"
#include "json.hpp"

namespace glmask {

std::string to_string(Granularity g) { return g == Granularity::kSentence ? "sentence" : "word"; }

Granularity parse_granularity(const std::string& label) {
  if (label == "sent" || label == "sentence") return Granularity::kSentence;
  if (label == "word") return Granularity::kWord;
  throw std::invalid_argument("unknown granularity '" + label + "' (expected sent or word)");
}

namespace {

template <typename F>
void for_units(const AlignmentResult& r, F&& f) {
  const auto s = r.scores.data();
  for (std::size_t i = 0; i < s.size(); ++i)
    if (r.pad.empty() || !r.pad[i]) f(i, s[i]);
}

void check_layout(const FlatGradient& clean_grad, const ParameterSet& params) {
  if (clean_grad.layout != params.layout())
    throw std::invalid_argument("alignment: clean gradient layout does not match the parameters");
}

}  // namespace

std::size_t AlignmentResult::num_units() const {
  std::size_t n = 0;
  for_units(*this, [&](std::size_t, double) { ++n; });
  return n;
}

double AlignmentResult::frac_unmasked() const {
  std::size_t n = 0, kept = 0;
  for_units(*this, [&](std::size_t i, double) {
    ++n;
    kept += mask[i] != 0;
  });
  return n == 0 ? 0.0 : static_cast<double>(kept) / static_cast<double>(n);
}

double AlignmentResult::mean_score() const {
  double s = 0.0;
  std::size_t n = 0;
  for_units(*this, [&](std::size_t, double g) {
    s += g;
    ++n;
  });
  return n == 0 ? 0.0 : s / static_cast<double>(n);
}

double AlignmentResult::min_score() const {
  double m = std::numeric_limits<double>::infinity();
  for_units(*this, [&](std::size_t, double g) { m = std::min(m, g); });
  return num_units() == 0 ? 0.0 : m;
}

double AlignmentResult::max_score() const {
  double m = -std::numeric_limits<double>::infinity();
  for_units(*this, [&](std::size_t, double g) { m = std::max(m, g); });
  return num_units() == 0 ? 0.0 : m;
}

bool AlignmentResult::all_masked() const {
  return std::none_of(mask.begin(), mask.end(), [](char m) { return m != 0; });
}

AlignmentResult mask_from_scores(Tensor scores, Granularity granularity, double clean_grad_norm,
                                 std::vector<char> pad) {
  AlignmentResult r;
  r.granularity = granularity;
  r.clean_grad_norm = clean_grad_norm;
  r.rows = scores.dim() == 0 ? 1 : scores.extent(0);
  r.cols = scores.dim() >= 2 ? scores.size() / r.rows : 1;
  if (!pad.empty() && pad.size() != scores.size())
    throw ShapeError("mask_from_scores: pad mask has " + std::to_string(pad.size()) +
                     " entries for " + std::to_string(scores.size()) + " scores");

  std::vector<double> s(scores.data().begin(), scores.data().end());
  r.mask.assign(s.size(), 0);
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!pad.empty() && pad[i]) s[i] = 0.0;
    r.mask[i] = s[i] > 0.0;
  }
  r.scores = Tensor(scores.shape(), std::move(s));
  r.pad = std::move(pad);
  return r;
}

FlatGradient mean_gradient(const UnitLossFn& fn, const ParameterSet& params) {
  Tape tape;
  const ParameterSet bound = params.watch(tape);
  const Tensor units = fn(bound);
  if (units.size() == 0) throw std::invalid_argument("mean_gradient: no units");
  return backward(scale(sum_all(units), 1.0 / static_cast<double>(units.size())), bound);
}

AlignmentResult align_units(const UnitLossFn& fn, const ParameterSet& params,
                            const FlatGradient& clean_grad, Granularity granularity,
                            std::vector<char> pad) {
  check_layout(clean_grad, params);
  Tape tape;
  const ParameterSet bound = params.watch(tape);
  const Tensor units = fn(bound);
  const Tensor weights = tape.watch(Tensor::full(units.shape(), 1.0));
  const std::size_t before = tape.backward_passes();
  Tensor scores = grad_dot_per_weight(units, weights, bound, clean_grad);
  AlignmentResult r = mask_from_scores(std::move(scores), granularity, clean_grad.norm(), std::move(pad));
  r.backward_passes = tape.backward_passes() - before;
  return r;
}

AlignmentResult oracle_units(const UnitLossFn& fn, const ParameterSet& params,
                             const FlatGradient& clean_grad, Granularity granularity,
                             std::vector<char> pad) {
  check_layout(clean_grad, params);
  Tape tape;
  const ParameterSet bound = params.watch(tape);
  const Tensor units = fn(bound);
  const auto wrt = bound.tensors();
  const std::size_t before = tape.backward_passes();
  std::vector<double> scores(units.size(), 0.0);
  for (std::size_t i = 0; i < units.size(); ++i) {
    if (!pad.empty() && pad[i]) continue;
    std::vector<double> pick(units.size(), 0.0);
    pick[i] = 1.0;
    const Tensor unit = sum_all(mul(units, Tensor(units.shape(), std::move(pick))));
    if (!unit.tape()) continue;
    const FlatGradient g = FlatGradient::from_tensors(bound.layout(), tape.gradient(unit, wrt));
    scores[i] = dot(g, clean_grad);
  }
  AlignmentResult r = mask_from_scores(Tensor(units.shape(), std::move(scores)), granularity,
                                       clean_grad.norm(), std::move(pad));
  r.backward_passes = tape.backward_passes() - before;
  return r;
}

FlatGradient clean_gradient(const ParameterSet& params, const ModelConfig& config,
                            const TokenBatch& clean_batch) {
  if (clean_batch.batch == 0) throw std::invalid_argument("clean_gradient: empty clean batch");
  return mean_gradient(
      [&](const ParameterSet& bound) {
        return sentence_losses(per_token_losses(bound, config, clean_batch, Mode::kEval));
      },
      params);
}

AlignmentResult align_sentence(const ParameterSet& params, const ModelConfig& config,
                               const TokenBatch& batch, const FlatGradient& clean_grad) {
  return align_units(
      [&](const ParameterSet& bound) {
        return sentence_losses(per_token_losses(bound, config, batch, Mode::kEval));
      },
      params, clean_grad, Granularity::kSentence);
}

namespace {

std::vector<char> loss_grid_pad(const TokenBatch& batch) {
  std::vector<char> pad(batch.batch * (batch.trg_len - 1));
  for (std::size_t r = 0; r < batch.batch; ++r)
    for (std::size_t t = 0; t + 1 < batch.trg_len; ++t)
      pad[r * (batch.trg_len - 1) + t] = batch.trg_pad[r * batch.trg_len + t + 1];
  return pad;
}

UnitLossFn unit_losses(const ModelConfig& config, const TokenBatch& batch, Granularity g) {
  if (g == Granularity::kSentence)
    return [&config, &batch](const ParameterSet& bound) {
      return sentence_losses(per_token_losses(bound, config, batch, Mode::kEval));
    };
  return [&config, &batch](const ParameterSet& bound) {
    return per_token_losses(bound, config, batch, Mode::kEval).values;
  };
}

}  // namespace

AlignmentResult align_word(const ParameterSet& params, const ModelConfig& config,
                           const TokenBatch& batch, const FlatGradient& clean_grad) {
  if (batch.trg_len < 2) throw std::invalid_argument("align_word: target rows need at least two positions");
  return align_units(unit_losses(config, batch, Granularity::kWord), params, clean_grad,
                     Granularity::kWord, loss_grid_pad(batch));
}

AlignmentResult oracle_align(const ParameterSet& params, const ModelConfig& config,
                             const TokenBatch& batch, const FlatGradient& clean_grad,
                             Granularity granularity) {
  std::vector<char> pad;
  if (granularity == Granularity::kWord) pad = loss_grid_pad(batch);
  return oracle_units(unit_losses(config, batch, granularity), params, clean_grad, granularity,
                      std::move(pad));
}

std::string telemetry_line(std::size_t step, const AlignmentResult& result, bool fallback) {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["granularity"] = to_string(result.granularity);
  j["active"] = true;
  j["frac_unmasked"] = fallback ? 1.0 : result.frac_unmasked();
  j["clean_grad_norm"] = result.clean_grad_norm;
  j["mean_g"] = result.mean_score();
  j["min_g"] = result.min_score();
  j["max_g"] = result.max_score();
  if (fallback) j["fallback"] = true;
  return j.dump();
}

std::string inactive_telemetry_line(std::size_t step, Granularity granularity) {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["granularity"] = to_string(granularity);
  j["active"] = false;
  j["frac_unmasked"] = 1.0;
  return j.dump();
}

}  // namespace glmask
