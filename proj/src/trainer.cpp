#include "glmask/trainer.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "glmask/metrics.hpp"
#include "glmask/ops.hpp"
#include "glmask/tape.hpp"
#include "json.hpp"

namespace glmask {

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::kVanilla: return "vanilla";
    case TrainMode::kFinetune: return "finetune";
    case TrainMode::kGlmaskSent: return "glmask-sent";
    case TrainMode::kGlmaskWord: return "glmask-word";
  }
  return "?";
}

TrainMode parse_train_mode(const std::string& label) {
  std::string s = label;
  for (auto& c : s)
    if (c == '_') c = '-';
  if (s == "vanilla") return TrainMode::kVanilla;
  if (s == "finetune") return TrainMode::kFinetune;
  if (s == "glmask-sent") return TrainMode::kGlmaskSent;
  if (s == "glmask-word") return TrainMode::kGlmaskWord;
  throw ConfigError("unknown training mode '" + label +
                    "' (expected vanilla, finetune, glmask-sent or glmask-word)");
}

std::string to_string(SkipPolicy p) { return p == SkipPolicy::kSkip ? "skip" : "zero_update"; }

SkipPolicy parse_skip_policy(const std::string& label) {
  if (label == "skip") return SkipPolicy::kSkip;
  if (label == "zero_update" || label == "zero-update") return SkipPolicy::kZeroUpdate;
  throw ConfigError("unknown skip policy '" + label + "' (expected skip or zero_update)");
}

bool is_glmask(TrainMode m) { return m == TrainMode::kGlmaskSent || m == TrainMode::kGlmaskWord; }

Granularity granularity_of(TrainMode m) {
  return m == TrainMode::kGlmaskWord ? Granularity::kWord : Granularity::kSentence;
}

std::vector<std::string> TrainConfig::violations() const {
  std::vector<std::string> out;
  if (total_steps < 1) out.push_back("total_steps must be >= 1");
  if (batch_size < 1) out.push_back("batch_size must be >= 1");
  if (!(glmask_start_fraction >= 0.0 && glmask_start_fraction <= 1.0))
    out.push_back("glmask_start_fraction must be in [0, 1]");
  if (!(peak_lr > 0.0)) out.push_back("peak_lr must be > 0");
  if (warmup_steps < 1) out.push_back("warmup_steps must be >= 1");
  if (checkpoint_every < 1) out.push_back("checkpoint_every must be >= 1");
  if (max_len < 1) out.push_back("max_len must be >= 1");
  if (!(finetune_fraction > 0.0 && finetune_fraction <= 1.0)) out.push_back("finetune_fraction must be in (0, 1]");
  if (!(finetune_lr_scale > 0.0)) out.push_back("finetune_lr_scale must be > 0");
  return out;
}

void TrainConfig::validate() const {
  const auto v = violations();
  if (v.empty()) return;
  std::string msg = "invalid training config:";
  for (const auto& s : v) msg += "\n  - " + s;
  throw ConfigError(msg);
}

std::map<std::string, std::string> TrainConfig::to_map() const {
  return {
      {"train.total_steps", std::to_string(total_steps)},
      {"train.batch_size", std::to_string(batch_size)},
      {"train.mode", to_string(mode)},
      {"train.glmask_start_fraction", format_real(glmask_start_fraction)},
      {"train.peak_lr", format_real(peak_lr)},
      {"train.warmup_steps", std::to_string(warmup_steps)},
      {"train.seed", std::to_string(seed)},
      {"train.checkpoint_every", std::to_string(checkpoint_every)},
      {"train.skip_policy", to_string(skip_policy)},
      {"train.max_len", std::to_string(max_len)},
      {"train.finetune_fraction", format_real(finetune_fraction)},
      {"train.finetune_lr_scale", format_real(finetune_lr_scale)},
      {"train.dev_eval_size", std::to_string(dev_eval_size)},
  };
}

TrainConfig TrainConfig::from_map(const std::map<std::string, std::string>& kv) {
  TrainConfig c;
  c.total_steps = get_size(kv, "train.total_steps", c.total_steps);
  c.batch_size = get_size(kv, "train.batch_size", c.batch_size);
  c.mode = parse_train_mode(get_string(kv, "train.mode", to_string(c.mode)));
  c.glmask_start_fraction = get_real(kv, "train.glmask_start_fraction", c.glmask_start_fraction);
  c.peak_lr = get_real(kv, "train.peak_lr", c.peak_lr);
  c.warmup_steps = get_size(kv, "train.warmup_steps", c.warmup_steps);
  c.seed = get_u64(kv, "train.seed", c.seed);
  c.checkpoint_every = get_size(kv, "train.checkpoint_every", c.checkpoint_every);
  c.skip_policy = parse_skip_policy(get_string(kv, "train.skip_policy", to_string(c.skip_policy)));
  c.max_len = get_size(kv, "train.max_len", c.max_len);
  c.finetune_fraction = get_real(kv, "train.finetune_fraction", c.finetune_fraction);
  c.finetune_lr_scale = get_real(kv, "train.finetune_lr_scale", c.finetune_lr_scale);
  c.dev_eval_size = get_size(kv, "train.dev_eval_size", c.dev_eval_size);
  return c;
}

std::size_t glmask_start_step(const TrainConfig& config) {
  return static_cast<std::size_t>(
      std::floor(config.glmask_start_fraction * static_cast<double>(config.total_steps)));
}

bool glmask_active(std::size_t step, const TrainConfig& config) {
  return is_glmask(config.mode) && step >= glmask_start_step(config);
}

double learning_rate(std::size_t update, double peak, std::size_t warmup) {
  const double s = static_cast<double>(std::max<std::size_t>(update, 1));
  const double w = static_cast<double>(std::max<std::size_t>(warmup, 1));
  return s <= w ? peak * s / w : peak * std::sqrt(w / s);
}

void adam_update(ParameterSet& params, AdamState& state, const FlatGradient& grad, double lr) {
  const std::size_t n = params.num_values();
  if (grad.values.size() != n || grad.layout != params.layout())
    throw std::invalid_argument("adam_update: gradient layout does not match the parameters");
  if (state.m.empty()) {
    state.m.assign(n, 0.0);
    state.v.assign(n, 0.0);
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.t));
  std::vector<double> flat = params.flatten();
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grad.values[i];
    state.m[i] = kAdamBeta1 * state.m[i] + (1.0 - kAdamBeta1) * g;
    state.v[i] = kAdamBeta2 * state.v[i] + (1.0 - kAdamBeta2) * g * g;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    flat[i] -= lr * m_hat / (std::sqrt(v_hat) + kAdamEps);
  }
  params.unflatten(flat);
}

Tensor masked_objective(const PerTokenLoss& losses, const AlignmentResult* alignment) {
  const std::size_t rows = losses.rows, cols = losses.cols;
  if (alignment) {
    const bool word = alignment->granularity == Granularity::kWord;
    if (alignment->rows != rows || (word && alignment->cols != cols))
      throw ShapeError("masked_objective: alignment shape does not match the loss grid");
  }
  std::vector<double> w(rows * cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t n = losses.tokens_in_row(r);
    if (n == 0) continue;
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t t = 0; t < cols; ++t) {
      if (losses.pad[r * cols + t]) continue;
      double keep = 1.0;
      if (alignment)
        keep = alignment->granularity == Granularity::kWord ? alignment->mask[r * cols + t]
                                                            : alignment->mask[r];
      w[r * cols + t] = keep * inv;
    }
  }
  const Tensor per_row = sum_last(mul(losses.values, Tensor({rows, cols}, std::move(w))));
  return scale(sum_all(per_row), 1.0 / static_cast<double>(rows));
}

namespace {

std::uint64_t clean_stream_seed(std::uint64_t seed) {
  return mix_seed(seed, static_cast<std::uint64_t>(Stream::kClean));
}

std::string with_event(const std::string& line, const char* key, const std::string& value) {
  auto j = nlohmann::ordered_json::parse(line);
  j[key] = value;
  return j.dump();
}

std::size_t state_value(const Checkpoint& ckpt, const std::string& key) {
  auto it = ckpt.config.find(key);
  if (it == ckpt.config.end()) throw std::runtime_error("checkpoint lacks '" + key + "'");
  return get_size(ckpt.config, key, 0);
}

}  // namespace

Trainer::Trainer(ModelConfig model, TrainConfig config, const Corpus& train, const Corpus* clean,
                 ParameterSet params)
    : model_(std::move(model)),
      config_(std::move(config)),
      params_(std::move(params)),
      train_stream_(train, config_.batch_size, config_.max_len, config_.seed) {
  model_.validate();
  config_.validate();
  if (is_glmask(config_.mode)) {
    if (!clean || clean->empty())
      throw ConfigError("mode " + to_string(config_.mode) + " needs a non-empty clean split");
    clean_stream_.emplace(*clean, config_.batch_size, config_.max_len, clean_stream_seed(config_.seed));
  }
}

StepReport Trainer::step(const ScoreOverride& override_scores) {
  if (finished()) throw std::logic_error("Trainer::step: all steps are done");
  StepReport report;
  report.step = step_;
  const TokenBatch batch = train_stream_.next();
  report.active = glmask_active(step_, config_);

  if (report.active) {
    const Granularity g = granularity_of(config_.mode);
    const TokenBatch clean_batch = clean_stream_->next();
    const FlatGradient clean_grad = clean_gradient(params_, model_, clean_batch);
    const double norm = clean_grad.norm();
    if (norm < kMinCleanGradNorm) {
      report.fallback = true;
      AlignmentResult empty;
      empty.granularity = g;
      empty.clean_grad_norm = norm;
      empty.scores = Tensor::zeros({1});
      empty.pad = {1};
      empty.mask = {0};
      report.telemetry = telemetry_line(step_, empty, true);
    } else {
      AlignmentResult r = g == Granularity::kWord ? align_word(params_, model_, batch, clean_grad)
                                                  : align_sentence(params_, model_, batch, clean_grad);
      if (override_scores) {
        const std::size_t passes = r.backward_passes;
        r = mask_from_scores(override_scores(r.scores), g, norm, r.pad);
        r.backward_passes = passes;
      }
      report.all_masked = r.all_masked();
      report.telemetry = telemetry_line(step_, r);
      if (report.all_masked)
        report.telemetry = with_event(report.telemetry, "all_masked", to_string(config_.skip_policy));
      report.alignment = std::move(r);
    }
  } else if (is_glmask(config_.mode)) {
    report.telemetry = inactive_telemetry_line(step_, granularity_of(config_.mode));
  }

  const double lr = learning_rate(opt_.t + 1, config_.peak_lr, config_.warmup_steps);
  if (report.all_masked) {
    if (config_.skip_policy == SkipPolicy::kZeroUpdate) {
      adam_update(params_, opt_, FlatGradient::zeros(params_.layout()), lr);
      report.updated = true;
    }
  } else {
    Tape tape;
    const ParameterSet bound = params_.watch(tape);
    Rng dropout(config_.seed, Stream::kDropout, step_);
    const PerTokenLoss losses = per_token_losses(bound, model_, batch, Mode::kTrain, &dropout);
    const Tensor objective =
        masked_objective(losses, report.alignment ? &*report.alignment : nullptr);
    report.loss = objective.item();
    adam_update(params_, opt_, backward(objective, bound), lr);
    report.updated = true;
  }
  ++step_;
  return report;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ck = model_checkpoint(model_, params_);
  for (const auto& [k, v] : config_.to_map()) ck.config[k] = v;
  ck.config["state.step"] = std::to_string(step_);
  ck.config["state.adam_t"] = std::to_string(opt_.t);
  ck.config["state.train_epoch"] = std::to_string(train_stream_.epoch());
  ck.config["state.train_offset"] = std::to_string(train_stream_.offset());
  if (clean_stream_) {
    ck.config["state.clean_epoch"] = std::to_string(clean_stream_->epoch());
    ck.config["state.clean_offset"] = std::to_string(clean_stream_->offset());
  }
  const Layout layout = params_.layout();
  const std::size_t n = params_.num_values();
  const std::vector<double> zeros(n, 0.0);
  for (const char* which : {"m", "v"}) {
    const std::vector<double>& src = opt_.m.empty() ? zeros : (which[0] == 'm' ? opt_.m : opt_.v);
    std::size_t offset = 0;
    for (const auto& [name, shape] : layout) {
      const std::size_t size = shape_size(shape);
      ck.tensors.emplace_back(std::string("opt.") + which + "." + name,
                              Tensor(shape, std::vector<double>(src.begin() + static_cast<long>(offset),
                                                                src.begin() + static_cast<long>(offset + size))));
      offset += size;
    }
  }
  return ck;
}

void Trainer::restore(const Checkpoint& ckpt, bool allow_mode_change) {
  auto [model, params] = load_model(ckpt);
  if (!(model == model_)) throw ConfigError("checkpoint model configuration differs from this run");
  TrainConfig saved = TrainConfig::from_map(ckpt.config);
  if (allow_mode_change) saved.mode = config_.mode;
  if (!(saved == config_)) throw ConfigError("checkpoint training configuration differs from this run");

  params_ = std::move(params);
  step_ = state_value(ckpt, "state.step");
  opt_.t = state_value(ckpt, "state.adam_t");
  opt_.m.clear();
  opt_.v.clear();
  for (const auto& [name, shape] : params_.layout()) {
    const Tensor* m = ckpt.find("opt.m." + name);
    const Tensor* v = ckpt.find("opt.v." + name);
    if (!m || !v) throw std::runtime_error("checkpoint lacks optimizer moments for '" + name + "'");
    opt_.m.insert(opt_.m.end(), m->data().begin(), m->data().end());
    opt_.v.insert(opt_.v.end(), v->data().begin(), v->data().end());
  }
  train_stream_.seek(state_value(ckpt, "state.train_epoch"), state_value(ckpt, "state.train_offset"));
  if (clean_stream_) {
    if (ckpt.config.count("state.clean_epoch"))
      clean_stream_->seek(state_value(ckpt, "state.clean_epoch"), state_value(ckpt, "state.clean_offset"));
    else
      clean_stream_->seek(0, 0);
  }
}

TrainConfig finetune_config(const TrainConfig& config) {
  TrainConfig ft = config;
  ft.mode = TrainMode::kFinetune;
  ft.total_steps = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::floor(config.finetune_fraction * static_cast<double>(config.total_steps))));
  ft.peak_lr = config.peak_lr * config.finetune_lr_scale;
  ft.warmup_steps = std::max<std::size_t>(1, ft.total_steps / 10);
  ft.checkpoint_every = std::min(config.checkpoint_every, ft.total_steps);
  return ft;
}

namespace {

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::vector<std::string> out;
  std::ifstream in(path);
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(line);
  return out;
}

// Drops telemetry records at or after `step` so a resumed run rewrites them.
void truncate_telemetry(const std::filesystem::path& path, std::size_t step) {
  if (!std::filesystem::exists(path)) return;
  std::vector<std::string> keep;
  for (const auto& line : read_lines(path))
    if (nlohmann::json::parse(line).at("step").get<std::size_t>() < step) keep.push_back(line);
  std::ofstream out(path, std::ios::trunc);
  for (const auto& line : keep) out << line << '\n';
}

}  // namespace

RunResult run_training(const ModelConfig& model, const TrainConfig& config, const Corpus& train,
                       const Corpus* clean, ParameterSet init, const RunOptions& options) {
  const bool finetune = config.mode == TrainMode::kFinetune;
  const TrainConfig effective = finetune ? finetune_config(config) : config;
  if (finetune) {
    if (!options.init_checkpoint) throw ConfigError("finetune needs a vanilla checkpoint to start from");
    if (!clean || clean->empty()) throw ConfigError("finetune needs a non-empty clean split");
  }
  if (options.init_checkpoint) {
    if (!std::filesystem::exists(*options.init_checkpoint))
      throw std::runtime_error("initial checkpoint " + options.init_checkpoint->string() + " does not exist");
    auto [m, p] = load_model(read_checkpoint(*options.init_checkpoint));
    if (!(m == model)) throw ConfigError("initial checkpoint model configuration differs from this run");
    init = std::move(p);
  }

  std::filesystem::create_directories(options.out_dir);
  Trainer trainer(model, effective, finetune ? *clean : train, clean, std::move(init));
  const auto telemetry_path = options.out_dir / "telemetry.jsonl";
  const auto metrics_path = options.out_dir / "metrics.jsonl";

  if (options.resume_from || options.branch_from) {
    const auto& from = options.resume_from ? *options.resume_from : *options.branch_from;
    trainer.restore(read_checkpoint(from), options.branch_from.has_value());
    truncate_telemetry(telemetry_path, trainer.step_index());
    truncate_telemetry(metrics_path, trainer.step_index() + 1);
  } else {
    std::filesystem::remove(telemetry_path);
    std::filesystem::remove(metrics_path);
  }

  std::ofstream telemetry;
  if (is_glmask(effective.mode)) telemetry.open(telemetry_path, std::ios::app);
  std::ofstream metrics(metrics_path, std::ios::app);

  RunResult result;
  const std::size_t stop = options.stop_at == 0 ? effective.total_steps
                                                : std::min(options.stop_at, effective.total_steps);
  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  while (trainer.step_index() < stop) {
    const StepReport r = trainer.step(options.override_scores);
    if (!r.telemetry.empty()) telemetry << r.telemetry << '\n';
    if (r.updated && !r.all_masked) {
      loss_sum += r.loss;
      ++loss_count;
    }
    const std::size_t done = trainer.step_index();
    const bool at_end = done == effective.total_steps;
    if (done % effective.checkpoint_every == 0 || at_end) {
      telemetry.flush();
      const Checkpoint ck = trainer.checkpoint();
      write_checkpoint(options.out_dir / ("step_" + std::to_string(done) + ".ckpt"), ck);
      nlohmann::ordered_json j;
      j["step"] = done;
      j["mode"] = to_string(effective.mode);
      j["train_loss"] = loss_count == 0 ? 0.0 : loss_sum / static_cast<double>(loss_count);
      if (options.dev) {
        const double acc = token_accuracy(trainer.params(), model, *options.dev, effective.dev_eval_size);
        j["dev_token_accuracy"] = acc;
        result.dev_accuracy.emplace_back(done, acc);
      }
      metrics << j.dump() << '\n';
      metrics.flush();
      if (options.log) *options.log << j.dump() << std::endl;
      loss_sum = 0.0;
      loss_count = 0;
    }
  }

  const Checkpoint ck = trainer.checkpoint();
  result.final_checkpoint = options.out_dir / (trainer.finished() ? "final.ckpt" : "partial.ckpt");
  write_checkpoint(result.final_checkpoint, ck);
  result.params = trainer.params();
  result.final_step = trainer.step_index();
  return result;
}

}  // namespace glmask
