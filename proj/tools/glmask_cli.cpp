// glmask: data generation, training, evaluation, analysis and self-checks.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "glmask/analysis.hpp"
#include "glmask/config.hpp"
#include "glmask/metrics.hpp"
#include "glmask/trainer.hpp"
#include "glmask/verify.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace glmask;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

ConfigMap dataset_to_map(const DatasetSpec& d) {
  return {{"data.n", std::to_string(d.n)},
          {"data.vocab", std::to_string(d.vocab)},
          {"data.min_len", std::to_string(d.min_len)},
          {"data.max_len", std::to_string(d.max_len)},
          {"data.n_clean", std::to_string(d.n_clean)},
          {"data.n_dev", std::to_string(d.n_dev)},
          {"data.n_test", std::to_string(d.n_test)},
          {"data.noise_copied", format_real(d.copied_rate)},
          {"data.noise_misaligned", format_real(d.misaligned_rate)},
          {"data.noise_junk", format_real(d.junk_rate)},
          {"data.seed", std::to_string(d.seed)}};
}

DatasetSpec dataset_from_map(const ConfigMap& kv) {
  DatasetSpec d;
  d.n = get_size(kv, "data.n", d.n);
  d.vocab = get_size(kv, "data.vocab", d.vocab);
  d.min_len = get_size(kv, "data.min_len", d.min_len);
  d.max_len = get_size(kv, "data.max_len", d.max_len);
  d.n_clean = get_size(kv, "data.n_clean", d.n_clean);
  d.n_dev = get_size(kv, "data.n_dev", d.n_dev);
  d.n_test = get_size(kv, "data.n_test", d.n_test);
  d.copied_rate = get_real(kv, "data.noise_copied", d.copied_rate);
  d.misaligned_rate = get_real(kv, "data.noise_misaligned", d.misaligned_rate);
  d.junk_rate = get_real(kv, "data.noise_junk", d.junk_rate);
  d.seed = get_u64(kv, "data.seed", d.seed);
  return d;
}

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = [] {
    std::set<std::string> k;
    for (const auto& m : {dataset_to_map({}), ModelConfig{}.to_map(), TrainConfig{}.to_map()})
      for (const auto& [key, value] : m) k.insert(key);
    for (const char* extra : {"paths.out", "paths.data_dir", "paths.init_checkpoint", "paths.resume",
                              "paths.branch_from", "paths.checkpoint", "paths.data", "eval.metric",
                              "eval.limit", "analyze.granularity", "analyze.subset_size", "analyze.top_k",
                              "analyze.min_count", "analyze.examples", "check.seed", "check.trials",
                              "train.stop_at"})
      k.insert(extra);
    return k;
  }();
  return keys;
}

// Collects the layered configuration of one command: defaults, then the
// --config file, then --set pairs, then dedicated flags. Later wins.
struct Layers {
  std::string config_file;
  std::vector<std::string> sets;
  ConfigMap flags;

  ConfigMap resolve(ConfigMap defaults, const std::string& seed_key) const {
    ConfigMap file;
    if (!config_file.empty()) file = read_config_file(config_file);
    ConfigMap cli;
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + s + "'");
      cli[s.substr(0, eq)] = s.substr(eq + 1);
    }
    for (const auto& [k, v] : flags) cli[k] = v;
    const bool seed_given = file.count(seed_key) || cli.count(seed_key);
    for (const auto* layer : {&file, &cli})
      for (const auto& [k, v] : *layer) {
        if (!known_keys().count(k)) throw UsageError("unknown config key '" + k + "'");
        defaults[k] = v;
      }
    if (!seed_given)
      if (const char* env = std::getenv("GLMASK_SEED")) defaults[seed_key] = env;
    return defaults;
  }
};

void add_layers(CLI::App* cmd, Layers& layers) {
  cmd->add_option("--config", layers.config_file, "key=value config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", layers.sets, "config override key=value (repeatable)");
}

// Registers a flag that, when given, overrides config key `key`.
CLI::Option* add_key(CLI::App* cmd, const std::string& flag, Layers& layers, const std::string& key,
                     const std::string& help) {
  return cmd->add_option_function<std::string>(flag, [&layers, key](const std::string& v) { layers.flags[key] = v; }, help);
}

std::string require(const ConfigMap& kv, const std::string& key, const std::string& flag) {
  const auto it = kv.find(key);
  if (it == kv.end() || it->second.empty()) throw UsageError(flag + " is required");
  return it->second;
}

void prepare_out_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!force) throw std::runtime_error("output directory " + dir.string() + " exists; pass --force to overwrite");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

int cmd_gen_data(const ConfigMap& kv, bool force) {
  const fs::path out = require(kv, "paths.out", "--out");
  const DatasetSpec spec = dataset_from_map(kv);
  const Splits splits = build_dataset(spec);
  prepare_out_dir(out, force);
  save_dataset(splits, out);
  write_config_file(out / "resolved.cfg", kv);
  nlohmann::ordered_json j;
  j["train"] = splits.train.size();
  j["clean"] = splits.clean.size();
  j["dev"] = splits.dev.size();
  j["test"] = splits.test.size();
  std::map<std::string, std::size_t> prov;
  for (const auto& p : splits.train.pairs) ++prov[to_string(p.provenance)];
  j["train_provenance"] = prov;
  std::cout << j.dump() << std::endl;
  return 0;
}

int cmd_train(ConfigMap kv, bool force) {
  const fs::path out = require(kv, "paths.out", "--out");
  const fs::path data_dir = require(kv, "paths.data_dir", "--data-dir");
  TrainConfig train = TrainConfig::from_map(kv);
  const Splits splits = load_dataset(data_dir);
  if (is_glmask(train.mode) && splits.clean.empty())
    throw std::runtime_error("mode " + to_string(train.mode) + " needs clean.tsv in " + data_dir.string());
  if (train.mode == TrainMode::kFinetune && !kv.count("paths.init_checkpoint"))
    throw UsageError("--mode finetune requires --init-checkpoint");

  RunOptions opts;
  opts.out_dir = out;
  opts.dev = splits.dev.empty() ? nullptr : &splits.dev;
  opts.log = &std::cout;
  if (kv.count("paths.resume")) opts.resume_from = kv.at("paths.resume");
  if (kv.count("paths.branch_from")) opts.branch_from = kv.at("paths.branch_from");
  if (kv.count("paths.init_checkpoint")) opts.init_checkpoint = kv.at("paths.init_checkpoint");
  opts.stop_at = get_size(kv, "train.stop_at", 0);

  ModelConfig model = ModelConfig::from_map(kv);
  ParameterSet init;
  if (opts.init_checkpoint) {
    auto [ckpt_model, params] = load_model(read_checkpoint(*opts.init_checkpoint));
    model = ckpt_model;
    init = std::move(params);
  } else {
    model.src_vocab_size = splits.train.source_vocab.size();
    model.trg_vocab_size = splits.train.target_vocab.size();
    init = init_model(model, train.seed);
  }
  for (const auto& [k, v] : model.to_map()) kv[k] = v;

  // A resumed run keeps the directory it continues in.
  if (!opts.resume_from) prepare_out_dir(out, force);
  fs::create_directories(out);
  write_config_file(out / "resolved.cfg", kv);
  const Corpus* clean = splits.clean.empty() ? nullptr : &splits.clean;
  const RunResult r = run_training(model, train, splits.train, clean, std::move(init), opts);
  nlohmann::ordered_json j;
  j["final_step"] = r.final_step;
  j["checkpoint"] = r.final_checkpoint.string();
  std::cout << j.dump() << std::endl;
  return 0;
}

int cmd_eval(const ConfigMap& kv) {
  const fs::path ckpt_path = require(kv, "paths.checkpoint", "--checkpoint");
  const fs::path data = require(kv, "paths.data", "--data");
  const std::string metric = get_string(kv, "eval.metric", "both");
  if (metric != "bleu" && metric != "acc" && metric != "both") throw UsageError("--metric must be bleu, acc or both");
  if (!fs::exists(ckpt_path)) throw std::runtime_error("checkpoint " + ckpt_path.string() + " not found");
  const auto [model, params] = load_model(read_checkpoint(ckpt_path));

  // Vocabulary files sit next to the data when it came from gen-data.
  const fs::path dir = data.parent_path().empty() ? fs::path(".") : data.parent_path();
  Corpus corpus = fs::exists(dir / "src.vocab")
                      ? load_tsv(data, Vocabulary::load(dir / "src.vocab"), Vocabulary::load(dir / "trg.vocab"))
                      : load_tsv(data);
  const Translation t = translate(params, model, corpus, get_size(kv, "eval.limit", 0));
  nlohmann::ordered_json j;
  j["pairs"] = t.references.size();
  if (metric != "acc") j["bleu"] = corpus_bleu(t.hypotheses, t.references).smoothed;
  if (metric != "bleu") j["token_accuracy"] = t.accuracy.value();
  std::cout << j.dump() << std::endl;
  return 0;
}

int cmd_analyze(const ConfigMap& kv, bool force) {
  const fs::path ckpt_path = require(kv, "paths.checkpoint", "--checkpoint");
  const fs::path data_dir = require(kv, "paths.data_dir", "--data-dir");
  const fs::path out = require(kv, "paths.out", "--out");
  const Granularity gran = parse_granularity(get_string(kv, "analyze.granularity", "word"));
  const std::size_t subset_size = get_size(kv, "analyze.subset_size", 5000);
  const std::size_t top_k = get_size(kv, "analyze.top_k", 100);
  if (subset_size == 0 || top_k == 0) throw UsageError("--subset-size and --top-k must be positive");
  const auto [model, params] = load_model(read_checkpoint(ckpt_path));
  const Splits splits = load_dataset(data_dir);
  if (splits.clean.empty()) throw std::runtime_error("analysis needs clean.tsv in " + data_dir.string());

  Corpus subset = splits.train;
  subset.pairs.resize(std::min(subset_size, subset.pairs.size()));
  ReportInputs report;
  report.stats = score_corpus(params, model, subset, splits.clean, gran);
  report.words = extreme_word_profiles(report.stats, top_k, get_size(kv, "analyze.min_count", 5));
  if (report.words.truncated)
    std::cerr << "warning: only " << report.words.eligible << " eligible words, fewer than --top-k " << top_k << '\n';
  report.examples = dump_masked_examples(params, model, subset, full_clean_gradient(params, model, splits.clean),
                                         get_size(kv, "analyze.examples", 20));
  prepare_out_dir(out, force);
  write_report(out, report);
  write_config_file(out / "resolved.cfg", kv);
  nlohmann::ordered_json j;
  j["sentences"] = report.stats.n_sentences;
  j["per_provenance_mean"] = report.stats.per_provenance_mean;
  j["corrupted_mask_rate"] = report.stats.corrupted.rate();
  j["uncorrupted_mask_rate"] = report.stats.uncorrupted.rate();
  std::cout << j.dump() << std::endl;
  return 0;
}

int cmd_check(const ConfigMap& kv) {
  const std::size_t trials = get_size(kv, "check.trials", 20);
  if (trials == 0) throw UsageError("--trials must be >= 1");
  bool ok = true;
  for (const CheckResult& r : run_checks(get_u64(kv, "check.seed", 1), trials)) {
    ok = ok && r.passed;
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << " max_error=" << r.max_error
              << " tolerance=" << format_real(r.tolerance);
    if (!r.detail.empty()) std::cout << " (" << r.detail << ')';
    std::cout << '\n';
  }
  return ok ? 0 : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GLMask: gradient-guided loss masking for sequence-to-sequence training"};
  app.require_subcommand(1);
  std::cout.precision(17);

  Layers gen_l, train_l, eval_l, analyze_l, check_l;
  bool force = false;

  auto* gen = app.add_subcommand("gen-data", "generate a noisy synthetic cipher corpus");
  add_layers(gen, gen_l);
  add_key(gen, "--out", gen_l, "paths.out", "output directory");
  add_key(gen, "--n", gen_l, "data.n", "train pairs");
  add_key(gen, "--vocab", gen_l, "data.vocab", "vocabulary size");
  add_key(gen, "--min-len", gen_l, "data.min_len", "minimum sentence length");
  add_key(gen, "--max-len", gen_l, "data.max_len", "maximum sentence length");
  add_key(gen, "--n-clean", gen_l, "data.n_clean", "clean split size");
  add_key(gen, "--n-dev", gen_l, "data.n_dev", "dev split size");
  add_key(gen, "--n-test", gen_l, "data.n_test", "test split size");
  add_key(gen, "--noise-copied", gen_l, "data.noise_copied", "copied-target rate");
  add_key(gen, "--noise-misaligned", gen_l, "data.noise_misaligned", "misaligned-target rate");
  add_key(gen, "--noise-junk", gen_l, "data.noise_junk", "junk-token rate");
  add_key(gen, "--seed", gen_l, "data.seed", "generator seed");
  gen->add_flag("--force", force, "replace an existing output directory");

  auto* train = app.add_subcommand("train", "train in one of the four modes");
  add_layers(train, train_l);
  add_key(train, "--mode", train_l, "train.mode", "vanilla | finetune | glmask-sent | glmask-word")
      ->check(CLI::IsMember({"vanilla", "finetune", "glmask-sent", "glmask-word", "glmask_sent", "glmask_word"}));
  add_key(train, "--data-dir", train_l, "paths.data_dir", "gen-data output directory");
  add_key(train, "--out", train_l, "paths.out", "run directory");
  add_key(train, "--init-checkpoint", train_l, "paths.init_checkpoint", "starting model (finetune)");
  add_key(train, "--resume", train_l, "paths.resume", "continue this run from a checkpoint");
  add_key(train, "--branch-from", train_l, "paths.branch_from", "continue a run of another mode from a checkpoint");
  add_key(train, "--total-steps", train_l, "train.total_steps", "training steps");
  add_key(train, "--stop-at", train_l, "train.stop_at", "stop after this many steps");
  add_key(train, "--seed", train_l, "train.seed", "training seed");
  train->add_flag("--force", force, "replace an existing run directory");

  auto* eval = app.add_subcommand("eval", "decode a TSV file and score it");
  add_layers(eval, eval_l);
  add_key(eval, "--checkpoint", eval_l, "paths.checkpoint", "model checkpoint");
  add_key(eval, "--data", eval_l, "paths.data", "TSV file");
  add_key(eval, "--metric", eval_l, "eval.metric", "bleu | acc | both")->check(CLI::IsMember({"bleu", "acc", "both"}));
  add_key(eval, "--limit", eval_l, "eval.limit", "score only the first N pairs");

  auto* analyze = app.add_subcommand("analyze", "mask statistics over the training data");
  add_layers(analyze, analyze_l);
  add_key(analyze, "--checkpoint", analyze_l, "paths.checkpoint", "model checkpoint");
  add_key(analyze, "--data-dir", analyze_l, "paths.data_dir", "gen-data output directory");
  add_key(analyze, "--out", analyze_l, "paths.out", "report directory");
  add_key(analyze, "--granularity", analyze_l, "analyze.granularity", "sent | word")
      ->check(CLI::IsMember({"sent", "sentence", "word"}));
  add_key(analyze, "--subset-size", analyze_l, "analyze.subset_size", "train pairs to score");
  add_key(analyze, "--top-k", analyze_l, "analyze.top_k", "words per extreme list");
  add_key(analyze, "--examples", analyze_l, "analyze.examples", "pairs rendered in examples.txt");
  analyze->add_flag("--force", force, "replace an existing report directory");

  auto* check = app.add_subcommand("check", "run the gradient and alignment oracles");
  add_layers(check, check_l);
  add_key(check, "--seed", check_l, "check.seed", "seed");
  add_key(check, "--trials", check_l, "check.trials", "random trials per oracle");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_data(gen_l.resolve(dataset_to_map({}), "data.seed"), force);
    if (*train) {
      ConfigMap defaults = TrainConfig{}.to_map();
      for (const auto& [k, v] : ModelConfig{}.to_map()) defaults[k] = v;
      return cmd_train(train_l.resolve(defaults, "train.seed"), force);
    }
    if (*eval) return cmd_eval(eval_l.resolve({}, "check.seed"));
    if (*analyze) return cmd_analyze(analyze_l.resolve({}, "check.seed"), force);
    if (*check) return cmd_check(check_l.resolve({}, "check.seed"));
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}
