#include "glmask/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace glmask {

namespace {

constexpr double kMaskedScore = -1e9;
// Extra gain on the output projection so an untrained model starts close
// to the uniform prediction.
constexpr double kOutputInitGain = 0.015;

std::string layer_name(const char* stack, std::size_t layer, const char* part) {
  return std::string(stack) + "." + std::to_string(layer) + "." + part;
}

}  // namespace

std::vector<std::string> ModelConfig::violations() const {
  std::vector<std::string> out;
  if (num_layers < 1) out.push_back("num_layers must be >= 1");
  if (num_heads < 1) out.push_back("num_heads must be >= 1");
  if (d_model < 1) out.push_back("d_model must be >= 1");
  if (num_heads >= 1 && d_model % num_heads != 0)
    out.push_back("d_model (" + std::to_string(d_model) + ") must be divisible by num_heads (" +
                  std::to_string(num_heads) + ")");
  if (d_ff < 1) out.push_back("d_ff must be >= 1");
  if (src_vocab_size <= Vocabulary::kReserved) out.push_back("src_vocab_size must exceed the reserved ids");
  if (trg_vocab_size <= Vocabulary::kReserved) out.push_back("trg_vocab_size must exceed the reserved ids");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) out.push_back("dropout_rate must be in [0, 1)");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) out.push_back("label_smoothing must be in [0, 1)");
  if (max_positions < 1) out.push_back("max_positions must be >= 1");
  return out;
}

void ModelConfig::validate() const {
  const auto v = violations();
  if (v.empty()) return;
  std::string msg = "invalid model config:";
  for (const auto& s : v) msg += "\n  - " + s;
  throw ConfigError(msg);
}

std::map<std::string, std::string> ModelConfig::to_map() const {
  return {
      {"model.num_layers", std::to_string(num_layers)},
      {"model.num_heads", std::to_string(num_heads)},
      {"model.d_model", std::to_string(d_model)},
      {"model.d_ff", std::to_string(d_ff)},
      {"model.src_vocab_size", std::to_string(src_vocab_size)},
      {"model.trg_vocab_size", std::to_string(trg_vocab_size)},
      {"model.dropout_rate", format_real(dropout_rate)},
      {"model.label_smoothing", format_real(label_smoothing)},
      {"model.max_positions", std::to_string(max_positions)},
  };
}

ModelConfig ModelConfig::from_map(const std::map<std::string, std::string>& kv) {
  ModelConfig c;
  c.num_layers = get_size(kv, "model.num_layers", c.num_layers);
  c.num_heads = get_size(kv, "model.num_heads", c.num_heads);
  c.d_model = get_size(kv, "model.d_model", c.d_model);
  c.d_ff = get_size(kv, "model.d_ff", c.d_ff);
  c.src_vocab_size = get_size(kv, "model.src_vocab_size", c.src_vocab_size);
  c.trg_vocab_size = get_size(kv, "model.trg_vocab_size", c.trg_vocab_size);
  c.dropout_rate = get_real(kv, "model.dropout_rate", c.dropout_rate);
  c.label_smoothing = get_real(kv, "model.label_smoothing", c.label_smoothing);
  c.max_positions = get_size(kv, "model.max_positions", c.max_positions);
  return c;
}

ParameterSet init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed, Stream::kInit);
  ParameterSet p;
  const std::size_t d = config.d_model;

  auto uniform = [&](const std::string& name, Shape shape, double bound) {
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) x = rng.uniform(-bound, bound);
    p.set(name, Tensor(std::move(shape), std::move(v)));
  };
  auto linear = [&](const std::string& name, std::size_t in, std::size_t out, double gain = 1.0) {
    uniform(name + ".w", {in, out}, gain / std::sqrt(static_cast<double>(in)));
    p.set(name + ".b", Tensor::zeros({out}));
  };
  auto norm = [&](const std::string& name) {
    p.set(name + ".gain", Tensor::full({d}, 1.0));
    p.set(name + ".bias", Tensor::zeros({d}));
  };
  auto attention = [&](const std::string& name) {
    for (const char* proj : {"q", "k", "v", "o"}) linear(name + "." + proj, d, d);
  };
  auto feed_forward = [&](const std::string& name) {
    linear(name + ".in", d, config.d_ff);
    linear(name + ".out", config.d_ff, d);
  };

  const double embed_bound = 1.0 / std::sqrt(static_cast<double>(d));
  uniform("src_embed", {config.src_vocab_size, d}, embed_bound);
  uniform("trg_embed", {config.trg_vocab_size, d}, embed_bound);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    attention(layer_name("enc", l, "self"));
    norm(layer_name("enc", l, "ln1"));
    feed_forward(layer_name("enc", l, "ff"));
    norm(layer_name("enc", l, "ln2"));
  }
  norm("enc.final_ln");
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    attention(layer_name("dec", l, "self"));
    norm(layer_name("dec", l, "ln1"));
    attention(layer_name("dec", l, "cross"));
    norm(layer_name("dec", l, "ln2"));
    feed_forward(layer_name("dec", l, "ff"));
    norm(layer_name("dec", l, "ln3"));
  }
  norm("dec.final_ln");
  linear("out", d, config.trg_vocab_size, kOutputInitGain);
  return p;
}

namespace {

class Transformer {
 public:
  Transformer(const ParameterSet& p, const ModelConfig& c, Mode mode, Rng* rng)
      : p_(p), c_(c), mode_(mode), rng_(rng) {
    if (mode == Mode::kTrain && c.dropout_rate > 0.0 && !rng)
      throw std::invalid_argument("train mode needs a dropout RNG stream");
  }

  Tensor encode(const std::vector<std::size_t>& ids, const std::vector<char>& pad, std::size_t batch,
                std::size_t len) const {
    Tensor x = embed("src_embed", ids, batch, len);
    const Tensor bias = attention_bias(pad, batch, len, len, false);
    for (std::size_t l = 0; l < c_.num_layers; ++l) {
      const Tensor h = norm(x, layer_name("enc", l, "ln1"));
      x = add(x, drop(attend(layer_name("enc", l, "self"), h, h, bias, batch, len, len)));
      x = add(x, drop(feed_forward(layer_name("enc", l, "ff"), norm(x, layer_name("enc", l, "ln2")))));
    }
    return norm(x, "enc.final_ln");
  }

  // Returns logits [batch, len, trg_vocab].
  Tensor decode(const Tensor& memory, const std::vector<char>& src_pad, std::size_t src_len,
                const std::vector<std::size_t>& ids, const std::vector<char>& pad, std::size_t batch,
                std::size_t len) const {
    Tensor y = embed("trg_embed", ids, batch, len);
    const Tensor self_bias = attention_bias(pad, batch, len, len, true);
    const Tensor cross_bias = attention_bias(src_pad, batch, len, src_len, false);
    for (std::size_t l = 0; l < c_.num_layers; ++l) {
      const Tensor h = norm(y, layer_name("dec", l, "ln1"));
      y = add(y, drop(attend(layer_name("dec", l, "self"), h, h, self_bias, batch, len, len)));
      const Tensor h2 = norm(y, layer_name("dec", l, "ln2"));
      y = add(y, drop(attend(layer_name("dec", l, "cross"), h2, memory, cross_bias, batch, len, src_len)));
      y = add(y, drop(feed_forward(layer_name("dec", l, "ff"), norm(y, layer_name("dec", l, "ln3")))));
    }
    return linear("out", norm(y, "dec.final_ln"));
  }

 private:
  Tensor linear(const std::string& name, const Tensor& x) const {
    return add(matmul(x, p_.at(name + ".w")), p_.at(name + ".b"));
  }

  Tensor norm(const Tensor& x, const std::string& name) const {
    return layer_norm(x, p_.at(name + ".gain"), p_.at(name + ".bias"));
  }

  Tensor drop(const Tensor& x) const {
    if (mode_ == Mode::kEval || c_.dropout_rate == 0.0) return x;
    return dropout(x, c_.dropout_rate, *rng_);
  }

  Tensor feed_forward(const std::string& name, const Tensor& x) const {
    return linear(name + ".out", relu(linear(name + ".in", x)));
  }

  Tensor embed(const std::string& table, const std::vector<std::size_t>& ids, std::size_t batch,
               std::size_t len) const {
    if (len > c_.max_positions)
      throw std::invalid_argument("sequence length " + std::to_string(len) +
                                  " exceeds max_positions " + std::to_string(c_.max_positions));
    const std::size_t d = c_.d_model;
    std::vector<double> pe(len * d);
    for (std::size_t pos = 0; pos < len; ++pos)
      for (std::size_t i = 0; i < d; ++i) {
        const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d));
        pe[pos * d + i] = i % 2 == 0 ? std::sin(static_cast<double>(pos) * freq)
                                     : std::cos(static_cast<double>(pos) * freq);
      }
    const Tensor tokens = scale(gather_rows(p_.at(table), ids, {batch, len}), std::sqrt(static_cast<double>(d)));
    return drop(add(tokens, Tensor({len, d}, std::move(pe))));
  }

  // [batch * heads, q_len, k_len] additive mask over padded (and, if causal,
  // future) key positions.
  Tensor attention_bias(const std::vector<char>& key_pad, std::size_t batch, std::size_t q_len,
                        std::size_t k_len, bool causal) const {
    const std::size_t heads = c_.num_heads;
    std::vector<double> bias(batch * heads * q_len * k_len, 0.0);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t q = 0; q < q_len; ++q)
        for (std::size_t k = 0; k < k_len; ++k) {
          if (!key_pad[b * k_len + k] && !(causal && k > q)) continue;
          for (std::size_t h = 0; h < heads; ++h) bias[((b * heads + h) * q_len + q) * k_len + k] = kMaskedScore;
        }
    return Tensor({batch * heads, q_len, k_len}, std::move(bias));
  }

  Tensor split_heads(const Tensor& x, std::size_t batch, std::size_t len) const {
    const std::size_t h = c_.num_heads, dh = c_.d_model / h;
    return reshape(permute_0213(reshape(x, {batch, len, h, dh})), {batch * h, len, dh});
  }

  Tensor attend(const std::string& name, const Tensor& query, const Tensor& keys, const Tensor& bias,
                std::size_t batch, std::size_t q_len, std::size_t k_len) const {
    const std::size_t h = c_.num_heads, dh = c_.d_model / h;
    const Tensor q = split_heads(linear(name + ".q", query), batch, q_len);
    const Tensor k = split_heads(linear(name + ".k", keys), batch, k_len);
    const Tensor v = split_heads(linear(name + ".v", keys), batch, k_len);
    const Tensor scores = add(scale(bmm(q, transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(dh))), bias);
    const Tensor context = bmm(softmax_last(scores), v);
    const Tensor merged = reshape(permute_0213(reshape(context, {batch, h, q_len, dh})), {batch, q_len, c_.d_model});
    return linear(name + ".o", merged);
  }

  const ParameterSet& p_;
  const ModelConfig& c_;
  Mode mode_;
  Rng* rng_;
};

void check_ids(const std::vector<std::size_t>& ids, std::size_t vocab, const char* side) {
  for (auto id : ids)
    if (id >= vocab)
      throw std::out_of_range(std::string(side) + " id " + std::to_string(id) +
                              " out of range for vocabulary of size " + std::to_string(vocab));
}

}  // namespace

std::size_t PerTokenLoss::tokens_in_row(std::size_t r) const {
  std::size_t n = 0;
  for (std::size_t t = 0; t < cols; ++t) n += !pad[r * cols + t];
  return n;
}

std::size_t PerTokenLoss::total_tokens() const {
  return static_cast<std::size_t>(std::count(pad.begin(), pad.end(), 0));
}

PerTokenLoss per_token_losses(const ParameterSet& params, const ModelConfig& config,
                              const TokenBatch& batch, Mode mode, Rng* rng) {
  if (batch.trg_len < 2) throw std::invalid_argument("target rows need at least two positions");
  check_ids(batch.src_ids, config.src_vocab_size, "source");
  check_ids(batch.trg_ids, config.trg_vocab_size, "target");

  const std::size_t rows = batch.batch, cols = batch.trg_len - 1;
  std::vector<std::size_t> inputs(rows * cols), labels(rows * cols);
  std::vector<char> in_pad(rows * cols), label_pad(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t t = 0; t < cols; ++t) {
      inputs[r * cols + t] = batch.trg(r, t);
      in_pad[r * cols + t] = batch.trg_pad[r * batch.trg_len + t];
      labels[r * cols + t] = batch.trg(r, t + 1);
      label_pad[r * cols + t] = batch.trg_pad[r * batch.trg_len + t + 1];
    }

  const Transformer model(params, config, mode, rng);
  const Tensor memory = model.encode(batch.src_ids, batch.src_pad, rows, batch.src_len);
  const Tensor logits = model.decode(memory, batch.src_pad, batch.src_len, inputs, in_pad, rows, cols);
  const Tensor ce = reshape(cross_entropy_smoothed(logits, labels, config.label_smoothing), {rows, cols});

  std::vector<double> keep(rows * cols);
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = label_pad[i] ? 0.0 : 1.0;
  PerTokenLoss out;
  out.values = mul(ce, Tensor({rows, cols}, std::move(keep)));
  out.pad = std::move(label_pad);
  out.rows = rows;
  out.cols = cols;
  return out;
}

Tensor sentence_losses(const PerTokenLoss& losses) {
  std::vector<double> weights(losses.rows * losses.cols, 0.0);
  for (std::size_t r = 0; r < losses.rows; ++r) {
    const std::size_t n = losses.tokens_in_row(r);
    if (n == 0) throw std::invalid_argument("sentence_losses: row " + std::to_string(r) + " has no target tokens");
    for (std::size_t t = 0; t < losses.cols; ++t)
      if (!losses.pad[r * losses.cols + t]) weights[r * losses.cols + t] = 1.0 / static_cast<double>(n);
  }
  const Tensor w({losses.rows, losses.cols}, std::move(weights));
  return reshape(sum_last(mul(losses.values, w)), {losses.rows});
}

std::vector<std::vector<std::size_t>> greedy_decode(
    const ParameterSet& params, const ModelConfig& config,
    const std::vector<std::vector<std::size_t>>& sources, std::size_t max_len) {
  std::vector<std::vector<std::size_t>> out(sources.size());
  if (sources.empty() || max_len == 0) return out;

  const std::size_t batch = sources.size();
  std::size_t src_len = 1;
  for (const auto& s : sources) src_len = std::max(src_len, s.size());
  std::vector<std::size_t> src(batch * src_len, Vocabulary::kPad);
  std::vector<char> src_pad(batch * src_len, 1);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t s = 0; s < sources[b].size(); ++s) {
      src[b * src_len + s] = sources[b][s];
      src_pad[b * src_len + s] = 0;
    }
  check_ids(src, config.src_vocab_size, "source");

  const Transformer model(params, config, Mode::kEval, nullptr);
  const Tensor memory = model.encode(src, src_pad, batch, src_len);
  const std::size_t vocab = config.trg_vocab_size;

  std::vector<std::vector<std::size_t>> prefix(batch, {Vocabulary::kBegin});
  std::vector<char> done(batch, 0);
  for (std::size_t step = 0; step < max_len; ++step) {
    const std::size_t len = step + 1;
    std::vector<std::size_t> ids(batch * len);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < len; ++t) ids[b * len + t] = prefix[b][t];
    const std::vector<char> pad(batch * len, 0);
    const Tensor logits = model.decode(memory, src_pad, src_len, ids, pad, batch, len);
    bool all_done = true;
    for (std::size_t b = 0; b < batch; ++b) {
      if (done[b]) {
        prefix[b].push_back(Vocabulary::kEnd);
        continue;
      }
      const double* row = logits.data().data() + (b * len + step) * vocab;
      std::size_t best = Vocabulary::kEnd;
      for (std::size_t v = Vocabulary::kEnd; v < vocab; ++v)
        if (row[v] > row[best]) best = v;
      prefix[b].push_back(best);
      if (best == Vocabulary::kEnd) done[b] = 1;
      else out[b].push_back(best);
      all_done = all_done && done[b];
    }
    if (all_done) break;
  }
  return out;
}

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

namespace {

constexpr std::string_view kMagic = "GLMASK1";

std::uint64_t to_little(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  else return __builtin_bswap64(v);
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ostringstream text;
  for (const auto& [k, v] : ckpt.config) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw std::invalid_argument("checkpoint config entry '" + k + "' is not a single key=value line");
    text << k << '=' << v << '\n';
  }
  const std::string block = text.str();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os << kMagic << '\n' << "config " << block.size() << '\n' << block;
  os << "layout " << ckpt.tensors.size() << '\n';
  std::size_t total = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.find_first_of(" \n") != std::string::npos)
      throw std::invalid_argument("tensor name '" + name + "' contains whitespace");
    os << name << ' ' << t.dim();
    for (auto e : t.shape()) os << ' ' << e;
    os << '\n';
    total += t.size();
  }
  os << "data " << total << '\n';
  for (const auto& [_, t] : ckpt.tensors)
    for (double v : t.data()) {
      const std::uint64_t bits = to_little(std::bit_cast<std::uint64_t>(v));
      os.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
  if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read checkpoint " + path.string());
  auto fail = [&](const std::string& what) -> std::runtime_error {
    return std::runtime_error("malformed checkpoint " + path.string() + ": " + what);
  };
  std::string line;
  if (!std::getline(is, line) || line != kMagic) throw fail("bad magic");

  std::string word;
  std::size_t n = 0;
  if (!(is >> word >> n) || word != "config") throw fail("missing config section");
  is.get();
  std::string block(n, '\0');
  if (!is.read(block.data(), static_cast<std::streamsize>(n))) throw fail("truncated config");
  Checkpoint ckpt;
  std::istringstream bs(block);
  while (std::getline(bs, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw fail("config line without '='");
    ckpt.config[line.substr(0, eq)] = line.substr(eq + 1);
  }

  if (!(is >> word >> n) || word != "layout") throw fail("missing layout section");
  std::vector<std::pair<std::string, Shape>> layout(n);
  for (auto& [name, shape] : layout) {
    std::size_t rank = 0;
    if (!(is >> name >> rank)) throw fail("bad layout entry");
    shape.resize(rank);
    for (auto& e : shape)
      if (!(is >> e)) throw fail("bad layout extent");
  }
  std::size_t total = 0;
  if (!(is >> word >> total) || word != "data") throw fail("missing data section");
  is.get();
  for (const auto& [name, shape] : layout) {
    std::vector<double> values(shape_size(shape));
    for (auto& v : values) {
      std::uint64_t bits = 0;
      if (!is.read(reinterpret_cast<char*>(&bits), sizeof bits)) throw fail("truncated data");
      v = std::bit_cast<double>(to_little(bits));
    }
    ckpt.tensors.emplace_back(name, Tensor(shape, std::move(values)));
  }
  return ckpt;
}

Checkpoint model_checkpoint(const ModelConfig& config, const ParameterSet& params) {
  Checkpoint ckpt;
  ckpt.config = config.to_map();
  for (const auto& [name, t] : params) ckpt.tensors.emplace_back(name, t);
  return ckpt;
}

std::pair<ModelConfig, ParameterSet> load_model(const Checkpoint& ckpt) {
  ModelConfig config = ModelConfig::from_map(ckpt.config);
  config.validate();
  ParameterSet params;
  for (const auto& [name, t] : ckpt.tensors)
    if (name.rfind("opt.", 0) != 0) params.set(name, t);
  const ParameterSet expected = init_model(config, 0);
  if (params.layout() != expected.layout())
    throw std::runtime_error("checkpoint parameters do not match the model config");
  return {config, params};
}

}  // namespace glmask
