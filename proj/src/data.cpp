#include "glmask/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "glmask/rng.hpp"

namespace glmask {

namespace {

Tokens split_tokens(const std::string& text) {
  Tokens out;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

std::string join_tokens(const Tokens& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

std::size_t category_count(double rate, std::size_t n) {
  return static_cast<std::size_t>(std::floor(rate * static_cast<double>(n) + 1e-9));
}

}  // namespace

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::kClean: return "clean";
    case Provenance::kCopied: return "copied";
    case Provenance::kMisaligned: return "misaligned";
    case Provenance::kJunk: return "junk";
    case Provenance::kNone: return "none";
  }
  return "none";
}

Provenance parse_provenance(const std::string& label) {
  if (label == "clean") return Provenance::kClean;
  if (label == "copied") return Provenance::kCopied;
  if (label == "misaligned") return Provenance::kMisaligned;
  if (label == "junk") return Provenance::kJunk;
  if (label == "none") return Provenance::kNone;
  throw DataError("unknown provenance label '" + label + "'");
}

Vocabulary::Vocabulary() {
  for (const char* t : {"<pad>", "<s>", "</s>", "<unk>"}) {
    index_.emplace(t, tokens_.size());
    tokens_.emplace_back(t);
  }
}

std::size_t Vocabulary::add(const std::string& token) {
  auto [it, inserted] = index_.emplace(token, tokens_.size());
  if (inserted) tokens_.push_back(token);
  return it->second;
}

std::size_t Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnknown : it->second;
}

const std::string& Vocabulary::token(std::size_t id) const {
  if (id >= tokens_.size()) throw std::out_of_range("vocabulary id " + std::to_string(id) + " out of range");
  return tokens_[id];
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write vocabulary " + path.string());
  for (std::size_t i = kReserved; i < tokens_.size(); ++i) os << tokens_[i] << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read vocabulary " + path.string());
  Vocabulary v;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || v.contains(line))
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": empty or duplicate token");
    v.add(line);
  }
  return v;
}

std::string synthetic_token(std::size_t index) {
  static constexpr std::string_view kConsonants = "bdfgklmnprstvz";
  static constexpr std::string_view kVowels = "aeiou";
  const std::size_t syllables = kConsonants.size() * kVowels.size();
  auto syllable = [&](std::size_t s) {
    return std::string{kConsonants[s / kVowels.size()], kVowels[s % kVowels.size()]};
  };
  std::string word = syllable(index % syllables);
  for (std::size_t rest = index / syllables; rest > 0; rest /= syllables)
    word += syllable((rest - 1) % syllables);
  if (index % 5 == 4) word += static_cast<char>('0' + index % 10);
  return word;
}

CipherKey CipherKey::from_seed(std::size_t vocab_size, std::uint64_t seed) {
  CipherKey key;
  key.forward.resize(vocab_size);
  std::iota(key.forward.begin(), key.forward.end(), std::size_t{0});
  Rng rng(seed, Stream::kCipher);
  rng.shuffle(std::span<std::size_t>(key.forward));
  key.inverse.resize(vocab_size);
  for (std::size_t i = 0; i < vocab_size; ++i) key.inverse[key.forward[i]] = i;
  return key;
}

namespace {

void reverse_full_blocks(std::vector<std::size_t>& seq) {
  for (std::size_t b = 0; b + 3 <= seq.size(); b += 3) std::swap(seq[b], seq[b + 2]);
}

}  // namespace

std::vector<std::size_t> encipher(std::span<const std::size_t> source, const CipherKey& key) {
  std::vector<std::size_t> out;
  out.reserve(source.size());
  for (auto s : source) out.push_back(key.forward.at(s));
  reverse_full_blocks(out);
  return out;
}

std::vector<std::size_t> decipher(std::span<const std::size_t> target, const CipherKey& key) {
  std::vector<std::size_t> out(target.begin(), target.end());
  reverse_full_blocks(out);
  for (auto& t : out) t = key.inverse.at(t);
  return out;
}

Corpus generate_cipher_corpus(std::size_t n, std::size_t vocab_size, std::size_t min_len,
                              std::size_t max_len, std::uint64_t seed) {
  if (vocab_size < 8) throw DataError("cipher corpus needs vocab_size >= 8");
  if (min_len < 1 || min_len > max_len) throw DataError("cipher corpus needs 1 <= min_len <= max_len");
  Corpus corpus;
  std::vector<std::string> names;
  for (std::size_t i = 0; i < vocab_size; ++i) {
    names.push_back(synthetic_token(i));
    corpus.source_vocab.add(names.back());
    corpus.target_vocab.add(names.back());
  }
  const CipherKey key = CipherKey::from_seed(vocab_size, seed);
  Rng rng(seed, Stream::kData);
  corpus.pairs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = min_len + static_cast<std::size_t>(rng.below(max_len - min_len + 1));
    std::vector<std::size_t> src(len);
    for (auto& s : src) s = static_cast<std::size_t>(rng.below(vocab_size));
    SentencePair pair;
    pair.id = i;
    for (auto s : src) pair.source.push_back(names[s]);
    for (auto t : encipher(src, key)) pair.target.push_back(names[t]);
    corpus.pairs.push_back(std::move(pair));
  }
  return corpus;
}

Corpus inject_noise(const Corpus& corpus, const NoiseSpec& spec) {
  for (double r : {spec.copied_rate, spec.misaligned_rate, spec.junk_rate})
    if (!(r >= 0.0 && r <= 1.0)) throw DataError("noise rates must lie in [0, 1]");
  if (spec.copied_rate + spec.misaligned_rate + spec.junk_rate > 1.0 + 1e-12)
    throw DataError("noise rates sum to more than 1");

  Corpus out = corpus;
  const std::size_t n = corpus.size();
  for (auto& p : out.pairs) {
    p.provenance = Provenance::kClean;
    p.corrupted.clear();
  }
  if (n == 0) return out;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(spec.seed, Stream::kNoise);
  rng.shuffle(std::span<std::size_t>(order));

  const std::size_t n_copied = category_count(spec.copied_rate, n);
  const std::size_t n_misaligned = category_count(spec.misaligned_rate, n);
  const std::size_t n_junk = category_count(spec.junk_rate, n);

  std::size_t cursor = 0;
  for (std::size_t k = 0; k < n_copied; ++k, ++cursor) {
    auto& p = out.pairs[order[cursor]];
    p.target = p.source;
    p.provenance = Provenance::kCopied;
  }
  for (std::size_t k = 0; k < n_misaligned; ++k, ++cursor) {
    const std::size_t i = order[cursor];
    std::size_t j = i;
    if (n > 1)
      while (j == i) j = static_cast<std::size_t>(rng.below(n));
    out.pairs[i].target = corpus.pairs[j].target;
    out.pairs[i].provenance = Provenance::kMisaligned;
  }
  // Junk tokens come from the target vocabulary proper.
  std::vector<std::string> pool;
  for (std::size_t id = Vocabulary::kReserved; id < corpus.target_vocab.size(); ++id)
    pool.push_back(corpus.target_vocab.token(id));
  for (std::size_t k = 0; k < n_junk; ++k, ++cursor) {
    auto& p = out.pairs[order[cursor]];
    p.provenance = Provenance::kJunk;
    if (pool.size() < 2) continue;
    const std::size_t len = p.target.size();
    const std::size_t hits = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(kJunkFraction * static_cast<double>(len) + 0.5)));
    std::vector<std::size_t> positions(len);
    std::iota(positions.begin(), positions.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(positions));
    positions.resize(std::min(hits, len));
    std::sort(positions.begin(), positions.end());
    for (auto pos : positions) {
      std::string replacement;
      do {
        replacement = pool[static_cast<std::size_t>(rng.below(pool.size()))];
      } while (replacement == p.target[pos]);
      p.target[pos] = replacement;
    }
    p.corrupted = std::move(positions);
  }
  // Copied targets reuse source tokens; register them on the target side.
  out.target_vocab = corpus.target_vocab;
  for (const auto& p : out.pairs)
    for (const auto& t : p.target) out.target_vocab.add(t);
  return out;
}

Splits split_clean(const Corpus& corpus, std::size_t n_clean, std::size_t n_dev,
                   std::size_t n_test, std::uint64_t seed) {
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < corpus.size(); ++i)
    if (corpus.pairs[i].provenance == Provenance::kClean) candidates.push_back(i);
  const std::size_t wanted = n_clean + n_dev + n_test;
  if (candidates.size() < wanted)
    throw DataError("split_clean: need " + std::to_string(wanted) + " clean pairs, corpus has " +
                    std::to_string(candidates.size()));
  if (corpus.size() <= wanted) throw DataError("split_clean: no pairs left for the train split");

  Rng rng(seed, Stream::kSplit);
  rng.shuffle(std::span<std::size_t>(candidates));
  std::vector<int> role(corpus.size(), 0);
  for (std::size_t k = 0; k < wanted; ++k)
    role[candidates[k]] = k < n_clean ? 1 : (k < n_clean + n_dev ? 2 : 3);

  Splits s;
  for (Corpus* c : {&s.train, &s.clean, &s.dev, &s.test}) {
    c->source_vocab = corpus.source_vocab;
    c->target_vocab = corpus.target_vocab;
  }
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    Corpus* dst = role[i] == 0 ? &s.train : role[i] == 1 ? &s.clean : role[i] == 2 ? &s.dev : &s.test;
    dst->pairs.push_back(corpus.pairs[i]);
  }
  return s;
}

TokenBatch make_batch(const Corpus& corpus, std::span<const std::size_t> indices) {
  if (indices.empty()) throw DataError("make_batch: empty batch");
  TokenBatch b;
  b.batch = indices.size();
  for (auto i : indices) {
    const auto& p = corpus.pairs.at(i);
    b.src_len = std::max(b.src_len, p.source.size());
    b.trg_len = std::max(b.trg_len, p.target.size() + 2);
  }
  b.src_ids.assign(b.batch * b.src_len, Vocabulary::kPad);
  b.trg_ids.assign(b.batch * b.trg_len, Vocabulary::kPad);
  b.src_pad.assign(b.batch * b.src_len, 1);
  b.trg_pad.assign(b.batch * b.trg_len, 1);
  for (std::size_t r = 0; r < b.batch; ++r) {
    const auto& p = corpus.pairs[indices[r]];
    for (std::size_t s = 0; s < p.source.size(); ++s) {
      b.src_ids[r * b.src_len + s] = corpus.source_vocab.id(p.source[s]);
      b.src_pad[r * b.src_len + s] = 0;
    }
    std::size_t t = 0;
    b.trg_ids[r * b.trg_len + t] = Vocabulary::kBegin;
    b.trg_pad[r * b.trg_len + t++] = 0;
    for (const auto& tok : p.target) {
      b.trg_ids[r * b.trg_len + t] = corpus.target_vocab.id(tok);
      b.trg_pad[r * b.trg_len + t++] = 0;
    }
    b.trg_ids[r * b.trg_len + t] = Vocabulary::kEnd;
    b.trg_pad[r * b.trg_len + t] = 0;
    b.provenance.push_back(p.provenance);
    b.pair_index.push_back(indices[r]);
  }
  return b;
}

TokenBatch concat_batches(const TokenBatch& a, const TokenBatch& b) {
  TokenBatch out;
  out.batch = a.batch + b.batch;
  out.src_len = std::max(a.src_len, b.src_len);
  out.trg_len = std::max(a.trg_len, b.trg_len);
  out.src_ids.assign(out.batch * out.src_len, Vocabulary::kPad);
  out.trg_ids.assign(out.batch * out.trg_len, Vocabulary::kPad);
  out.src_pad.assign(out.batch * out.src_len, 1);
  out.trg_pad.assign(out.batch * out.trg_len, 1);
  std::size_t row = 0;
  for (const TokenBatch* part : {&a, &b}) {
    for (std::size_t r = 0; r < part->batch; ++r, ++row) {
      for (std::size_t s = 0; s < part->src_len; ++s) {
        out.src_ids[row * out.src_len + s] = part->src_ids[r * part->src_len + s];
        out.src_pad[row * out.src_len + s] = part->src_pad[r * part->src_len + s];
      }
      for (std::size_t t = 0; t < part->trg_len; ++t) {
        out.trg_ids[row * out.trg_len + t] = part->trg_ids[r * part->trg_len + t];
        out.trg_pad[row * out.trg_len + t] = part->trg_pad[r * part->trg_len + t];
      }
    }
    out.provenance.insert(out.provenance.end(), part->provenance.begin(), part->provenance.end());
    out.pair_index.insert(out.pair_index.end(), part->pair_index.begin(), part->pair_index.end());
  }
  return out;
}

BatchStream::BatchStream(const Corpus& corpus, std::size_t batch_size, std::size_t max_len,
                         std::uint64_t seed)
    : corpus_(&corpus), batch_size_(batch_size), seed_(seed) {
  if (batch_size == 0) throw DataError("batch size must be at least 1");
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& p = corpus.pairs[i];
    if (p.source.size() <= max_len && p.target.size() <= max_len) eligible_.push_back(i);
  }
  if (eligible_.empty()) throw DataError("no sentence pairs left after the length filter");
  shuffle_epoch();
}

void BatchStream::shuffle_epoch() {
  order_ = eligible_;
  Rng rng(seed_, Stream::kData, epoch_);
  rng.shuffle(std::span<std::size_t>(order_));
}

void BatchStream::seek(std::size_t epoch, std::size_t offset) {
  epoch_ = epoch;
  offset_ = offset;
  shuffle_epoch();
}

TokenBatch BatchStream::next() {
  if (offset_ >= order_.size()) {
    ++epoch_;
    offset_ = 0;
    shuffle_epoch();
  }
  const std::size_t take = std::min(batch_size_, order_.size() - offset_);
  const std::span<const std::size_t> idx(order_.data() + offset_, take);
  offset_ += take;
  return make_batch(*corpus_, idx);
}

void save_tsv(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  for (const auto& p : corpus.pairs)
    os << join_tokens(p.source) << '\t' << join_tokens(p.target) << '\t' << to_string(p.provenance)
       << '\n';
}

namespace {

std::vector<SentencePair> read_pairs(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read " + path.string());
  std::vector<SentencePair> pairs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string where = path.string() + ":" + std::to_string(lineno) + ": ";
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw DataError(where + "missing TAB separator");
    SentencePair p;
    p.id = pairs.size();
    p.source = split_tokens(line.substr(0, tab));
    const std::string rest = line.substr(tab + 1);
    const auto tab2 = rest.find('\t');
    p.target = split_tokens(rest.substr(0, tab2));
    p.provenance = Provenance::kNone;
    if (tab2 != std::string::npos) {
      try {
        p.provenance = parse_provenance(rest.substr(tab2 + 1));
      } catch (const DataError& e) {
        throw DataError(where + e.what());
      }
    }
    if (p.source.empty() || p.target.empty()) throw DataError(where + "empty source or target");
    pairs.push_back(std::move(p));
  }
  if (pairs.empty()) throw DataError(path.string() + ": no sentence pairs");
  return pairs;
}

}  // namespace

Corpus load_tsv(const std::filesystem::path& path) {
  Corpus c;
  c.pairs = read_pairs(path);
  for (const auto& p : c.pairs) {
    for (const auto& t : p.source) c.source_vocab.add(t);
    for (const auto& t : p.target) c.target_vocab.add(t);
  }
  return c;
}

Corpus load_tsv(const std::filesystem::path& path, const Vocabulary& source_vocab,
                const Vocabulary& target_vocab) {
  Corpus c;
  c.pairs = read_pairs(path);
  c.source_vocab = source_vocab;
  c.target_vocab = target_vocab;
  return c;
}

void save_corruption(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& c = corpus.pairs[i].corrupted;
    if (c.empty()) continue;
    os << i << '\t';
    for (std::size_t k = 0; k < c.size(); ++k) os << (k ? "," : "") << c[k];
    os << '\n';
  }
}

void load_corruption(Corpus& corpus, const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw DataError(path.string() + ":" + std::to_string(lineno) + ": missing TAB");
    const std::size_t index = std::stoul(line.substr(0, tab));
    if (index >= corpus.size()) throw DataError(path.string() + ":" + std::to_string(lineno) + ": pair index out of range");
    auto& dst = corpus.pairs[index].corrupted;
    dst.clear();
    std::istringstream ps(line.substr(tab + 1));
    std::string item;
    while (std::getline(ps, item, ',')) dst.push_back(std::stoul(item));
  }
}

Splits build_dataset(const DatasetSpec& spec) {
  const Corpus base = generate_cipher_corpus(spec.n + spec.n_clean + spec.n_dev + spec.n_test, spec.vocab,
                                             spec.min_len, spec.max_len, spec.seed);
  Splits s = split_clean(base, spec.n_clean, spec.n_dev, spec.n_test, spec.seed);
  s.train = inject_noise(s.train, {spec.copied_rate, spec.misaligned_rate, spec.junk_rate, spec.seed});
  // Copied targets add source tokens to the target side; every split shares one vocabulary.
  for (Corpus* c : {&s.clean, &s.dev, &s.test}) c->target_vocab = s.train.target_vocab;
  return s;
}

void save_dataset(const Splits& splits, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_tsv(splits.train, dir / "train.tsv");
  save_tsv(splits.clean, dir / "clean.tsv");
  save_tsv(splits.dev, dir / "dev.tsv");
  save_tsv(splits.test, dir / "test.tsv");
  splits.train.source_vocab.save(dir / "src.vocab");
  splits.train.target_vocab.save(dir / "trg.vocab");
  save_corruption(splits.train, dir / "corruption.tsv");
}

Splits load_dataset(const std::filesystem::path& dir) {
  const Vocabulary src = Vocabulary::load(dir / "src.vocab");
  const Vocabulary trg = Vocabulary::load(dir / "trg.vocab");
  Splits s;
  s.train = load_tsv(dir / "train.tsv", src, trg);
  if (std::filesystem::exists(dir / "corruption.tsv")) load_corruption(s.train, dir / "corruption.tsv");
  for (auto [name, dst] : {std::pair{"clean.tsv", &s.clean}, {"dev.tsv", &s.dev}, {"test.tsv", &s.test}}) {
    if (std::filesystem::exists(dir / name)) {
      *dst = load_tsv(dir / name, src, trg);
    } else {
      dst->source_vocab = src;
      dst->target_vocab = trg;
    }
  }
  return s;
}

}  // namespace glmask
