#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace glmask {

enum class Provenance { kClean, kCopied, kMisaligned, kJunk, kNone };

std::string to_string(Provenance p);
Provenance parse_provenance(const std::string& label);

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Tokens = std::vector<std::string>;

struct SentencePair {
  Tokens source;
  Tokens target;
  Provenance provenance = Provenance::kClean;
  std::size_t id = 0;
  /// Target positions overwritten by junk noise (empty unless provenance is junk).
  std::vector<std::size_t> corrupted;
};

/// Token <-> id map. Ids 0..3 are reserved for pad, begin, end and unknown.
class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kBegin = 1;
  static constexpr std::size_t kEnd = 2;
  static constexpr std::size_t kUnknown = 3;
  static constexpr std::size_t kReserved = 4;

  Vocabulary();

  std::size_t add(const std::string& token);
  std::size_t id(const std::string& token) const;  // kUnknown when absent
  const std::string& token(std::size_t id) const;
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  std::size_t size() const { return tokens_.size(); }

  /// One non-reserved token per line, in id order.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct Corpus {
  std::vector<SentencePair> pairs;
  Vocabulary source_vocab;
  Vocabulary target_vocab;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }
};

/// Surface form of synthetic token `index`. Most are purely alphabetic;
/// every fifth carries a digit.
std::string synthetic_token(std::size_t index);

/// Seed-derived bijection over token indices [0, vocab_size).
struct CipherKey {
  std::vector<std::size_t> forward;
  std::vector<std::size_t> inverse;

  static CipherKey from_seed(std::size_t vocab_size, std::uint64_t seed);
};

/// Map each index through `key`, then reverse every full block of three.
std::vector<std::size_t> encipher(std::span<const std::size_t> source, const CipherKey& key);
/// Exact inverse of encipher.
std::vector<std::size_t> decipher(std::span<const std::size_t> target, const CipherKey& key);

Corpus generate_cipher_corpus(std::size_t n, std::size_t vocab_size, std::size_t min_len,
                              std::size_t max_len, std::uint64_t seed);

struct NoiseSpec {
  double copied_rate = 0.0;
  double misaligned_rate = 0.0;
  double junk_rate = 0.0;
  std::uint64_t seed = 0;
};

/// Fraction of target positions junk noise overwrites.
inline constexpr double kJunkFraction = 0.3;

/// Corrupts floor(rate * n) pairs per category on disjoint, seed-chosen
/// subsets and relabels provenance. Untouched pairs are labeled clean.
Corpus inject_noise(const Corpus& corpus, const NoiseSpec& spec);

struct Splits {
  Corpus train, clean, dev, test;
};

/// Draws clean/dev/test from clean-provenance pairs; everything else is train.
Splits split_clean(const Corpus& corpus, std::size_t n_clean, std::size_t n_dev,
                   std::size_t n_test, std::uint64_t seed);

/// Padded id matrices for one batch. Pad masks are true at pad positions.
/// Targets carry begin/end markers.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t src_len = 0;
  std::size_t trg_len = 0;
  std::vector<std::size_t> src_ids;  // [batch, src_len]
  std::vector<std::size_t> trg_ids;  // [batch, trg_len]
  std::vector<char> src_pad;
  std::vector<char> trg_pad;
  std::vector<Provenance> provenance;
  std::vector<std::size_t> pair_index;  // position in the source corpus

  std::size_t src(std::size_t b, std::size_t s) const { return src_ids[b * src_len + s]; }
  std::size_t trg(std::size_t b, std::size_t t) const { return trg_ids[b * trg_len + t]; }
};

TokenBatch make_batch(const Corpus& corpus, std::span<const std::size_t> indices);

/// Concatenates batches row-wise, re-padding to the wider of the two.
TokenBatch concat_batches(const TokenBatch& a, const TokenBatch& b);

/// Infinite shuffled batch stream. Epoch e uses a permutation derived from
/// (seed, e), so the position (epoch, offset) is the whole state.
class BatchStream {
 public:
  BatchStream(const Corpus& corpus, std::size_t batch_size, std::size_t max_len,
              std::uint64_t seed);

  TokenBatch next();

  std::size_t epoch() const { return epoch_; }
  std::size_t offset() const { return offset_; }
  void seek(std::size_t epoch, std::size_t offset);
  std::size_t num_eligible() const { return eligible_.size(); }

 private:
  void shuffle_epoch();

  const Corpus* corpus_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::vector<std::size_t> eligible_;
  std::vector<std::size_t> order_;
  std::size_t epoch_ = 0;
  std::size_t offset_ = 0;
};

/// Lines of "source<TAB>target[<TAB>provenance]".
void save_tsv(const Corpus& corpus, const std::filesystem::path& path);
/// Vocabularies are built in first-appearance order.
Corpus load_tsv(const std::filesystem::path& path);
/// Uses the given vocabularies; unseen tokens map to the unknown id.
Corpus load_tsv(const std::filesystem::path& path, const Vocabulary& source_vocab,
                const Vocabulary& target_vocab);

/// Junk corruption positions, "pair-index<TAB>p1,p2,..." per junk pair.
void save_corruption(const Corpus& corpus, const std::filesystem::path& path);
void load_corruption(Corpus& corpus, const std::filesystem::path& path);

/// Everything gen-data needs. Clean, dev and test pairs are drawn before
/// noise is injected into the `n` train pairs.
struct DatasetSpec {
  std::size_t n = 20000;
  std::size_t vocab = 1000;
  std::size_t min_len = 3;
  std::size_t max_len = 10;
  std::size_t n_clean = 500;
  std::size_t n_dev = 500;
  std::size_t n_test = 500;
  double copied_rate = 0.15;
  double misaligned_rate = 0.15;
  double junk_rate = 0.10;
  std::uint64_t seed = 1;
};

Splits build_dataset(const DatasetSpec& spec);

/// train/clean/dev/test.tsv, src.vocab, trg.vocab and corruption.tsv.
void save_dataset(const Splits& splits, const std::filesystem::path& dir);
Splits load_dataset(const std::filesystem::path& dir);

}  // namespace glmask
