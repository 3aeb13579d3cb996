#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "glmask/analysis.hpp"
#include "glmask/rng.hpp"
#include "json.hpp"

using namespace glmask;

namespace {

MaskingStats word_stats(const std::map<std::string, WordCount>& words) {
  MaskingStats s;
  s.per_word = words;
  return s;
}

struct Model {
  Corpus corpus;
  ModelConfig config;
  ParameterSet params;

  Model() {
    corpus = inject_noise(generate_cipher_corpus(120, 12, 2, 7, 8), {0.1, 0.1, 0.2, 4});
    config.num_layers = 1;
    config.num_heads = 2;
    config.d_model = 8;
    config.d_ff = 16;
    config.src_vocab_size = corpus.source_vocab.size();
    config.trg_vocab_size = corpus.target_vocab.size();
    params = init_model(config, 3);
    std::vector<double> flat = params.flatten();
    Rng rng(9);
    for (auto& v : flat) v += rng.uniform(-0.3, 0.3);
    params.unflatten(flat);
  }

  Corpus slice(std::size_t from, std::size_t to) const {
    Corpus c;
    c.source_vocab = corpus.source_vocab;
    c.target_vocab = corpus.target_vocab;
    c.pairs.assign(corpus.pairs.begin() + from, corpus.pairs.begin() + to);
    return c;
  }
};

}  // namespace

TEST_CASE("unmasked fraction") {
  CHECK(unmasked_fraction({1, 0, 1, 1}) == 0.75);
  CHECK(unmasked_fraction({}) == 0.0);
}

TEST_CASE("word mask rate and extreme profiles") {
  const MaskingStats s = word_stats({{"w", {4, 10}}});
  const ExtremeWords one = extreme_word_profiles(s, 1);
  REQUIRE(one.top.size() == 1);
  CHECK(one.top[0].mask_rate == 0.4);

  const ExtremeWords ab = extreme_word_profiles(word_stats({{"a", {9, 10}}, {"b", {1, 10}}}), 1);
  CHECK(ab.top[0].word == "a");
  CHECK(ab.bottom[0].word == "b");
  CHECK_FALSE(ab.truncated);

  const ExtremeWords few = extreme_word_profiles(word_stats({{"a", {9, 10}}, {"rare", {1, 2}}}), 5);
  CHECK(few.truncated);
  CHECK(few.eligible == 1);
  CHECK(few.top.size() == 1);
  CHECK_THROWS_AS(extreme_word_profiles(s, 0), std::invalid_argument);
}

TEST_CASE("top and bottom lists are disjoint when 2k fits") {
  std::map<std::string, WordCount> words;
  for (std::size_t i = 0; i < 10; ++i) words[synthetic_token(i)] = {i, 10};
  const ExtremeWords e = extreme_word_profiles(word_stats(words), 5);
  std::set<std::string> top, bottom;
  for (const auto& w : e.top) top.insert(w.word);
  for (const auto& w : e.bottom) bottom.insert(w.word);
  for (const auto& w : top) CHECK(bottom.count(w) == 0);
  CHECK(e.top[0].mask_rate == 0.9);
  CHECK(e.bottom[0].mask_rate == 0.0);
}

TEST_CASE("alphabetical classification") {
  CHECK(is_alphabetical("Haus"));
  CHECK(is_alphabetical("Straße"));
  CHECK_FALSE(is_alphabetical("12,5"));
  CHECK_FALSE(is_alphabetical("q7"));
  CHECK_FALSE(is_alphabetical(""));
  CHECK_FALSE(is_alphabetical("\xc3"));
  std::vector<WordMaskProfile> w(2);
  w[0].word = "Haus";
  w[0].is_alphabetical = true;
  w[1].word = "q7";
  CHECK(alphabetical_percentage(w) == 50.0);
  CHECK(alphabetical_percentage({}) == 0.0);
}

TEST_CASE("masked rendering") {
  const Tokens t = {"das", "Haus"};
  CHECK(render_masked(t, {1, 1}) == "das Haus");
  CHECK(render_masked(t, {0, 0}) == "⟦das⟧ ⟦Haus⟧");
  CHECK(render_masked(t, {1, 0}) == "das ⟦Haus⟧");
}

TEST_CASE("provenance comparison") {
  MaskingStats one;
  one.per_sentence = {{0, 0.5}, {1, 1.0}};
  one.provenance = {{0, Provenance::kJunk}, {1, Provenance::kJunk}};
  summarize_provenance(one);
  const auto rows = provenance_comparison(one);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].label == "junk");
  CHECK(rows[0].mean_unmasked == 0.75);
  CHECK(rows[1].label == "all");

  MaskingStats two;
  two.per_sentence = {{0, 1.0}, {1, 0.0}};
  two.provenance = {{0, Provenance::kClean}, {1, Provenance::kCopied}};
  summarize_provenance(two);
  CHECK(two.per_provenance_mean.at("clean") == 1.0);
  CHECK(two.per_provenance_mean.at("copied") == 0.0);
}

TEST_CASE("corpus scoring") {
  const Model m;
  const Corpus subset = m.slice(0, 70);
  const Corpus clean = m.slice(70, 120);

  const MaskingStats sent = score_corpus(m.params, m.config, subset, clean, Granularity::kSentence, 16);
  CHECK(sent.n_sentences == subset.size());
  for (const auto& [id, frac] : sent.per_sentence) CHECK((frac == 0.0 || frac == 1.0));

  const MaskingStats word = score_corpus(m.params, m.config, subset, clean, Granularity::kWord, 16);
  std::size_t tokens = 0;
  for (const auto& p : subset.pairs) tokens += p.target.size();
  std::size_t seen = 0;
  for (const auto& [w, c] : word.per_word) seen += c.seen;
  CHECK(seen == tokens);
  CHECK(word.corrupted.seen + word.uncorrupted.seen > 0);

  // Batch size changes the sharding but not the result.
  const MaskingStats other = score_corpus(m.params, m.config, subset, clean, Granularity::kWord, 7);
  CHECK(other.per_sentence == word.per_sentence);

  // The full clean gradient is the mean over all clean pairs, whatever the chunking.
  const FlatGradient a = full_clean_gradient(m.params, m.config, clean, 50);
  const FlatGradient b = full_clean_gradient(m.params, m.config, clean, 8);
  double diff = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) diff = std::max(diff, std::abs(a.values[i] - b.values[i]));
  CHECK(diff < 1e-12);

  CHECK_THROWS_AS(score_corpus(m.params, m.config, Corpus{}, clean, Granularity::kWord), std::invalid_argument);
}

TEST_CASE("report files") {
  const Model m;
  const Corpus subset = m.slice(0, 40);
  const Corpus clean = m.slice(40, 80);
  ReportInputs in;
  in.stats = score_corpus(m.params, m.config, subset, clean, Granularity::kWord);
  in.words = extreme_word_profiles(in.stats, 3);
  in.examples = dump_masked_examples(m.params, m.config, subset,
                                     full_clean_gradient(m.params, m.config, clean), 3);
  CHECK(in.examples.size() == 3);
  const auto dir = std::filesystem::temp_directory_path() / "glmask_tests" / "report";
  std::filesystem::remove_all(dir);
  write_report(dir, in);
  for (const char* f : {"stats.json", "provenance.csv", "word_profiles.csv", "examples.txt",
                        "plotdata/provenance.csv", "plotdata/alphabetical.csv"})
    CHECK(std::filesystem::exists(dir / f));
  std::ifstream js(dir / "stats.json");
  const auto j = nlohmann::json::parse(js);
  CHECK(j.at("n_sentences") == subset.size());
  CHECK(j.at("granularity") == "word");
}
