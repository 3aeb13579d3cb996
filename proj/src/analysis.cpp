#include "glmask/analysis.hpp"

#include <algorithm>
#include <clocale>
#include <cmath>
#include <cwctype>
#include <exception>
#include <fstream>
#include <iostream>
#include <mutex>
#include <stdexcept>

#include "json.hpp"

namespace glmask {

double unmasked_fraction(const std::vector<char>& mask) {
  if (mask.empty()) return 0.0;
  const auto kept = std::count_if(mask.begin(), mask.end(), [](char m) { return m != 0; });
  return static_cast<double>(kept) / static_cast<double>(mask.size());
}

namespace {

std::vector<TokenBatch> chunk(const Corpus& corpus, std::size_t batch_size) {
  std::vector<TokenBatch> out;
  for (std::size_t start = 0; start < corpus.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(corpus.size(), start + batch_size); ++i) idx.push_back(i);
    out.push_back(make_batch(corpus, idx));
  }
  return out;
}

// Runs f(i) for every i in [0, n) across threads; rethrows the first failure.
template <typename F>
void parallel_for(std::size_t n, F&& f) {
  std::exception_ptr error;
  std::mutex lock;
  const auto count = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t i = 0; i < count; ++i) {
    try {
      f(static_cast<std::size_t>(i));
    } catch (...) {
      std::lock_guard<std::mutex> guard(lock);
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
}

// Kept flag of target word t of batch row r.
bool word_kept(const AlignmentResult& r, std::size_t row, std::size_t t) {
  return r.granularity == Granularity::kWord ? r.mask[row * r.cols + t] != 0 : r.mask[row] != 0;
}

}  // namespace

FlatGradient full_clean_gradient(const ParameterSet& params, const ModelConfig& config,
                                 const Corpus& clean, std::size_t batch_size) {
  if (clean.empty()) throw std::invalid_argument("full_clean_gradient: empty clean split");
  const std::vector<TokenBatch> batches = chunk(clean, batch_size);
  std::vector<FlatGradient> parts(batches.size());
  parallel_for(batches.size(), [&](std::size_t i) { parts[i] = clean_gradient(params, config, batches[i]); });
  FlatGradient total = FlatGradient::zeros(params.layout());
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const double w = static_cast<double>(batches[i].batch) / static_cast<double>(clean.size());
    for (std::size_t j = 0; j < total.values.size(); ++j) total.values[j] += w * parts[i].values[j];
  }
  return total;
}

MaskingStats score_corpus(const ParameterSet& params, const ModelConfig& config, const Corpus& subset,
                          const Corpus& clean, Granularity granularity, std::size_t batch_size) {
  if (subset.empty()) throw std::invalid_argument("score_corpus: empty subset");
  const FlatGradient clean_grad = full_clean_gradient(params, config, clean);
  const std::vector<TokenBatch> batches = chunk(subset, batch_size);
  std::vector<AlignmentResult> results(batches.size());
  parallel_for(batches.size(), [&](std::size_t i) {
    results[i] = granularity == Granularity::kWord ? align_word(params, config, batches[i], clean_grad)
                                                   : align_sentence(params, config, batches[i], clean_grad);
  });

  MaskingStats stats;
  stats.granularity = granularity;
  stats.clean_grad_norm = clean_grad.norm();
  for (std::size_t b = 0; b < batches.size(); ++b) {
    for (std::size_t row = 0; row < batches[b].batch; ++row) {
      const SentencePair& pair = subset.pairs[batches[b].pair_index[row]];
      std::vector<char> kept(pair.target.size());
      for (std::size_t t = 0; t < pair.target.size(); ++t) {
        kept[t] = word_kept(results[b], row, t);
        WordCount& wc = stats.per_word[pair.target[t]];
        ++wc.seen;
        wc.masked += !kept[t];
        if (pair.provenance == Provenance::kJunk && !pair.corrupted.empty()) {
          const bool hit = std::find(pair.corrupted.begin(), pair.corrupted.end(), t) != pair.corrupted.end();
          PositionCount& pc = hit ? stats.corrupted : stats.uncorrupted;
          ++pc.seen;
          pc.masked += !kept[t];
        }
      }
      stats.per_sentence[pair.id] = unmasked_fraction(kept);
      stats.provenance[pair.id] = pair.provenance;
    }
  }
  stats.n_sentences = stats.per_sentence.size();
  summarize_provenance(stats);
  return stats;
}

void summarize_provenance(MaskingStats& stats) {
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (const auto& [id, frac] : stats.per_sentence) {
    auto it = stats.provenance.find(id);
    const std::string label = it == stats.provenance.end() ? to_string(Provenance::kNone) : to_string(it->second);
    acc[label].first += frac;
    ++acc[label].second;
  }
  stats.per_provenance_mean.clear();
  for (const auto& [label, sum_count] : acc)
    stats.per_provenance_mean[label] = sum_count.first / static_cast<double>(sum_count.second);
}

std::vector<ProvenanceRow> provenance_comparison(const MaskingStats& stats) {
  std::map<std::string, std::size_t> counts;
  double total = 0.0;
  for (const auto& [id, frac] : stats.per_sentence) {
    auto it = stats.provenance.find(id);
    ++counts[it == stats.provenance.end() ? to_string(Provenance::kNone) : to_string(it->second)];
    total += frac;
  }
  std::vector<ProvenanceRow> rows;
  for (const auto& [label, mean] : stats.per_provenance_mean) rows.push_back({label, mean, counts[label]});
  if (!stats.per_sentence.empty())
    rows.push_back({"all", total / static_cast<double>(stats.per_sentence.size()), stats.per_sentence.size()});
  return rows;
}

ExtremeWords extreme_word_profiles(const MaskingStats& stats, std::size_t k, std::size_t min_count) {
  if (k == 0) throw std::invalid_argument("extreme_word_profiles: k must be >= 1");
  std::vector<WordMaskProfile> eligible;
  for (const auto& [word, wc] : stats.per_word) {
    if (wc.seen < min_count || wc.seen == 0) continue;
    eligible.push_back({word, static_cast<double>(wc.masked) / static_cast<double>(wc.seen), is_alphabetical(word), wc.seen});
  }
  auto tie = [](const WordMaskProfile& a, const WordMaskProfile& b) {
    if (a.count != b.count) return a.count > b.count;
    return a.word < b.word;
  };
  ExtremeWords out;
  out.eligible = eligible.size();
  out.truncated = eligible.size() < k;
  out.top = eligible;
  std::sort(out.top.begin(), out.top.end(), [&](const auto& a, const auto& b) {
    return a.mask_rate != b.mask_rate ? a.mask_rate > b.mask_rate : tie(a, b);
  });
  out.bottom = eligible;
  std::sort(out.bottom.begin(), out.bottom.end(), [&](const auto& a, const auto& b) {
    return a.mask_rate != b.mask_rate ? a.mask_rate < b.mask_rate : tie(a, b);
  });
  out.top.resize(std::min(k, out.top.size()));
  out.bottom.resize(std::min(k, out.bottom.size()));
  return out;
}

namespace {

// Decodes one UTF-8 code point; returns false on malformed input.
bool next_code_point(const std::string& s, std::size_t& i, char32_t& cp) {
  const auto c = static_cast<unsigned char>(s[i]);
  std::size_t extra = 0;
  if (c < 0x80) {
    cp = c;
  } else if ((c >> 5) == 0x6) {
    cp = c & 0x1f;
    extra = 1;
  } else if ((c >> 4) == 0xe) {
    cp = c & 0x0f;
    extra = 2;
  } else if ((c >> 3) == 0x1e) {
    cp = c & 0x07;
    extra = 3;
  } else {
    return false;
  }
  if (i + extra >= s.size()) return false;
  for (std::size_t k = 1; k <= extra; ++k) {
    const auto cc = static_cast<unsigned char>(s[i + k]);
    if ((cc >> 6) != 0x2) return false;
    cp = (cp << 6) | (cc & 0x3f);
  }
  i += extra + 1;
  return true;
}

bool unicode_letter(char32_t cp) {
  if (cp < 0x80) return (cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z');
  static const bool have_locale = std::setlocale(LC_CTYPE, "C.UTF-8") != nullptr;
  return have_locale && std::iswalpha(static_cast<wint_t>(cp)) != 0;
}

}  // namespace

bool is_alphabetical(const std::string& word) {
  if (word.empty()) return false;
  std::size_t i = 0;
  while (i < word.size()) {
    char32_t cp = 0;
    if (!next_code_point(word, i, cp) || !unicode_letter(cp)) return false;
  }
  return true;
}

double alphabetical_percentage(const std::vector<WordMaskProfile>& words) {
  if (words.empty()) return 0.0;
  const auto n = std::count_if(words.begin(), words.end(), [](const auto& w) { return w.is_alphabetical; });
  return 100.0 * static_cast<double>(n) / static_cast<double>(words.size());
}

std::string render_masked(const Tokens& target, const std::vector<char>& kept) {
  std::string out;
  for (std::size_t t = 0; t < target.size(); ++t) {
    if (t) out += ' ';
    const bool keep = t < kept.size() && kept[t];
    out += keep ? target[t] : "⟦" + target[t] + "⟧";
  }
  return out;
}

std::vector<std::string> dump_masked_examples(const ParameterSet& params, const ModelConfig& config,
                                              const Corpus& pairs, const FlatGradient& clean_grad,
                                              std::size_t n) {
  std::vector<std::string> out;
  const std::size_t count = std::min(n, pairs.size());
  constexpr std::size_t kBatch = 16;
  for (std::size_t start = 0; start < count; start += kBatch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(count, start + kBatch); ++i) idx.push_back(i);
    const TokenBatch batch = make_batch(pairs, idx);
    const AlignmentResult r = align_word(params, config, batch, clean_grad);
    for (std::size_t row = 0; row < batch.batch; ++row) {
      const SentencePair& p = pairs.pairs[idx[row]];
      std::vector<char> kept(p.target.size());
      for (std::size_t t = 0; t < kept.size(); ++t) kept[t] = word_kept(r, row, t);
      std::string src;
      for (const auto& tok : p.source) src += (src.empty() ? "" : " ") + tok;
      out.push_back("# pair " + std::to_string(p.id) + " (" + to_string(p.provenance) + ")\nsource: " + src +
                    "\ntarget: " + render_masked(p.target, kept) + "\n");
    }
  }
  return out;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out.precision(17);
  return out;
}

}  // namespace

void write_report(const std::filesystem::path& dir, const ReportInputs& report) {
  std::filesystem::create_directories(dir / "plotdata");
  const MaskingStats& s = report.stats;

  nlohmann::ordered_json j;
  j["granularity"] = to_string(s.granularity);
  j["n_sentences"] = s.n_sentences;
  j["clean_grad_norm"] = s.clean_grad_norm;
  j["per_provenance_mean"] = s.per_provenance_mean;
  j["corrupted_positions"] = {{"masked", s.corrupted.masked}, {"seen", s.corrupted.seen}, {"mask_rate", s.corrupted.rate()}};
  j["uncorrupted_positions"] = {{"masked", s.uncorrupted.masked}, {"seen", s.uncorrupted.seen}, {"mask_rate", s.uncorrupted.rate()}};
  j["top_alphabetical_pct"] = alphabetical_percentage(report.words.top);
  j["bottom_alphabetical_pct"] = alphabetical_percentage(report.words.bottom);
  j["eligible_words"] = report.words.eligible;
  nlohmann::ordered_json sentences = nlohmann::ordered_json::object();
  for (const auto& [id, frac] : s.per_sentence) sentences[std::to_string(id)] = frac;
  j["per_sentence"] = sentences;
  nlohmann::ordered_json words = nlohmann::ordered_json::object();
  for (const auto& [w, c] : s.per_word) words[w] = {{"masked", c.masked}, {"seen", c.seen}};
  j["per_word"] = words;
  open_out(dir / "stats.json") << j.dump(2) << '\n';

  {
    auto out = open_out(dir / "provenance.csv");
    auto plot = open_out(dir / "plotdata" / "provenance.csv");
    out << "provenance,mean_unmasked,count\n";
    plot << "x,y\n";
    for (const auto& row : provenance_comparison(s)) {
      out << row.label << ',' << row.mean_unmasked << ',' << row.count << '\n';
      plot << row.label << ',' << row.mean_unmasked << '\n';
    }
  }
  {
    auto out = open_out(dir / "word_profiles.csv");
    auto plot = open_out(dir / "plotdata" / "word_mask_rate.csv");
    out << "list,word,count,mask_rate,is_alphabetical\n";
    plot << "x,y\n";
    for (const auto* list : {&report.words.top, &report.words.bottom}) {
      const char* name = list == &report.words.top ? "top" : "bottom";
      std::size_t rank = 0;
      for (const auto& w : *list) {
        out << name << ',' << csv_field(w.word) << ',' << w.count << ',' << w.mask_rate << ','
            << (w.is_alphabetical ? "true" : "false") << '\n';
        if (list == &report.words.top) plot << rank++ << ',' << w.mask_rate << '\n';
      }
    }
  }
  {
    auto plot = open_out(dir / "plotdata" / "alphabetical.csv");
    plot << "x,y\ntop," << alphabetical_percentage(report.words.top) << "\nbottom,"
         << alphabetical_percentage(report.words.bottom) << '\n';
  }
  {
    auto plot = open_out(dir / "plotdata" / "sentence_unmasked_hist.csv");
    std::vector<std::size_t> bins(11, 0);
    for (const auto& [id, frac] : s.per_sentence) ++bins[static_cast<std::size_t>(std::min(10.0, std::floor(frac * 10.0)))];
    plot << "x,y\n";
    for (std::size_t b = 0; b < bins.size(); ++b) plot << static_cast<double>(b) / 10.0 << ',' << bins[b] << '\n';
  }
  {
    auto out = open_out(dir / "examples.txt");
    for (const auto& e : report.examples) out << e << '\n';
  }
}

}  // namespace glmask
