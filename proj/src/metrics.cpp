#include "glmask/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace glmask {

namespace {

using Counts = std::map<std::vector<std::string>, std::size_t>;

Counts count_ngrams(const Tokens& tokens, std::size_t n) {
  Counts out;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i)
    ++out[std::vector<std::string>(tokens.begin() + static_cast<long>(i),
                                   tokens.begin() + static_cast<long>(i + n))];
  return out;
}

double combine(const std::size_t (&match)[4], const std::size_t (&total)[4], bool smooth,
               double brevity) {
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    double m = static_cast<double>(match[n]), t = static_cast<double>(total[n]);
    if (smooth && n > 0) {
      m += 1.0;
      t += 1.0;
    }
    if (m == 0.0 || t == 0.0) return 0.0;
    log_sum += std::log(m / t) / 4.0;
  }
  return 100.0 * brevity * std::exp(log_sum);
}

}  // namespace

BleuScore corpus_bleu(const std::vector<Tokens>& hypotheses, const std::vector<Tokens>& references) {
  if (hypotheses.empty()) throw std::invalid_argument("corpus_bleu: no hypotheses");
  if (hypotheses.size() != references.size())
    throw std::invalid_argument("corpus_bleu: " + std::to_string(hypotheses.size()) +
                                " hypotheses for " + std::to_string(references.size()) + " references");
  std::size_t match[4] = {}, total[4] = {};
  std::size_t hyp_len = 0, ref_len = 0;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    hyp_len += hypotheses[s].size();
    ref_len += references[s].size();
    for (std::size_t n = 1; n <= 4; ++n) {
      const Counts h = count_ngrams(hypotheses[s], n), r = count_ngrams(references[s], n);
      for (const auto& [gram, c] : h) {
        total[n - 1] += c;
        const auto it = r.find(gram);
        if (it != r.end()) match[n - 1] += std::min(c, it->second);
      }
    }
  }
  if (hyp_len == 0) return {};
  const double brevity =
      hyp_len >= ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  return {combine(match, total, true, brevity), combine(match, total, false, brevity)};
}

AccuracyCount token_matches(const std::vector<std::size_t>& hypothesis,
                            const std::vector<std::size_t>& reference) {
  AccuracyCount c;
  c.total = reference.size();
  for (std::size_t t = 0; t < reference.size() && t < hypothesis.size(); ++t)
    c.matched += hypothesis[t] == reference[t];
  return c;
}

Translation translate(const ParameterSet& params, const ModelConfig& config, const Corpus& corpus,
                      std::size_t limit, std::size_t extra_len) {
  const std::size_t n = limit == 0 ? corpus.size() : std::min(limit, corpus.size());
  constexpr std::size_t kChunk = 64;
  Translation out;
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t stop = std::min(n, start + kChunk);
    std::vector<std::vector<std::size_t>> sources, refs;
    std::size_t longest = 0;
    for (std::size_t i = start; i < stop; ++i) {
      const auto& p = corpus.pairs[i];
      std::vector<std::size_t> s, r;
      for (const auto& tok : p.source) s.push_back(corpus.source_vocab.id(tok));
      for (const auto& tok : p.target) r.push_back(corpus.target_vocab.id(tok));
      longest = std::max(longest, r.size());
      sources.push_back(std::move(s));
      refs.push_back(std::move(r));
    }
    const auto decoded = greedy_decode(params, config, sources, longest + extra_len);
    for (std::size_t k = 0; k < decoded.size(); ++k) {
      const AccuracyCount c = token_matches(decoded[k], refs[k]);
      out.accuracy.matched += c.matched;
      out.accuracy.total += c.total;
      Tokens hyp;
      for (auto id : decoded[k]) hyp.push_back(corpus.target_vocab.token(id));
      out.hypotheses.push_back(std::move(hyp));
      out.references.push_back(corpus.pairs[start + k].target);
    }
  }
  return out;
}

double token_accuracy(const ParameterSet& params, const ModelConfig& config, const Corpus& corpus,
                      std::size_t limit) {
  return translate(params, config, corpus, limit).accuracy.value();
}

}  // namespace glmask
