#pragma once

// Independent oracles and helper models shared by the unit and acceptance
// suites. Nothing here calls into the search or scoring code it checks.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <vector>

#include "noiser/model.hpp"
#include "noiser/random.hpp"
#include "noiser/toy_transformer.hpp"

namespace noiser::testing {

/// Last k on the grid {0, step, 2*step, ...} before the first prediction
/// flip. Returns `limit` when nothing flips up to it.
inline double linear_scan_max_scale(const LanguageModel& model, const EmbeddingSequence& base,
                                    TokenId target, std::size_t position,
                                    const std::vector<double>& noise, double step, double limit) {
  double last = 0.0;
  for (std::size_t s = 1;; ++s) {
    const double k = static_cast<double>(s) * step;
    if (k > limit) return limit;
    EmbeddingSequence e = base;
    auto row = e.row(position);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += k * noise[j];
    if (argmax_token(model.forward_from_embeddings(e)) != target) return last;
    last = k;
  }
}

/// Wraps a model and counts forward passes.
class CountingModel final : public LanguageModel {
 public:
  explicit CountingModel(const LanguageModel& inner) : inner_(inner) {}
  std::size_t forward_calls() const { return calls_; }
  void reset() { calls_ = 0; }

  ModelInfo info() const override { return inner_.info(); }
  TokenSequence tokenize(std::string_view t) const override { return inner_.tokenize(t); }
  std::string detokenize(std::span<const TokenId> ids) const override { return inner_.detokenize(ids); }
  EmbeddingSequence embed(const TokenSequence& x) const override { return inner_.embed(x); }
  ProbDist forward_from_embeddings(const EmbeddingSequence& e) const override {
    ++calls_;
    return inner_.forward_from_embeddings(e);
  }

 private:
  const LanguageModel& inner_;
  mutable std::atomic<std::size_t> calls_{0};
};

/// p(target) = intercept + sum_j weight_j * [row j non-zero]; the target is
/// token 0 and the remaining mass is spread over the other tokens.
class LinearResponseModel final : public LanguageModel {
 public:
  LinearResponseModel(double intercept, std::vector<double> weights, std::size_t d_model = 4)
      : intercept_(intercept), weights_(std::move(weights)), d_(d_model) {}

  ModelInfo info() const override { return {8, d_, "linear-response", 0}; }
  TokenSequence tokenize(std::string_view t) const override { return CharVocabulary::tokenize(t); }
  std::string detokenize(std::span<const TokenId> ids) const override { return CharVocabulary::detokenize(ids); }
  EmbeddingSequence embed(const TokenSequence& x) const override {
    return EmbeddingSequence(x.size(), d_, 1.0);
  }
  ProbDist forward_from_embeddings(const EmbeddingSequence& e) const override {
    double p = intercept_;
    for (std::size_t i = 0; i < e.rows() && i < weights_.size(); ++i) {
      const auto row = e.row(i);
      const bool present = std::any_of(row.begin(), row.end(), [](double v) { return v != 0.0; });
      if (present) p += weights_[i];
    }
    std::vector<double> probs(8, (1.0 - p) / 7.0);
    probs[0] = p;
    return ProbDist(probs);
  }

 private:
  double intercept_;
  std::vector<double> weights_;
  std::size_t d_;
};

inline std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double num = 0, da = 0, db = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - mb) * (rb[i] - mb);
  }
  return num / std::sqrt(da * db);
}

/// Random prompt of length in [1, max_len] over the known symbols.
inline TokenSequence random_prompt(Rng& rng, std::size_t max_len) {
  const std::size_t T = 1 + rng.next_u64() % max_len;
  std::vector<TokenId> ids(T);
  for (auto& id : ids) id = static_cast<TokenId>(rng.next_u64() % (CharVocabulary::kSize - 1));
  return TokenSequence(std::move(ids), CharVocabulary::kSize);
}

}  // namespace noiser::testing
