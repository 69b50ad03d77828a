#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "noiser/model.hpp"

namespace noiser {

/// A constructed model whose flip points are known in closed form.
///
/// Every token embeds to the zero vector, so the embedding row at position i
/// *is* the perturbation applied there. Let r_i = ||row_i||_2 / (c_i * ref)
/// where `ref` is the reference noise norm. While every r_i <= 1 the model
/// predicts `base` with probability p0 - (p0 - floor) * min(1, sum r_i), with
/// the rest spread uniformly. Once any r_i > 1 it predicts `base + 1`.
/// Constructing with ref = ||n||_2 makes the maximal preserving scale for
/// noise n exactly c_i.
class ThresholdMock final : public LanguageModel {
 public:
  struct Options {
    TokenId base = 7;
    double p0 = 0.9;
    std::vector<double> thresholds;
    /// Threshold for positions beyond `thresholds`.
    double default_threshold = std::numeric_limits<double>::infinity();
    double reference_norm = 1.0;
    std::size_t d_model = 16;
    std::size_t max_context = 64;
  };

  explicit ThresholdMock(Options opt) : opt_(std::move(opt)) {
    constexpr auto V = static_cast<double>(CharVocabulary::kSize);
    require(opt_.base >= 0 && static_cast<std::size_t>(opt_.base) < CharVocabulary::kSize,
            "base prediction out of vocabulary");
    require(opt_.p0 > 1.0 / V && opt_.p0 < 1.0, "p0 must lie in (1/V, 1)");
    require(opt_.reference_norm > 0.0, "reference norm must be positive");
    for (double c : opt_.thresholds) require(c > 0.0, "thresholds must be positive");
    require(opt_.default_threshold > 0.0, "thresholds must be positive");
    floor_ = std::min(opt_.p0, 1.5 / V);
  }

  const Options& options() const noexcept { return opt_; }

  double threshold(std::size_t position) const {
    return position < opt_.thresholds.size() ? opt_.thresholds[position]
                                             : opt_.default_threshold;
  }

  /// Probability of `base` after the largest admissible drop.
  double floor_probability() const noexcept { return floor_; }

  ModelInfo info() const override {
    return {CharVocabulary::kSize, opt_.d_model, "threshold-mock", opt_.max_context};
  }

  TokenSequence tokenize(std::string_view text) const override {
    return CharVocabulary::tokenize(text);
  }

  std::string detokenize(std::span<const TokenId> ids) const override {
    return CharVocabulary::detokenize(ids);
  }

  EmbeddingSequence embed(const TokenSequence& tokens) const override {
    for (TokenId id : tokens.ids()) {
      require(static_cast<std::size_t>(id) < CharVocabulary::kSize, "token id out of vocabulary");
    }
    return EmbeddingSequence(tokens.size(), opt_.d_model, 0.0);
  }

  ProbDist forward_from_embeddings(const EmbeddingSequence& e) const override {
    require(e.width() == opt_.d_model, "embedding width does not match d_model");
    if (opt_.max_context != 0 && e.rows() > opt_.max_context) {
      throw Error("prompt exceeds model context");
    }
    double total = 0.0;
    bool flipped = false;
    for (std::size_t i = 0; i < e.rows(); ++i) {
      const auto row = e.row(i);
      const double norm = std::sqrt(std::inner_product(row.begin(), row.end(), row.begin(), 0.0));
      const double ratio = norm / (threshold(i) * opt_.reference_norm);
      if (ratio > 1.0) flipped = true;
      total += ratio;
    }
    constexpr std::size_t V = CharVocabulary::kSize;
    const auto top = flipped ? static_cast<std::size_t>(opt_.base + 1) % V
                             : static_cast<std::size_t>(opt_.base);
    const double p_top = flipped ? opt_.p0 : opt_.p0 - (opt_.p0 - floor_) * std::min(1.0, total);
    std::vector<double> probs(V, (1.0 - p_top) / static_cast<double>(V - 1));
    probs[top] = p_top;
    return ProbDist(std::move(probs));
  }

 private:
  Options opt_;
  double floor_ = 0.0;
};

}  // namespace noiser
