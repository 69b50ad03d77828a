#pragma once

// Shared domain types for the attribution toolkit: token ids, embedding
// matrices, next-token distributions and attribution results.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace noiser {

using TokenId = std::int32_t;

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

// ---------------------------------------------------------------------------
// TokenSequence

class TokenSequence {
 public:
  TokenSequence() = delete;

  /// Validates ids against `vocab_size` when it is non-zero.
  explicit TokenSequence(std::vector<TokenId> ids, std::size_t vocab_size = 0)
      : ids_(std::move(ids)) {
    require(!ids_.empty(), "empty prompt");
    for (TokenId id : ids_) {
      require(id >= 0, "negative token id");
      if (vocab_size != 0) {
        require(static_cast<std::size_t>(id) < vocab_size,
                "token id out of vocabulary");
      }
    }
  }

  std::size_t size() const noexcept { return ids_.size(); }
  TokenId operator[](std::size_t i) const { return ids_[i]; }
  std::span<const TokenId> ids() const noexcept { return ids_; }
  const std::vector<TokenId>& vec() const noexcept { return ids_; }

  TokenSequence appended(TokenId id) const {
    auto ids = ids_;
    ids.push_back(id);
    return TokenSequence(std::move(ids));
  }

  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;

 private:
  std::vector<TokenId> ids_;
};

// ---------------------------------------------------------------------------
// EmbeddingSequence: row-major T x d_model matrix.

class EmbeddingSequence {
 public:
  EmbeddingSequence(std::size_t rows, std::size_t width, double fill = 0.0)
      : rows_(rows), width_(width), data_(rows * width, fill) {
    require(width_ > 0, "embedding width must be positive");
  }

  EmbeddingSequence(std::size_t rows, std::size_t width,
                    std::vector<double> data)
      : rows_(rows), width_(width), data_(std::move(data)) {
    require(width_ > 0, "embedding width must be positive");
    require(data_.size() == rows_ * width_, "embedding data size mismatch");
    for (double v : data_) require(std::isfinite(v), "non-finite embedding");
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t width() const noexcept { return width_; }

  std::span<double> row(std::size_t i) {
    return {data_.data() + i * width_, width_};
  }
  std::span<const double> row(std::size_t i) const {
    return {data_.data() + i * width_, width_};
  }

  double& at(std::size_t r, std::size_t c) { return data_[r * width_ + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * width_ + c]; }

  std::span<const double> flat() const noexcept { return data_; }
  std::span<double> flat() noexcept { return data_; }

  EmbeddingSequence zeros_like() const {
    return EmbeddingSequence(rows_, width_, 0.0);
  }

  friend bool operator==(const EmbeddingSequence&,
                         const EmbeddingSequence&) = default;

 private:
  std::size_t rows_;
  std::size_t width_;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// ProbDist

class ProbDist {
 public:
  static constexpr double kSumTolerance = 1e-6;

  explicit ProbDist(std::vector<double> probs) : probs_(std::move(probs)) {
    require(!probs_.empty(), "empty distribution");
    double sum = 0.0;
    for (double p : probs_) {
      require(std::isfinite(p) && p >= 0.0 && p <= 1.0 + kSumTolerance,
              "probability outside [0,1]");
      sum += p;
    }
    require(std::abs(sum - 1.0) <= kSumTolerance,
            "probabilities do not sum to 1");
  }

  /// Builds a distribution from non-negative weights, renormalizing in
  /// double precision.
  static ProbDist normalized(std::vector<double> weights) {
    double sum = 0.0;
    for (double w : weights) {
      require(std::isfinite(w) && w >= 0.0, "invalid weight");
      sum += w;
    }
    require(sum > 0.0, "weights sum to zero");
    for (double& w : weights) w /= sum;
    return ProbDist(std::move(weights));
  }

  static ProbDist softmax(std::span<const double> logits) {
    require(!logits.empty(), "empty logits");
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> out(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      out[i] = std::exp(logits[i] - mx);
      sum += out[i];
    }
    for (double& v : out) v /= sum;
    return ProbDist(std::move(out));
  }

  std::size_t size() const noexcept { return probs_.size(); }
  double operator[](std::size_t i) const { return probs_[i]; }
  std::span<const double> probs() const noexcept { return probs_; }

  friend bool operator==(const ProbDist&, const ProbDist&) = default;

 private:
  std::vector<double> probs_;
};

/// Index of the largest probability; ties go to the lowest index.
inline TokenId argmax_token(const ProbDist& dist) {
  const auto p = dist.probs();
  return static_cast<TokenId>(std::max_element(p.begin(), p.end()) - p.begin());
}

inline double prob_of(const ProbDist& dist, TokenId id) {
  if (id < 0 || static_cast<std::size_t>(id) >= dist.size()) {
    throw Error("token id out of vocabulary");
  }
  return dist[static_cast<std::size_t>(id)];
}

/// Affine map of `scores` onto [0,1] (min -> 0, max -> 1). A constant
/// vector maps to 0.5 everywhere.
inline std::vector<double> minmax_normalize(std::span<const double> scores) {
  require(!scores.empty(), "cannot normalize an empty score list");
  for (double s : scores) require(std::isfinite(s), "non-finite score");
  const auto [lo_it, hi_it] = std::minmax_element(scores.begin(), scores.end());
  const double lo = *lo_it;
  const double range = *hi_it - lo;
  std::vector<double> out(scores.size(), 0.5);
  if (range > 0.0) {
    for (std::size_t i = 0; i < scores.size(); ++i) {
      out[i] = std::clamp((scores[i] - lo) / range, 0.0, 1.0);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// AttributionResult

enum class Method { Noiser, Occlusion, Lime, Random };

enum class Bounding { KMin, KMax, KMaxPerToken, NormL2, NormLinf, RandomK, None };

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::Noiser: return "noiser";
    case Method::Occlusion: return "occlusion";
    case Method::Lime: return "lime";
    case Method::Random: return "random";
  }
  return "?";
}

inline std::string_view to_string(Bounding b) {
  switch (b) {
    case Bounding::KMin: return "kmin";
    case Bounding::KMax: return "kmax";
    case Bounding::KMaxPerToken: return "kmax-per-token";
    case Bounding::NormL2: return "norm-l2";
    case Bounding::NormLinf: return "norm-linf";
    case Bounding::RandomK: return "random-k";
    case Bounding::None: return "none";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  for (Method m : {Method::Noiser, Method::Occlusion, Method::Lime, Method::Random}) {
    if (to_string(m) == s) return m;
  }
  throw Error("unknown method: " + std::string(s));
}

inline Bounding parse_bounding(std::string_view s) {
  for (Bounding b : {Bounding::KMin, Bounding::KMax, Bounding::KMaxPerToken,
                     Bounding::NormL2, Bounding::NormLinf, Bounding::RandomK,
                     Bounding::None}) {
    if (to_string(b) == s) return b;
  }
  throw Error("unknown bounding: " + std::string(s));
}

struct AttributionResult {
  std::vector<double> scores;
  Method method = Method::Noiser;
  Bounding bounding = Bounding::None;
  std::optional<std::vector<double>> k_values;
  std::optional<double> k_min;
  std::vector<std::uint64_t> noise_seeds;
  TokenId target_token = 0;
  /// Positions whose scale search hit the cap (first noise vector).
  std::vector<bool> saturated;

  /// Throws if the result violates its invariants for a prompt of length T.
  void validate(std::size_t prompt_length) const {
    require(scores.size() == prompt_length, "score count differs from prompt length");
    for (double s : scores) require(std::isfinite(s), "non-finite attribution score");
    if (k_values) {
      require(k_values->size() == prompt_length, "k_values length mismatch");
      require(k_min.has_value(), "k_values without k_min");
      require(*k_min == *std::min_element(k_values->begin(), k_values->end()),
              "k_min is not the minimum of k_values");
    }
  }

  friend bool operator==(const AttributionResult&,
                         const AttributionResult&) = default;
};

}  // namespace noiser
