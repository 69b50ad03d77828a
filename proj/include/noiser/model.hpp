#pragma once

// The language model contract every attribution method works against:
// token ids in, embeddings out, and a next-token distribution computed from
// an (optionally perturbed) embedding matrix.

#include <array>
#include <cctype>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <utility>

#include "noiser/core.hpp"

namespace noiser {

struct ModelInfo {
  std::size_t vocab_size = 0;
  std::size_t d_model = 0;
  std::string name;
  /// Longest accepted prompt; 0 means unlimited.
  std::size_t max_context = 0;

  void validate() const {
    require(vocab_size >= 2, "vocab_size must be at least 2");
    require(d_model >= 1, "d_model must be positive");
  }
};

class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  virtual ModelInfo info() const = 0;
  virtual TokenSequence tokenize(std::string_view text) const = 0;
  virtual std::string detokenize(std::span<const TokenId> ids) const = 0;
  virtual EmbeddingSequence embed(const TokenSequence& tokens) const = 0;
  /// Distribution of the token following the last row of `embeddings`.
  virtual ProbDist forward_from_embeddings(const EmbeddingSequence& embeddings) const = 0;

  /// True when concurrent calls are unsafe; callers must then serialize.
  virtual bool is_serial() const { return false; }

  std::string detokenize(const TokenSequence& tokens) const {
    return detokenize(tokens.ids());
  }
  std::string token_text(TokenId id) const {
    const TokenId one[1] = {id};
    return detokenize(std::span<const TokenId>(one));
  }
};

inline void check_context(const LanguageModel& model, std::size_t length) {
  const auto limit = model.info().max_context;
  if (limit != 0 && length > limit) throw Error("prompt exceeds model context");
}

struct Prediction {
  TokenId token;
  ProbDist dist;
};

/// Greedy next token for `tokens` together with the full distribution.
inline Prediction greedy_next(const LanguageModel& model, const TokenSequence& tokens) {
  check_context(model, tokens.size());
  ProbDist dist = model.forward_from_embeddings(model.embed(tokens));
  const TokenId top = argmax_token(dist);
  return {top, std::move(dist)};
}

/// Forward pass with `delta` added to the embedding row at `position`.
inline ProbDist forward_with_override(const LanguageModel& model,
                                      const EmbeddingSequence& base,
                                      std::size_t position,
                                      std::span<const double> delta) {
  require(position < base.rows(), "override position out of range");
  require(delta.size() == base.width(), "override width does not match d_model");
  EmbeddingSequence perturbed = base;
  auto row = perturbed.row(position);
  for (std::size_t j = 0; j < row.size(); ++j) row[j] += delta[j];
  return model.forward_from_embeddings(perturbed);
}

inline ProbDist forward_with_override(const LanguageModel& model,
                                      const TokenSequence& tokens,
                                      std::size_t position,
                                      std::span<const double> delta) {
  check_context(model, tokens.size());
  return forward_with_override(model, model.embed(tokens), position, delta);
}

// ---------------------------------------------------------------------------
// Fixed 64-symbol character vocabulary shared by the built-in models.

class CharVocabulary {
 public:
  static constexpr std::size_t kSize = 64;
  static constexpr TokenId kUnknown = kSize - 1;

  static constexpr std::string_view symbols() {
    // 26 letters, 10 digits, space, 26 punctuation marks; id 63 is unknown.
    return "abcdefghijklmnopqrstuvwxyz0123456789 .,!?'\"-:;()/&%$#@+=*_[]<>\n";
  }

  static TokenId encode(char c) {
    const char lower = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    const auto pos = symbols().find(lower);
    return pos == std::string_view::npos ? kUnknown : static_cast<TokenId>(pos);
  }

  static char decode(TokenId id) {
    if (id < 0 || id >= kUnknown) return '~';
    return symbols()[static_cast<std::size_t>(id)];
  }

  static TokenSequence tokenize(std::string_view text) {
    std::vector<TokenId> ids;
    ids.reserve(text.size());
    for (char c : text) ids.push_back(encode(c));
    return TokenSequence(std::move(ids), kSize);
  }

  static std::string detokenize(std::span<const TokenId> ids) {
    std::string out;
    out.reserve(ids.size());
    for (TokenId id : ids) out.push_back(decode(id));
    return out;
  }
};

static_assert(CharVocabulary::symbols().size() == CharVocabulary::kSize - 1);

}  // namespace noiser
