#pragma once

// A small seeded decoder-only transformer used as a desk-scale stand-in for
// pretrained checkpoints. Residual blocks with raw-stream attention and a
// layer-normalized GELU MLP, learned absolute positions, untied output
// projection. Only determinism and smoothness matter to
// the attribution code, never the particular weights.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "noiser/model.hpp"
#include "noiser/random.hpp"

namespace noiser {

struct ToyConfig {
  std::size_t vocab_size = CharVocabulary::kSize;
  std::size_t d_model = 32;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t max_context = 64;
  /// Logit gain of the output projection; larger values sharpen the
  /// next-token distribution.
  double output_gain = 4.0;
  /// Gain of the query/key projections; larger values sharpen attention.
  double attention_gain = 0.25;
  /// Normalize the attention input (pre-norm). Off feeds the raw residual
  /// stream to attention, so a large perturbation can capture it.
  bool normalize_attention_input = false;
  /// Gain of the MLP output projection.
  double mlp_gain = 0.1;
};

class ToyTransformer final : public LanguageModel {
 public:
  using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vector = Eigen::VectorXd;

  explicit ToyTransformer(std::uint64_t seed, ToyConfig cfg = {})
      : seed_(seed), cfg_(cfg) {
    require(cfg_.d_model % cfg_.n_heads == 0, "d_model must divide into heads");
    require(cfg_.vocab_size == CharVocabulary::kSize,
            "toy transformer uses the 64-symbol character vocabulary");
    Rng rng(seed);
    const auto d = static_cast<Eigen::Index>(cfg_.d_model);
    const auto v = static_cast<Eigen::Index>(cfg_.vocab_size);
    const auto ctx = static_cast<Eigen::Index>(cfg_.max_context);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    token_embedding_ = gaussian(rng, v, d, 1.0);
    position_embedding_ = gaussian(rng, ctx, d, 0.3);
    layers_.resize(cfg_.n_layers);
    for (auto& layer : layers_) {
      layer.wq = gaussian(rng, d, d, cfg_.attention_gain * inv_sqrt_d);
      layer.wk = gaussian(rng, d, d, cfg_.attention_gain * inv_sqrt_d);
      layer.wv = gaussian(rng, d, d, inv_sqrt_d);
      layer.wo = gaussian(rng, d, d, inv_sqrt_d);
      layer.w1 = gaussian(rng, d, 4 * d, inv_sqrt_d);
      layer.b1 = gaussian(rng, 1, 4 * d, 0.1).row(0).transpose();
      layer.w2 = gaussian(rng, 4 * d, d, cfg_.mlp_gain * inv_sqrt_d);
    }
    unembed_ = gaussian(rng, d, v, cfg_.output_gain * inv_sqrt_d);
  }

  std::uint64_t seed() const noexcept { return seed_; }

  ModelInfo info() const override {
    return {cfg_.vocab_size, cfg_.d_model, "toy:" + std::to_string(seed_), cfg_.max_context};
  }

  TokenSequence tokenize(std::string_view text) const override {
    return CharVocabulary::tokenize(text);
  }

  std::string detokenize(std::span<const TokenId> ids) const override {
    return CharVocabulary::detokenize(ids);
  }

  EmbeddingSequence embed(const TokenSequence& tokens) const override {
    EmbeddingSequence out(tokens.size(), cfg_.d_model);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      const auto id = tokens[t];
      require(id >= 0 && static_cast<std::size_t>(id) < cfg_.vocab_size,
              "token id out of vocabulary");
      auto row = out.row(t);
      for (std::size_t j = 0; j < cfg_.d_model; ++j) row[j] = token_embedding_(id, j);
    }
    return out;
  }

  ProbDist forward_from_embeddings(const EmbeddingSequence& embeddings) const override {
    require(embeddings.width() == cfg_.d_model, "embedding width does not match d_model");
    require(embeddings.rows() >= 1, "empty embedding sequence");
    if (embeddings.rows() > cfg_.max_context) throw Error("prompt exceeds model context");

    const auto T = static_cast<Eigen::Index>(embeddings.rows());
    const auto d = static_cast<Eigen::Index>(cfg_.d_model);
    Matrix x = Eigen::Map<const Matrix>(embeddings.flat().data(), T, d);
    x += position_embedding_.topRows(T);

    // Only the last row feeds the output, so the final block computes just
    // that row.
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& layer = layers_[l];
      const Eigen::Index first = l + 1 == layers_.size() ? T - 1 : 0;
      x.bottomRows(T - first) +=
          attention(layer, cfg_.normalize_attention_input ? layer_norm(x) : x, first);
      Matrix hidden = layer_norm(x.bottomRows(T - first)) * layer.w1;
      hidden.rowwise() += layer.b1.transpose();
      gelu_inplace(hidden);
      x.bottomRows(T - first) += hidden * layer.w2;
    }

    const Matrix last = layer_norm(x.bottomRows(1));
    const Eigen::RowVectorXd logits = last * unembed_;
    return ProbDist::softmax(std::span<const double>(logits.data(), logits.size()));
  }

 private:
  struct Layer {
    Matrix wq, wk, wv, wo, w1, w2;
    Vector b1;
  };

  static Matrix gaussian(Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = stddev * rng.normal();
    return m;
  }

  // tanh approximation of GELU.
  static void gelu_inplace(Matrix& m) {
    constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
    // 1 + tanh(y) = 2 - 2 / (exp(2y) + 1), via the vectorized exp.
    auto x = m.array();
    x = x * (1.0 - 1.0 / ((2.0 * k * (x + 0.044715 * x.cube())).exp() + 1.0));
  }

  static Matrix layer_norm(const Matrix& x) {
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const double mean = x.row(r).mean();
      const double var = (x.row(r).array() - mean).square().mean();
      out.row(r) = (x.row(r).array() - mean) / std::sqrt(var + 1e-5);
    }
    return out;
  }

  /// Causal multi-head attention for query rows first..T-1.
  Matrix attention(const Layer& layer, const Matrix& h, Eigen::Index first) const {
    const Eigen::Index T = h.rows();
    const Eigen::Index R = T - first;
    const auto heads = static_cast<Eigen::Index>(cfg_.n_heads);
    const Eigen::Index hd = h.cols() / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const Matrix q = h.bottomRows(R) * layer.wq;
    const Matrix k = h * layer.wk;
    const Matrix v = h * layer.wv;
    Matrix out(R, h.cols());
    Matrix w(R, T);
    for (Eigen::Index head = 0; head < heads; ++head) {
      const Eigen::Index off = head * hd;
      w.noalias() = scale * q.middleCols(off, hd) * k.middleCols(off, hd).transpose();
      for (Eigen::Index r = 0; r < R; ++r) {
        const Eigen::Index visible = first + r + 1;
        auto row = w.row(r);
        const double mx = row.head(visible).maxCoeff();
        row.head(visible) = (row.head(visible).array() - mx).exp();
        row.head(visible) /= row.head(visible).sum();
        row.tail(T - visible).setZero();
      }
      out.middleCols(off, hd).noalias() = w * v.middleCols(off, hd);
    }
    return out * layer.wo;
  }

  std::uint64_t seed_;
  ToyConfig cfg_;
  Matrix token_embedding_;
  Matrix position_embedding_;
  std::vector<Layer> layers_;
  Matrix unembed_;
};

}  // namespace noiser
