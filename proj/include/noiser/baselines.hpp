#pragma once

// Forward-pass-only comparison methods. "Removing" a token always means
// zeroing its embedding row, so the prompt length and positions are kept.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "noiser/core.hpp"
#include "noiser/model.hpp"
#include "noiser/parallel.hpp"
#include "noiser/random.hpp"

namespace noiser {

inline AttributionResult occlusion(const LanguageModel& model,
                                   const TokenSequence& tokens,
                                   std::size_t threads = 1) {
  const auto pred = greedy_next(model, tokens);
  const double p_target = prob_of(pred.dist, pred.token);
  const EmbeddingSequence base = model.embed(tokens);

  AttributionResult result;
  result.method = Method::Occlusion;
  result.bounding = Bounding::None;
  result.target_token = pred.token;
  result.scores.assign(tokens.size(), 0.0);
  parallel_for(tokens.size(), model.is_serial() ? 1 : threads, [&](std::size_t i) {
    EmbeddingSequence occluded = base;
    for (double& v : occluded.row(i)) v = 0.0;
    result.scores[i] = p_target - prob_of(model.forward_from_embeddings(occluded), pred.token);
  });
  return result;
}

struct LimeConfig {
  std::size_t n_samples = 200;
  /// Kernel width; unset means 0.25 * sqrt(T).
  std::optional<double> kernel_width;
  double ridge_lambda = 0.01;
  double mask_prob = 0.5;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  double width_for(std::size_t T) const {
    return kernel_width.value_or(0.25 * std::sqrt(static_cast<double>(T)));
  }

  void validate(std::size_t T) const {
    require(n_samples >= T + 1, "LIME needs n_samples >= T + 1");
    require(mask_prob > 0.0 && mask_prob < 1.0, "mask_prob must lie in (0,1)");
    require(ridge_lambda > 0.0, "ridge_lambda must be positive");
    require(width_for(T) > 0.0, "kernel width must be positive");
  }
};

/// Binary keep-masks used by lime(): row 0 is all ones, the rest keep each
/// token independently with probability cfg.mask_prob.
inline std::vector<std::vector<std::uint8_t>> lime_masks(std::size_t T, const LimeConfig& cfg) {
  Rng rng(cfg.seed);
  std::vector<std::vector<std::uint8_t>> masks(cfg.n_samples, std::vector<std::uint8_t>(T, 1));
  for (std::size_t s = 1; s < cfg.n_samples; ++s) {
    for (auto& bit : masks[s]) bit = rng.bernoulli(cfg.mask_prob) ? 1 : 0;
  }
  return masks;
}

/// Weighted ridge regression of p(target) on keep-masks; the intercept is
/// not penalized. Returns the per-token coefficients.
inline std::vector<double> fit_lime_surrogate(const std::vector<std::vector<std::uint8_t>>& masks,
                                              const std::vector<double>& response,
                                              double kernel_width,
                                              double ridge_lambda) {
  require(!masks.empty() && masks.size() == response.size(), "mask/response size mismatch");
  const auto n = static_cast<Eigen::Index>(masks.size());
  const auto T = static_cast<Eigen::Index>(masks.front().size());
  Eigen::MatrixXd design(n, T + 1);
  Eigen::VectorXd y(n);
  Eigen::VectorXd w(n);
  for (Eigen::Index s = 0; s < n; ++s) {
    double removed = 0.0;
    design(s, 0) = 1.0;
    for (Eigen::Index j = 0; j < T; ++j) {
      design(s, j + 1) = masks[s][j];
      removed += masks[s][j] ? 0.0 : 1.0;
    }
    y(s) = response[s];
    w(s) = std::exp(-(removed * removed) / (kernel_width * kernel_width));
  }
  Eigen::MatrixXd normal = design.transpose() * w.asDiagonal() * design;
  for (Eigen::Index j = 1; j <= T; ++j) normal(j, j) += ridge_lambda;
  const Eigen::VectorXd rhs = design.transpose() * w.asDiagonal() * y;

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(normal);
  qr.setThreshold(1e-12);
  if (qr.rank() < T + 1) throw Error("singular LIME regression: increase n_samples");
  const Eigen::VectorXd beta = qr.solve(rhs);
  return {beta.data() + 1, beta.data() + beta.size()};
}

inline AttributionResult lime(const LanguageModel& model,
                              const TokenSequence& tokens,
                              const LimeConfig& cfg) {
  const std::size_t T = tokens.size();
  cfg.validate(T);
  const auto pred = greedy_next(model, tokens);
  const EmbeddingSequence base = model.embed(tokens);
  const auto masks = lime_masks(T, cfg);

  std::vector<double> response(masks.size());
  parallel_for(masks.size(), model.is_serial() ? 1 : cfg.threads, [&](std::size_t s) {
    EmbeddingSequence masked = base;
    for (std::size_t i = 0; i < T; ++i) {
      if (!masks[s][i]) {
        for (double& v : masked.row(i)) v = 0.0;
      }
    }
    response[s] = prob_of(model.forward_from_embeddings(masked), pred.token);
  });

  AttributionResult result;
  result.method = Method::Lime;
  result.bounding = Bounding::None;
  result.target_token = pred.token;
  result.noise_seeds = {cfg.seed};
  result.scores = fit_lime_surrogate(masks, response, cfg.width_for(T), cfg.ridge_lambda);
  return result;
}

/// I.i.d. U(0,1) scores; the reference point of the log-ratio protocol.
inline AttributionResult random_attribution(std::size_t T, std::uint64_t seed,
                                            TokenId target = 0) {
  require(T >= 1, "random attribution needs T >= 1");
  Rng rng(seed);
  AttributionResult result;
  result.method = Method::Random;
  result.bounding = Bounding::None;
  result.target_token = target;
  result.noise_seeds = {seed};
  result.scores.resize(T);
  for (double& s : result.scores) s = rng.uniform();
  return result;
}

}  // namespace noiser
