#pragma once

// Soft sufficiency / comprehensiveness for generation. Embedding elements
// are kept with probability equal to their token's normalized score
// (retain) or one minus it (remove); the change in the next-token
// distribution is measured with the Hellinger distance and normalized by
// the distance to an all-zero input.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "noiser/core.hpp"
#include "noiser/model.hpp"
#include "noiser/parallel.hpp"
#include "noiser/random.hpp"

namespace noiser {

inline double hellinger(const ProbDist& p, const ProbDist& q) {
  require(p.size() == q.size(), "distribution length mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = std::sqrt(p[i]) - std::sqrt(q[i]);
    sum += d * d;
  }
  return std::min(1.0, std::sqrt(sum) / std::numbers::sqrt2);
}

enum class SoftPerturbMode { Retain, Remove };

/// Multiplies each element of row i by an independent Bernoulli(q_i) draw,
/// q_i = scores01[i] (Retain) or 1 - scores01[i] (Remove). Rows beyond
/// scores01.size() are left untouched.
inline EmbeddingSequence soft_perturb_prefix(const EmbeddingSequence& e,
                                             std::span<const double> scores01,
                                             SoftPerturbMode mode,
                                             std::uint64_t seed) {
  require(scores01.size() <= e.rows(), "more scores than embedding rows");
  for (double s : scores01) {
    require(s >= 0.0 && s <= 1.0, "soft perturbation score outside [0,1]");
  }
  Rng rng(seed);
  EmbeddingSequence out = e;
  for (std::size_t i = 0; i < scores01.size(); ++i) {
    const double q = mode == SoftPerturbMode::Retain ? scores01[i] : 1.0 - scores01[i];
    for (double& v : out.row(i)) {
      if (!rng.bernoulli(q)) v = 0.0;
    }
  }
  return out;
}

inline EmbeddingSequence soft_perturb(const EmbeddingSequence& e,
                                      std::span<const double> scores01,
                                      SoftPerturbMode mode,
                                      std::uint64_t seed) {
  require(scores01.size() == e.rows(), "score count differs from embedding rows");
  return soft_perturb_prefix(e, scores01, mode, seed);
}

// ---------------------------------------------------------------------------
// Classification form, kept for the Soft-S = 1 - Soft-C identity.

inline double soft_comprehensiveness(double p_full, double p_perturbed) {
  return std::max(0.0, p_full - p_perturbed);
}

inline double soft_sufficiency(double p_full, double p_perturbed) {
  return 1.0 - soft_comprehensiveness(p_full, p_perturbed);
}

/// Soft-C normalized by 1 - S(X, y, 0), S(X, y, 0) being the sufficiency of
/// the zero input.
inline double normalized_soft_comprehensiveness(double soft_c, double zero_sufficiency) {
  require(zero_sufficiency < 1.0, "degenerate normalizer");
  return soft_c / (1.0 - zero_sufficiency);
}

inline double normalized_soft_sufficiency(double soft_s, double zero_sufficiency) {
  require(zero_sufficiency < 1.0, "degenerate normalizer");
  return (soft_s - zero_sufficiency) / (1.0 - zero_sufficiency);
}

// ---------------------------------------------------------------------------
// Generation form

struct SoftMetricConfig {
  std::size_t n_mask_draws = 10;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

struct StepMetrics {
  double soft_ns = 0.0;
  double soft_nc = 0.0;
  double delta_p_zero = 0.0;
  /// Greedy token predicted from the unperturbed context.
  TokenId next_token = 0;
};

struct FaithfulnessRecord {
  double soft_ns = 0.0;
  double soft_nc = 0.0;
  double delta_p_zero = 0.0;
  std::vector<StepMetrics> per_step;
  std::size_t n_mask_draws = 0;
  std::uint64_t seed = 0;
};

/// Soft-NS / Soft-NC of the next token after `context`. `scores01` covers
/// the first scores01.size() rows (the attributed prompt); the zero input
/// zeroes exactly those rows. Issues 2 + 2 * n_mask_draws forward passes.
inline StepMetrics soft_ns_nc_step(const LanguageModel& model,
                                   const TokenSequence& context,
                                   std::span<const double> scores01,
                                   const SoftMetricConfig& cfg) {
  require(cfg.n_mask_draws >= 1, "n_mask_draws must be at least 1");
  require(!scores01.empty() && scores01.size() <= context.size(),
          "scores must cover a non-empty prefix of the context");
  check_context(model, context.size());
  const EmbeddingSequence full = model.embed(context);
  const ProbDist p_full = model.forward_from_embeddings(full);

  EmbeddingSequence zero = full;
  for (std::size_t i = 0; i < scores01.size(); ++i) {
    for (double& v : zero.row(i)) v = 0.0;
  }
  const double dp_zero = hellinger(p_full, model.forward_from_embeddings(zero));
  if (!(dp_zero > 0.0)) throw Error("degenerate normalizer: zero input matches full input");

  std::vector<double> retain(cfg.n_mask_draws), remove(cfg.n_mask_draws);
  const std::size_t workers = model.is_serial() ? 1 : cfg.threads;
  parallel_for(2 * cfg.n_mask_draws, workers, [&](std::size_t job) {
    const std::size_t d = job / 2;
    const bool is_retain = job % 2 == 0;
    const auto mode = is_retain ? SoftPerturbMode::Retain : SoftPerturbMode::Remove;
    const auto perturbed = soft_perturb_prefix(full, scores01, mode, derive_seed(cfg.seed, job));
    const double h = hellinger(p_full, model.forward_from_embeddings(perturbed));
    (is_retain ? retain : remove)[d] = h;
  });

  double dp_retain = 0.0, dp_remove = 0.0;
  for (std::size_t d = 0; d < cfg.n_mask_draws; ++d) {
    dp_retain += retain[d];
    dp_remove += remove[d];
  }
  dp_retain /= static_cast<double>(cfg.n_mask_draws);
  dp_remove /= static_cast<double>(cfg.n_mask_draws);

  return {std::max(0.0, dp_zero - dp_retain) / dp_zero, dp_remove / dp_zero, dp_zero,
          argmax_token(p_full)};
}

/// Greedily generates `horizon` tokens after `prompt` and averages the
/// per-step metrics. `raw_scores` are min-max normalized first, so any
/// attribution method's output can be passed unchanged.
inline FaithfulnessRecord faithfulness_generation(const LanguageModel& model,
                                                  const TokenSequence& prompt,
                                                  std::span<const double> raw_scores,
                                                  std::size_t horizon,
                                                  const SoftMetricConfig& cfg = {}) {
  require(horizon >= 1, "horizon must be at least 1");
  require(raw_scores.size() == prompt.size(), "score count differs from prompt length");
  const auto scores01 = minmax_normalize(raw_scores);

  FaithfulnessRecord rec;
  rec.n_mask_draws = cfg.n_mask_draws;
  rec.seed = cfg.seed;
  TokenSequence context = prompt;
  for (std::size_t t = 0; t < horizon; ++t) {
    SoftMetricConfig step_cfg = cfg;
    step_cfg.seed = derive_seed(cfg.seed, t);
    const auto step = soft_ns_nc_step(model, context, scores01, step_cfg);
    rec.per_step.push_back(step);
    if (t + 1 < horizon) context = context.appended(step.next_token);
  }
  for (const auto& s : rec.per_step) {
    rec.soft_ns += s.soft_ns;
    rec.soft_nc += s.soft_nc;
    rec.delta_p_zero += s.delta_p_zero;
  }
  const auto n = static_cast<double>(rec.per_step.size());
  rec.soft_ns /= n;
  rec.soft_nc /= n;
  rec.delta_p_zero /= n;
  return rec;
}

/// ln(method / random). Zero when the method matches the random baseline.
inline double log_ratio_score(double method_mean, double random_mean) {
  if (!(method_mean > 0.0) || !(random_mean > 0.0)) throw Error("undefined log ratio");
  return std::log(method_mean / random_mean);
}

/// Final faithfulness: the log ratios of Soft-NS and Soft-NC, summed.
inline double faithfulness_score(double method_ns, double method_nc,
                                 double random_ns, double random_nc) {
  return log_ratio_score(method_ns, random_ns) + log_ratio_score(method_nc, random_nc);
}

}  // namespace noiser
