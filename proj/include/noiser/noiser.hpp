#pragma once

// Noise-based feature attribution.
//
// For each prompt position the engine finds the largest multiple k_i of a
// standard-normal noise vector n that can be added to that token's
// embedding without changing the greedy prediction. The scale used for
// scoring is then chosen by a bounding rule (k_min by default) and each
// token's score is the drop in the predicted token's probability when
// only that token is perturbed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "noiser/core.hpp"
#include "noiser/model.hpp"
#include "noiser/parallel.hpp"
#include "noiser/random.hpp"

namespace noiser {

struct NoiseSpec {
  std::uint64_t seed = 0;
  std::vector<double> values;

  std::size_t size() const noexcept { return values.size(); }

  double l2_norm() const {
    double s = 0.0;
    for (double v : values) s += v * v;
    return std::sqrt(s);
  }

  std::vector<double> scaled(double k) const {
    std::vector<double> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = k * values[i];
    return out;
  }
};

inline NoiseSpec sample_noise(std::size_t d_model, std::uint64_t seed) {
  require(d_model >= 1, "d_model must be positive");
  Rng rng(seed);
  NoiseSpec n{seed, std::vector<double>(d_model)};
  for (double& v : n.values) v = rng.normal();
  return n;
}

/// Seed of the j-th noise vector of a run.
constexpr std::uint64_t noise_seed(std::uint64_t base_seed, std::size_t j) noexcept {
  return derive_seed(base_seed, j);
}

struct NoiserConfig {
  std::size_t n_noise = 10;
  std::size_t bisect_steps = 10;
  Bounding bounding = Bounding::KMin;
  std::uint64_t base_seed = 0;
  double bracket_start = 1.0;
  double bracket_cap = 1024.0;
  /// Scale of the unbounded (None) variant.
  double unbounded_scale = 1.0;
  /// Worker threads for per-position work; serial models always use one.
  std::size_t threads = 1;

  void validate() const {
    require(n_noise >= 1, "n_noise must be at least 1");
    require(bisect_steps >= 1, "bisect_steps must be at least 1");
    require(bracket_start > 0.0, "bracket_start must be positive");
    require(bracket_cap >= bracket_start, "bracket_cap must be >= bracket_start");
    require(unbounded_scale >= 0.0, "unbounded_scale must be non-negative");
  }
};

inline bool needs_profile(Bounding b) {
  return b == Bounding::KMin || b == Bounding::KMax || b == Bounding::KMaxPerToken;
}

inline std::size_t worker_count(const LanguageModel& model, std::size_t requested) {
  return model.is_serial() ? 1 : std::max<std::size_t>(requested, 1);
}

// ---------------------------------------------------------------------------
// Maximum-scale search

struct ScaleSearch {
  double k = 0.0;
  bool saturated = false;
  /// Width of the final bisection interval.
  double resolution = 0.0;
  std::size_t forward_passes = 0;
};

/// Largest prediction-preserving multiple of `noise` at `position`.
///
/// Starts at cfg.bracket_start and doubles until the prediction flips or the
/// cap is reached, then bisects the bracketing interval cfg.bisect_steps
/// times and returns the largest preserving probe. A position that never
/// flips up to the cap returns the cap with `saturated` set.
inline ScaleSearch find_max_scale(const LanguageModel& model,
                                  const EmbeddingSequence& base,
                                  TokenId target,
                                  std::size_t position,
                                  const NoiseSpec& noise,
                                  const NoiserConfig& cfg) {
  cfg.validate();
  require(position < base.rows(), "position out of range");
  require(noise.size() == base.width(), "noise width does not match d_model");

  ScaleSearch out;
  auto preserved = [&](double k) {
    ++out.forward_passes;
    const auto dist = forward_with_override(model, base, position, noise.scaled(k));
    return argmax_token(dist) == target;
  };

  double lo = 0.0;
  double hi = cfg.bracket_start;
  if (preserved(hi)) {
    lo = hi;
    for (;;) {
      if (lo >= cfg.bracket_cap) {
        out.k = cfg.bracket_cap;
        out.saturated = true;
        return out;
      }
      hi = std::min(2.0 * lo, cfg.bracket_cap);
      if (!preserved(hi)) break;
      lo = hi;
    }
  } else if (!preserved(0.0)) {
    throw Error("internal consistency: prediction changes without perturbation");
  }

  for (std::size_t step = 0; step < cfg.bisect_steps; ++step) {
    const double mid = 0.5 * (lo + hi);
    if (preserved(mid)) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  out.k = lo;
  out.resolution = hi - lo;
  return out;
}

inline ScaleSearch find_max_scale(const LanguageModel& model,
                                  const TokenSequence& tokens,
                                  std::size_t position,
                                  const NoiseSpec& noise,
                                  const NoiserConfig& cfg) {
  const auto pred = greedy_next(model, tokens);
  return find_max_scale(model, model.embed(tokens), pred.token, position, noise, cfg);
}

// ---------------------------------------------------------------------------
// Scaling profile

struct ScalingProfile {
  std::vector<double> k_values;
  double k_min = 0.0;
  double k_max = 0.0;
  std::size_t search_steps = 0;
  double bracket_cap = 0.0;
  std::vector<bool> saturated;
  std::vector<double> resolution;
};

inline ScalingProfile compute_profile(const LanguageModel& model,
                                      const EmbeddingSequence& base,
                                      TokenId target,
                                      const NoiseSpec& noise,
                                      const NoiserConfig& cfg) {
  const std::size_t T = base.rows();
  std::vector<ScaleSearch> found(T);
  parallel_for(T, worker_count(model, cfg.threads), [&](std::size_t i) {
    found[i] = find_max_scale(model, base, target, i, noise, cfg);
  });

  ScalingProfile p;
  p.search_steps = cfg.bisect_steps;
  p.bracket_cap = cfg.bracket_cap;
  for (const auto& f : found) {
    p.k_values.push_back(f.k);
    p.saturated.push_back(f.saturated);
    p.resolution.push_back(f.resolution);
  }
  p.k_min = *std::min_element(p.k_values.begin(), p.k_values.end());
  p.k_max = *std::max_element(p.k_values.begin(), p.k_values.end());
  return p;
}

inline ScalingProfile compute_profile(const LanguageModel& model,
                                      const TokenSequence& tokens,
                                      const NoiseSpec& noise,
                                      const NoiserConfig& cfg) {
  const auto pred = greedy_next(model, tokens);
  return compute_profile(model, model.embed(tokens), pred.token, noise, cfg);
}

// ---------------------------------------------------------------------------
// Bounding

/// Scale applied at `position` under cfg.bounding. `random_k` is the
/// per-noise-vector U(0,1) draw used by RandomK, shared by all positions.
inline double effective_scale(const ScalingProfile* profile,
                              std::size_t position,
                              const NoiserConfig& cfg,
                              std::size_t d_model,
                              double random_k) {
  if (needs_profile(cfg.bounding)) {
    require(profile != nullptr, "bounding requires a scaling profile");
  }
  switch (cfg.bounding) {
    case Bounding::KMin: return profile->k_min;
    case Bounding::KMax: return profile->k_max;
    case Bounding::KMaxPerToken:
      require(position < profile->k_values.size(), "position out of range");
      return profile->k_values[position];
    case Bounding::NormL2:
      require(d_model >= 1, "d_model must be positive");
      return 1.0 / std::sqrt(static_cast<double>(d_model));
    case Bounding::NormLinf:
      require(d_model >= 2, "L-inf bounding needs d_model >= 2");
      return 1.0 / std::sqrt(2.0 * std::log(static_cast<double>(d_model)));
    case Bounding::RandomK: return random_k;
    case Bounding::None: return cfg.unbounded_scale;
  }
  throw Error("unknown bounding");
}

/// U(0,1) draw for RandomK tied to a noise vector's seed.
inline double random_scale_for(std::uint64_t noise_seed_value) {
  return Rng(derive_seed(noise_seed_value, 0x72616e646b)).uniform();
}

// ---------------------------------------------------------------------------
// Scoring

struct NoiseRun {
  std::vector<double> scores;
  std::optional<ScalingProfile> profile;
  std::vector<double> scales;
};

/// Scores for a single noise vector: s_i = p(target) minus p(target) with
/// only row i perturbed by scale_i * n.
inline NoiseRun score_with_noise(const LanguageModel& model,
                                 const EmbeddingSequence& base,
                                 TokenId target,
                                 double p_target,
                                 const NoiseSpec& noise,
                                 const NoiserConfig& cfg) {
  const std::size_t T = base.rows();
  NoiseRun run;
  if (needs_profile(cfg.bounding)) {
    run.profile = compute_profile(model, base, target, noise, cfg);
  }
  const double random_k = random_scale_for(noise.seed);
  run.scales.resize(T);
  for (std::size_t i = 0; i < T; ++i) {
    run.scales[i] = effective_scale(run.profile ? &*run.profile : nullptr, i, cfg,
                                    base.width(), random_k);
  }
  run.scores.assign(T, 0.0);
  parallel_for(T, worker_count(model, cfg.threads), [&](std::size_t i) {
    const auto dist = forward_with_override(model, base, i, noise.scaled(run.scales[i]));
    run.scores[i] = p_target - prob_of(dist, target);
  });
  return run;
}

inline NoiseRun score_with_noise(const LanguageModel& model,
                                 const TokenSequence& tokens,
                                 const NoiseSpec& noise,
                                 const NoiserConfig& cfg) {
  cfg.validate();
  const auto pred = greedy_next(model, tokens);
  return score_with_noise(model, model.embed(tokens), pred.token,
                          prob_of(pred.dist, pred.token), noise, cfg);
}

/// Mean of the single-noise scores over cfg.n_noise seeded noise vectors.
/// k_values, k_min and saturation flags come from the first noise vector.
inline AttributionResult attribute(const LanguageModel& model,
                                   const TokenSequence& tokens,
                                   const NoiserConfig& cfg) {
  cfg.validate();
  const auto pred = greedy_next(model, tokens);
  const double p_target = prob_of(pred.dist, pred.token);
  const EmbeddingSequence base = model.embed(tokens);
  const std::size_t T = tokens.size();

  AttributionResult result;
  result.method = Method::Noiser;
  result.bounding = cfg.bounding;
  result.target_token = pred.token;
  result.scores.assign(T, 0.0);

  for (std::size_t j = 0; j < cfg.n_noise; ++j) {
    const auto seed = noise_seed(cfg.base_seed, j);
    result.noise_seeds.push_back(seed);
    const auto noise = sample_noise(base.width(), seed);
    const auto run = score_with_noise(model, base, pred.token, p_target, noise, cfg);
    for (std::size_t i = 0; i < T; ++i) result.scores[i] += run.scores[i];
    if (j == 0 && run.profile) {
      result.k_values = run.profile->k_values;
      result.k_min = run.profile->k_min;
      result.saturated = run.profile->saturated;
    }
  }
  for (double& s : result.scores) s /= static_cast<double>(cfg.n_noise);
  return result;
}

}  // namespace noiser
