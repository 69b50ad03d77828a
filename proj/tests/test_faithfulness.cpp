#include <gtest/gtest.h>

#include <cmath>

#include "noiser/faithfulness.hpp"
#include "noiser/toy_transformer.hpp"
#include "test_support.hpp"

using namespace noiser;

namespace {

// Random point of the probability simplex, independent of ProbDist.
std::vector<double> simplex_point(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  double s = 0;
  for (auto& x : v) {
    x = -std::log(1.0 - rng.uniform());
    s += x;
  }
  for (auto& x : v) x /= s;
  return v;
}

std::vector<double> values(const EmbeddingSequence& e) {
  return {e.flat().begin(), e.flat().end()};
}

double hellinger_oracle(const std::vector<double>& p, const std::vector<double>& q) {
  double bc = 0;
  for (std::size_t i = 0; i < p.size(); ++i) bc += std::sqrt(p[i] * q[i]);
  return std::sqrt(std::max(0.0, 1.0 - bc));
}

}  // namespace

TEST(Hellinger, Examples) {
  EXPECT_EQ(hellinger(ProbDist({0.2, 0.8}), ProbDist({0.2, 0.8})), 0.0);
  EXPECT_NEAR(hellinger(ProbDist({1, 0}), ProbDist({0, 1})), 1.0, 1e-15);
  EXPECT_NEAR(hellinger(ProbDist({1, 0}), ProbDist({0.5, 0.5})), 0.54120, 1e-5);
}

TEST(Hellinger, MetricProperties) {
  Rng rng(1);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 2 + rng.next_u64() % 10;
    const auto a = simplex_point(rng, n), b = simplex_point(rng, n), c = simplex_point(rng, n);
    const ProbDist p(a), q(b), r(c);
    EXPECT_EQ(hellinger(p, q), hellinger(q, p));
    EXPECT_LE(hellinger(p, r), hellinger(p, q) + hellinger(q, r) + 1e-12);
    EXPECT_NEAR(hellinger(p, q), hellinger_oracle(a, b), 1e-9);
    EXPECT_GE(hellinger(p, q), 0.0);
    EXPECT_LE(hellinger(p, q), 1.0);
  }
}

TEST(Hellinger, LengthMismatchThrows) {
  EXPECT_THROW(hellinger(ProbDist({1.0}), ProbDist({0.5, 0.5})), Error);
}

TEST(SoftPerturb, ExtremesAreDeterministic) {
  const EmbeddingSequence e(2, 3, std::vector<double>{1, 2, 3, 4, 5, 6});
  const std::vector<double> s{1.0, 0.0};
  const auto kept = soft_perturb(e, s, SoftPerturbMode::Retain, 4);
  EXPECT_EQ(values(kept), (std::vector<double>{1, 2, 3, 0, 0, 0}));
  const auto removed = soft_perturb(e, s, SoftPerturbMode::Remove, 4);
  EXPECT_EQ(values(removed), (std::vector<double>{0, 0, 0, 4, 5, 6}));
}

TEST(SoftPerturb, KeepRateMatchesScore) {
  const EmbeddingSequence e(1, 20000, 1.0);
  const std::vector<double> s{0.3};
  const auto out = soft_perturb(e, s, SoftPerturbMode::Retain, 11);
  double kept = 0;
  for (double v : out.flat()) kept += v;
  EXPECT_NEAR(kept / 20000.0, 0.3, 0.015);
}

TEST(SoftPerturb, RejectsBadInput) {
  const EmbeddingSequence e(2, 2, 1.0);
  EXPECT_THROW(soft_perturb(e, std::vector<double>{0.5}, SoftPerturbMode::Retain, 0), Error);
  EXPECT_THROW(soft_perturb(e, std::vector<double>{0.5, 1.5}, SoftPerturbMode::Retain, 0), Error);
}

TEST(SoftClassification, SufficiencyIsOneMinusComprehensiveness) {
  Rng rng(2);
  for (int t = 0; t < 100; ++t) {
    const double a = rng.uniform(), b = rng.uniform();
    EXPECT_EQ(soft_sufficiency(a, b), 1.0 - soft_comprehensiveness(a, b));
  }
}

TEST(SoftClassification, NormalizedForms) {
  EXPECT_DOUBLE_EQ(normalized_soft_comprehensiveness(0.3, 0.4), 0.5);
  EXPECT_DOUBLE_EQ(normalized_soft_sufficiency(0.7, 0.4), 0.5);
  EXPECT_THROW(normalized_soft_sufficiency(0.7, 1.0), Error);
}

TEST(SoftMetrics, AllOnesScoresGiveUnitMetrics) {
  ToyTransformer m(17);
  const TokenSequence x({3, 1, 4, 1, 5});
  const std::vector<double> ones(x.size(), 1.0);
  const auto s = soft_ns_nc_step(m, x, ones, SoftMetricConfig{});
  EXPECT_NEAR(s.soft_ns, 1.0, 1e-9);
  EXPECT_NEAR(s.soft_nc, 1.0, 1e-9);
}

TEST(SoftMetrics, ForwardPassBudget) {
  ToyTransformer inner(17);
  noiser::testing::CountingModel m(inner);
  const TokenSequence x({3, 1, 4});
  SoftMetricConfig cfg;
  cfg.n_mask_draws = 4;
  const std::vector<double> scores{0.1, 0.9, 0.4};
  faithfulness_generation(m, x, scores, 5, cfg);
  EXPECT_EQ(m.forward_calls(), 5u * (2u + 2u * 4u));
}

TEST(SoftMetrics, ScaleInvariantInRawScores) {
  ToyTransformer m(17);
  const TokenSequence x({3, 1, 4, 1});
  const std::vector<double> a{0.1, 0.4, -0.2, 0.3};
  std::vector<double> b;
  for (double v : a) b.push_back(3.0 * v + 7.0);
  const auto ra = faithfulness_generation(m, x, a, 3);
  const auto rb = faithfulness_generation(m, x, b, 3);
  EXPECT_NEAR(ra.soft_ns, rb.soft_ns, 1e-12);
  EXPECT_NEAR(ra.soft_nc, rb.soft_nc, 1e-12);
}

TEST(SoftMetrics, GenerationDeterministicAndThreadIndependent) {
  ToyTransformer m(17);
  const TokenSequence x({8, 2, 9});
  const std::vector<double> s{0.2, 0.9, 0.5};
  SoftMetricConfig cfg;
  cfg.seed = 5;
  const auto a = faithfulness_generation(m, x, s, 4, cfg);
  cfg.threads = 4;
  const auto b = faithfulness_generation(m, x, s, 4, cfg);
  EXPECT_EQ(a.soft_ns, b.soft_ns);
  EXPECT_EQ(a.soft_nc, b.soft_nc);
  ASSERT_EQ(a.per_step.size(), 4u);
  for (const auto& st : a.per_step) {
    EXPECT_GE(st.soft_ns, 0.0);
    EXPECT_LE(st.soft_ns, 1.0);
    EXPECT_GE(st.soft_nc, 0.0);
  }
}

TEST(SoftMetrics, MonteCarloStabilityAcrossSeeds) {
  ToyTransformer m(17);
  const TokenSequence x({3, 1, 4, 1, 5, 9});
  const std::vector<double> s{0.9, 0.1, 0.6, 0.3, 0.8, 0.2};
  std::vector<double> ns;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    SoftMetricConfig cfg;
    cfg.seed = seed;
    cfg.n_mask_draws = 50;
    ns.push_back(soft_ns_nc_step(m, x, s, cfg).soft_ns);
  }
  const auto [lo, hi] = std::minmax_element(ns.begin(), ns.end());
  EXPECT_LT(*hi - *lo, 0.15);
}

namespace {

// Records every embedding sequence it is asked to evaluate.
class RecordingModel final : public LanguageModel {
 public:
  explicit RecordingModel(const LanguageModel& inner) : inner_(inner) {}
  ModelInfo info() const override { return inner_.info(); }
  TokenSequence tokenize(std::string_view t) const override { return inner_.tokenize(t); }
  std::string detokenize(std::span<const TokenId> ids) const override { return inner_.detokenize(ids); }
  EmbeddingSequence embed(const TokenSequence& x) const override { return inner_.embed(x); }
  ProbDist forward_from_embeddings(const EmbeddingSequence& e) const override {
    seen.push_back(e);
    return inner_.forward_from_embeddings(e);
  }
  bool is_serial() const override { return true; }
  mutable std::vector<EmbeddingSequence> seen;

 private:
  const LanguageModel& inner_;
};

bool row_is_zero(const EmbeddingSequence& e, std::size_t r) {
  for (double v : e.row(r)) {
    if (v != 0.0) return false;
  }
  return true;
}

}  // namespace

TEST(SoftMetrics, ZeroInputKeepsGeneratedRows) {
  ToyTransformer inner(17);
  RecordingModel m(inner);
  const TokenSequence x({3, 1});
  const std::vector<double> s{0.5, 0.5};
  SoftMetricConfig cfg;
  cfg.n_mask_draws = 1;
  faithfulness_generation(m, x, s, 3, cfg);
  // Per step: full, zero, retain, remove. The last step has 4 rows.
  ASSERT_EQ(m.seen.size(), 12u);
  const auto& zero = m.seen[9];
  ASSERT_EQ(zero.rows(), 4u);
  EXPECT_TRUE(row_is_zero(zero, 0));
  EXPECT_TRUE(row_is_zero(zero, 1));
  EXPECT_FALSE(row_is_zero(zero, 2));
  EXPECT_FALSE(row_is_zero(zero, 3));
}

TEST(LogRatio, ZeroPointAndExamples) {
  EXPECT_NEAR(log_ratio_score(0.37, 0.37), 0.0, 1e-12);
  EXPECT_NEAR(log_ratio_score(0.2, 0.1), std::log(2.0), 1e-15);
  EXPECT_NEAR(faithfulness_score(0.4, 0.3, 0.4, 0.3), 0.0, 1e-12);
  EXPECT_NEAR(faithfulness_score(0.2, 0.3, 0.1, 0.6), 0.0, 1e-12);
  EXPECT_THROW(log_ratio_score(0.0, 0.3), Error);
  EXPECT_THROW(log_ratio_score(0.3, 0.0), Error);
}
