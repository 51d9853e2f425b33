#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "softgrpo/rng.hpp"
#include "softgrpo/sampling.hpp"
#include "softgrpo/verify.hpp"

namespace {

using namespace softgrpo;
using namespace softgrpo::sampling;

FilteredDist dist(std::vector<std::size_t> ids, std::vector<double> p) { return {std::move(ids), std::move(p)}; }

void expect_valid(const FilteredDist& d) {
  ASSERT_GE(d.size(), 1u);
  ASSERT_EQ(d.probs.size(), d.retained_ids.size());
  double s = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_GT(d.probs[i], 0.0);
    if (i) {
      EXPECT_GE(d.probs[i - 1], d.probs[i]);
    }
    s += d.probs[i];
  }
  EXPECT_NEAR(s, 1.0, 1e-12);
}

// --- RngStream ---------------------------------------------------------------

TEST(RngStream, SameLineageSameDraws) {
  RngStream a = RngStream(42).derive({3, 7}), b = RngStream(42).derive({3, 7});
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(RngStream, DerivationIgnoresParentDraws) {
  RngStream parent(42);
  const RngStream before = parent.derive({5});
  for (int i = 0; i < 10; ++i) parent.next_u64();
  RngStream x = before, y = parent.derive({5});
  for (int i = 0; i < 10; ++i) EXPECT_EQ(x.next_u64(), y.next_u64());
}

TEST(RngStream, DistinctPathsDiffer) {
  RngStream a = RngStream(1).derive({1, 2}), b = RngStream(1).derive({2, 1});
  EXPECT_NE(a.next_u64(), b.next_u64());
}

TEST(RngStream, UniformIsOpenInterval) {
  RngStream r(9);
  for (int i = 0; i < 100000; ++i) {
    const double u = r.uniform();
    ASSERT_GT(u, 0.0);
    ASSERT_LT(u, 1.0);
  }
}

// --- temperature_scale ---------------------------------------------------------

TEST(TemperatureScale, UnitTemperatureIsSoftmax) {
  const std::vector<double> logits = {0.3, -1.0, 2.0};
  const auto p = temperature_scale(logits, 1.0);
  double z = 0.0;
  for (double l : logits) z += std::exp(l);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p[i], std::exp(logits[i]) / z, 1e-15);
}

TEST(TemperatureScale, EqualLogitsUniformAtAnyTemperature) {
  for (double tau : {0.1, 0.6, 1.0, 7.0})
    for (double v : temperature_scale(std::vector<double>(5, 2.0), tau)) EXPECT_DOUBLE_EQ(v, 0.2);
}

TEST(TemperatureScale, HalfTemperatureOnLogThree) {
  const auto p = temperature_scale(std::vector<double>{0.0, std::log(3.0)}, 0.5);
  EXPECT_NEAR(p[0], 0.1, 1e-15);
  EXPECT_NEAR(p[1], 0.9, 1e-15);
}

TEST(TemperatureScale, NonPositiveTemperatureIsContractError) {
  EXPECT_THROW(temperature_scale(std::vector<double>{1.0}, 0.0), ContractError);
  EXPECT_THROW(temperature_scale(std::vector<double>{1.0}, -1.0), ContractError);
}

// --- top_k_top_p_filter -------------------------------------------------------

TEST(Filter, FullKAndUnitPKeepsEverything) {
  const std::vector<double> p = {0.1, 0.4, 0.2, 0.3};
  const auto d = top_k_top_p_filter(p, 4, 1.0);
  EXPECT_EQ(d.retained_ids, (std::vector<std::size_t>{1, 3, 2, 0}));
  const std::vector<double> want = {0.4, 0.3, 0.2, 0.1};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(d.probs[i], want[i], 1e-15);
}

TEST(Filter, HandComputedPrefix) {
  const auto d = top_k_top_p_filter(std::vector<double>{0.5, 0.3, 0.15, 0.05}, 4, 0.8);
  EXPECT_EQ(d.retained_ids, (std::vector<std::size_t>{0, 1}));
  EXPECT_NEAR(d.probs[0], 0.625, 1e-15);
  EXPECT_NEAR(d.probs[1], 0.375, 1e-15);
}

TEST(Filter, OneHotKeepsSingleId) {
  const auto d = top_k_top_p_filter(std::vector<double>{0, 0, 1, 0}, 3, 0.95);
  EXPECT_EQ(d.retained_ids, (std::vector<std::size_t>{2}));
  EXPECT_EQ(d.probs, (std::vector<double>{1.0}));
}

TEST(Filter, TopKAppliesBeforeTopP) {
  // The k=2 survivors renormalize to (0.533, 0.467); the first alone reaches p=0.5.
  const auto d = top_k_top_p_filter(std::vector<double>{0.4, 0.35, 0.25}, 2, 0.5);
  EXPECT_EQ(d.retained_ids, (std::vector<std::size_t>{0}));
}

TEST(Filter, TiesBrokenByLowestId) {
  const auto d = top_k_top_p_filter(std::vector<double>{0.25, 0.25, 0.25, 0.25}, 2, 1.0);
  EXPECT_EQ(d.retained_ids, (std::vector<std::size_t>{0, 1}));
}

TEST(Filter, RandomInputsSatisfyInvariants) {
  RngStream r(10);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> logits(12);
    for (double& l : logits) l = 4.0 * (r.uniform() - 0.5);
    const std::size_t k = 1 + r.below(12);
    const double p = 0.05 + 0.95 * r.uniform();
    const auto d = top_k_top_p_filter(temperature_scale(logits, 0.6), k, p);
    expect_valid(d);
    EXPECT_LE(d.size(), k);
  }
}

TEST(Filter, RefilteringIsIdempotentWithoutNucleusCut) {
  RngStream r(11);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> logits(10);
    for (double& l : logits) l = 3.0 * (r.uniform() - 0.5);
    const std::size_t k = 1 + r.below(10);
    const auto once = top_k_top_p_filter(temperature_scale(logits, 1.0), k, 1.0);
    const auto twice = top_k_top_p_filter(once, k, 1.0);
    EXPECT_EQ(once.retained_ids, twice.retained_ids);
    for (std::size_t i = 0; i < once.size(); ++i) EXPECT_NEAR(once.probs[i], twice.probs[i], 1e-15);
  }
}

TEST(Filter, RefilteringNeverGrowsTheSet) {
  RngStream r(12);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> logits(10);
    for (double& l : logits) l = 3.0 * (r.uniform() - 0.5);
    const std::size_t k = 1 + r.below(10);
    const double p = 0.1 + 0.9 * r.uniform();
    const auto once = top_k_top_p_filter(temperature_scale(logits, 1.0), k, p);
    const auto twice = top_k_top_p_filter(once, k, p);
    ASSERT_LE(twice.size(), once.size());
    for (std::size_t i = 0; i < twice.size(); ++i) EXPECT_EQ(twice.retained_ids[i], once.retained_ids[i]);
  }
}

TEST(Filter, NucleusCutCanShrinkOnRefilter) {
  // First pass: 0.5 < 0.6 <= 0.8 keeps two tokens, renormalized to (0.625, 0.375).
  // Second pass: 0.625 >= 0.6 already, so one token remains.
  const auto once = top_k_top_p_filter(std::vector<double>{0.5, 0.3, 0.2}, 3, 0.6);
  ASSERT_EQ(once.size(), 2u);
  const auto twice = top_k_top_p_filter(once, 3, 0.6);
  EXPECT_EQ(twice.retained_ids, (std::vector<std::size_t>{0}));
}

TEST(Filter, InvalidArgumentsAreContractErrors) {
  const std::vector<double> p = {0.5, 0.5};
  EXPECT_THROW(top_k_top_p_filter(p, 0, 0.9), ContractError);
  EXPECT_THROW(top_k_top_p_filter(p, 1, 0.0), ContractError);
  EXPECT_THROW(top_k_top_p_filter(p, 1, 1.5), ContractError);
}

// --- Gumbel -------------------------------------------------------------------

TEST(Gumbel, InverseTransformAtOneOverE) { EXPECT_NEAR(gumbel_from_uniform(std::exp(-1.0)), 0.0, 1e-15); }

TEST(Gumbel, MomentsMatchStandardGumbel) {
  RngStream r(13);
  const std::size_t n = 1000000;
  const auto eps = sample_gumbel(r, n);
  double m = 0.0, m2 = 0.0;
  for (double e : eps) m += e;
  m /= static_cast<double>(n);
  for (double e : eps) m2 += (e - m) * (e - m);
  m2 /= static_cast<double>(n);
  EXPECT_NEAR(m, std::numbers::egamma, 0.01);
  EXPECT_NEAR(m2, std::numbers::pi * std::numbers::pi / 6.0, 0.02);
}

TEST(GumbelSoftmax, ZeroNoiseUnitTemperatureReturnsProbs) {
  const auto d = dist({4, 1, 7}, {0.5, 0.3, 0.2});
  const auto s = gumbel_softmax(d, std::vector<double>(3, 0.0), 1.0);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(s.weights[i], d.probs[i], 1e-15);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(s.perturbed[i], std::log(d.probs[i]));
}

TEST(GumbelSoftmax, LowTemperatureApproachesOneHot) {
  // g' gap of 0.1 at tau_g = 0.01 leaves the runner-up below exp(-10).
  const auto d = dist({0, 1}, {0.5, 0.5});
  const auto s = gumbel_softmax(d, std::vector<double>{0.1, 0.0}, 0.01);
  EXPECT_GE(s.weights[0], 0.999);
}

TEST(GumbelSoftmax, SymmetricProbsZeroNoiseUniform) {
  const auto s = gumbel_softmax(dist({0, 1, 2, 3}, {0.25, 0.25, 0.25, 0.25}), std::vector<double>(4, 0.0), 0.3);
  for (double w : s.weights) EXPECT_DOUBLE_EQ(w, 0.25);
}

TEST(GumbelSoftmax, ModeMatchesGumbelArgmax) {
  RngStream r(14);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> logits(5);
    for (double& l : logits) l = 2.0 * (r.uniform() - 0.5);
    const auto d = top_k_top_p_filter(temperature_scale(logits, 0.6), 5, 1.0);
    const auto eps = sample_gumbel(r, d.size());
    const auto s = gumbel_softmax(d, eps, 0.1);
    const std::size_t soft_mode = static_cast<std::size_t>(std::max_element(s.weights.begin(), s.weights.end()) - s.weights.begin());
    EXPECT_EQ(soft_mode, gumbel_argmax(d.probs, eps));
  }
}

TEST(GumbelSoftmax, WeightsOnSimplex) {
  RngStream r(15);
  const auto d = dist({0, 1, 2}, {0.6, 0.3, 0.1});
  for (int trial = 0; trial < 100; ++trial) {
    const auto s = gumbel_softmax(d, sample_gumbel(r, 3), 0.5);
    double t = 0.0;
    for (double w : s.weights) {
      EXPECT_GE(w, 0.0);
      t += w;
    }
    EXPECT_NEAR(t, 1.0, 1e-12);
  }
}

TEST(GumbelSoftmax, InvalidInputsAreContractErrors) {
  const auto d = dist({0, 1}, {0.5, 0.5});
  EXPECT_THROW(gumbel_softmax(d, std::vector<double>{0.0, 0.0}, 0.0), ContractError);
  EXPECT_THROW(gumbel_softmax(d, std::vector<double>{0.0}, 1.0), ContractError);
  EXPECT_THROW(gumbel_softmax(d, std::vector<double>{0.0, INFINITY}, 1.0), ContractError);
}

TEST(GumbelArgmax, FairCoin) {
  const std::vector<double> p = {1.0, 1.0};
  EXPECT_LE(verify::gumbel_max_deviation(p, 100000, RngStream(16)), 0.005);
}

TEST(GumbelArgmax, FrequenciesMatchProbabilities) {
  const std::vector<double> p = {0.2, 0.3, 0.5};
  EXPECT_LE(verify::gumbel_max_deviation(p, 200000, RngStream(17)), 0.01);
}

TEST(GumbelArgmax, UnnormalizedWeightsGiveSameFrequencies) {
  const std::vector<double> p = {2.0, 3.0, 5.0};
  EXPECT_LE(verify::gumbel_max_deviation(p, 200000, RngStream(18)), 0.01);
}

TEST(GumbelArgmax, ZeroWeightNeverWins) {
  RngStream r(19);
  const std::vector<double> p = {0.0, 1.0, 0.0};
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(gumbel_argmax(p, sample_gumbel(r, 3)), 1u);
}

TEST(GumbelArgmax, AllZeroIsContractError) {
  EXPECT_THROW(gumbel_argmax(std::vector<double>{0.0, 0.0}, std::vector<double>{0.1, 0.2}), ContractError);
}

// --- Dirichlet ------------------------------------------------------------------

TEST(Dirichlet, HugeConcentrationCollapsesToMean) {
  RngStream r(20);
  const auto d = dist({0, 1, 2}, {0.5, 0.3, 0.2});
  const auto x = dirichlet_resample(d, 1e6, r);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(x.weights[i], d.probs[i], 0.01);
}

TEST(Dirichlet, EmpiricalMeanMatchesProbs) {
  RngStream r(21);
  const auto d = dist({0, 1, 2, 3}, {0.4, 0.3, 0.2, 0.1});
  std::vector<double> mean(4, 0.0);
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const auto x = dirichlet_resample(d, 10.0, r);
    for (std::size_t j = 0; j < 4; ++j) mean[j] += x.weights[j] / n;
  }
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(mean[j], d.probs[j], 0.01);
}

TEST(Dirichlet, SingleIdIsDegenerate) {
  RngStream r(22);
  const auto x = dirichlet_resample(dist({3}, {1.0}), 10.0, r);
  EXPECT_EQ(x.weights, (std::vector<double>{1.0}));
}

TEST(Dirichlet, SmallShapesStayOnSimplex) {
  RngStream r(23);
  const auto d = dist({0, 1, 2}, {0.98, 0.015, 0.005});
  for (int i = 0; i < 1000; ++i) {
    const auto x = dirichlet_resample(d, 1.0, r);
    double s = 0.0;
    for (std::size_t j = 0; j < 3; ++j) {
      ASSERT_TRUE(std::isfinite(x.log_weights[j]));
      s += x.weights[j];
    }
    ASSERT_NEAR(s, 1.0, 1e-12);
  }
}

// --- categorical -----------------------------------------------------------------

TEST(Categorical, OneHotAlwaysSameId) {
  RngStream r(24);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(categorical_sample(dist({9}, {1.0}), r), 9u);
}

TEST(Categorical, FairCoinFrequency) {
  RngStream r(25);
  const auto d = dist({3, 5}, {0.5, 0.5});
  int hits = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) hits += categorical_sample(d, r) == 3 ? 1 : 0;
  EXPECT_NEAR(static_cast<double>(hits) / n, 0.5, 0.01);
}

TEST(Categorical, SkewedFrequency) {
  RngStream r(26);
  const auto d = dist({1, 0}, {0.625, 0.375});
  int hits = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) hits += categorical_sample(d, r) == 1 ? 1 : 0;
  EXPECT_NEAR(static_cast<double>(hits) / n, 0.625, 0.01);
}

TEST(Categorical, ReplayedStreamReproducesDraws) {
  const auto d = dist({0, 1, 2}, {0.2, 0.5, 0.3});
  RngStream a(27), b(27);
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(categorical_sample(d, a), categorical_sample(d, b));
}

// --- Gaussian -----------------------------------------------------------------------

TEST(GaussianNoise, ZeroSigmaIsZero) {
  RngStream r(28);
  for (double v : gaussian_noise(8, 0.0, r)) EXPECT_EQ(v, 0.0);
}

TEST(GaussianNoise, EmpiricalMoments) {
  RngStream r(29);
  const auto x = gaussian_noise(1000000, 0.1, r);
  double m = 0.0, v = 0.0;
  for (double e : x) m += e;
  m /= static_cast<double>(x.size());
  for (double e : x) v += (e - m) * (e - m);
  v /= static_cast<double>(x.size());
  EXPECT_NEAR(m, 0.0, 0.001);
  EXPECT_NEAR(std::sqrt(v), 0.1, 0.001);
}

TEST(GaussianNoise, NegativeSigmaIsContractError) {
  RngStream r(30);
  EXPECT_THROW(gaussian_noise(3, -0.1, r), ContractError);
}

}  // namespace
