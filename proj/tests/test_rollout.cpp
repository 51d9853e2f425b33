#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "softgrpo/rollout.hpp"
#include "test_util.hpp"

namespace {

using namespace sgtest;
using namespace softgrpo::rollout;
using ad::Tensor;

struct Fixture {
  tasks::TaskSpec spec = tasks::make_task("modsum", 16, 3);
  model::PolicyParams params;
  RolloutConfig cfg;
  tasks::TaskInstance inst = tasks::modsum_instance(3, 9);

  explicit Fixture(std::uint64_t seed = 1) {
    model::ModelConfig mc;
    mc.vocab_size = 16;
    mc.embed_dim = 8;
    mc.num_heads = 2;
    mc.max_seq_len = 16;
    mc.hidden_mult = 2.0;
    params = model::init_params(mc, seed);
    // Sharper logits than init so that filtering and sampling are non-trivial.
    RngStream r(seed + 100);
    params.for_each([&](const std::string&, Tensor& t) {
      for (double& v : t.data) v += 0.6 * (r.uniform() - 0.5);
    });
    cfg.temperature = 1.0;
    cfg.top_k = 5;
    cfg.top_p = 0.95;
  }
};

// Logits of every position recomputed from the recorded trajectory.
Tensor replay_logits(const Fixture& f, const Trajectory& t) {
  ad::Graph g(false);
  const auto b = model::bind(g, f.params, false);
  return model::forward_logits(b, build_inputs(b, t, f.spec)).value();
}

std::vector<double> row(const Tensor& m, std::size_t r) {
  return {m.data.begin() + static_cast<std::ptrdiff_t>(r * m.cols()),
          m.data.begin() + static_cast<std::ptrdiff_t>((r + 1) * m.cols())};
}

TEST(RolloutDiscrete, SameStreamSameTrajectory) {
  Fixture f;
  RngStream a(5), b(5);
  EXPECT_EQ(rollout_discrete(f.params, f.inst, f.spec, f.cfg, a), rollout_discrete(f.params, f.inst, f.spec, f.cfg, b));
}

TEST(RolloutDiscrete, PhasesAndReward) {
  Fixture f;
  RngStream r(6);
  for (int i = 0; i < 20; ++i) {
    const auto t = rollout_discrete(f.params, f.inst, f.spec, f.cfg, r);
    EXPECT_EQ(t.think_tokens.size(), f.cfg.think_len);
    EXPECT_TRUE(t.soft_steps.empty());
    EXPECT_GE(t.answer.size(), 1u);
    EXPECT_LE(t.answer.size(), f.cfg.budget_for(f.spec));
    for (std::size_t k = 0; k + 1 < t.answer.size(); ++k) EXPECT_NE(t.answer[k].id, f.spec.eos());
    EXPECT_EQ(t.reward, tasks::verify(t.answer_ids(), f.inst, f.spec));
  }
}

TEST(RolloutDiscrete, RecordedLogProbsMatchRecomputation) {
  Fixture f;
  RngStream r(7);
  for (int i = 0; i < 10; ++i) {
    const auto t = rollout_discrete(f.params, f.inst, f.spec, f.cfg, r);
    const Tensor logits = replay_logits(f, t);
    const auto lay = layout_of(t);
    for (std::size_t s = 0; s < t.think_tokens.size(); ++s) {
      const auto lp = log_softmax(row(logits, lay.think_row(s)));
      EXPECT_NEAR(t.think_tokens[s].old_logprob, lp[t.think_tokens[s].id], 1e-12);
      EXPECT_LE(t.think_tokens[s].old_logprob, 0.0);
    }
    for (std::size_t a = 0; a < t.answer.size(); ++a) {
      const auto lp = log_softmax(row(logits, lay.answer_row(a)));
      EXPECT_NEAR(t.answer[a].old_logprob, lp[t.answer[a].id], 1e-12);
    }
  }
}

TEST(RolloutDiscrete, SampledTokensStayInsideFilter) {
  Fixture f;
  f.cfg.top_k = 2;
  RngStream r(8);
  const auto t = rollout_discrete(f.params, f.inst, f.spec, f.cfg, r);
  const Tensor logits = replay_logits(f, t);
  const auto lay = layout_of(t);
  for (std::size_t s = 0; s < t.think_tokens.size(); ++s) {
    const auto d = sampling::top_k_top_p_filter(sampling::temperature_scale(row(logits, lay.think_row(s)), 1.0), 2, 0.95);
    EXPECT_NE(std::find(d.retained_ids.begin(), d.retained_ids.end(), t.think_tokens[s].id), d.retained_ids.end());
  }
}

TEST(RolloutDiscrete, GreedyIgnoresStream) {
  Fixture f;
  f.cfg.greedy = true;
  RngStream a(1), b(2);
  EXPECT_EQ(rollout_discrete(f.params, f.inst, f.spec, f.cfg, a), rollout_discrete(f.params, f.inst, f.spec, f.cfg, b));
}

TEST(RolloutDiscrete, ShortContextIsCapacityError) {
  Fixture f;
  f.params.config.max_seq_len = 12;
  RngStream r(1);
  EXPECT_THROW(rollout_discrete(f.params, f.inst, f.spec, f.cfg, r), CapacityError);
}

TEST(RolloutSoftDeterministic, RepeatableAndNoiseFree) {
  Fixture f;
  const auto a = rollout_soft_deterministic(f.params, f.inst, f.spec, f.cfg);
  const auto b = rollout_soft_deterministic(f.params, f.inst, f.spec, f.cfg);
  EXPECT_EQ(a, b);
  ASSERT_EQ(a.soft_steps.size(), f.cfg.think_len);
  for (const auto& s : a.soft_steps) {
    EXPECT_TRUE(s.weights.empty());
    EXPECT_TRUE(s.noise.empty());
    EXPECT_TRUE(s.perturbed.empty());
  }
}

TEST(RolloutSoftDeterministic, SingleRetainedIdFeedsItsEmbedding) {
  Fixture f;
  f.cfg.top_k = 1;
  const auto t = rollout_soft_deterministic(f.params, f.inst, f.spec, f.cfg);
  ad::Graph g(false);
  const auto b = model::bind(g, f.params, false);
  const Tensor X = build_inputs(b, t, f.spec).value();
  for (std::size_t s = 0; s < t.soft_steps.size(); ++s) {
    ASSERT_EQ(t.soft_steps[s].retained_ids.size(), 1u);
    EXPECT_EQ(row(X, 3 + s), embedding_row(f.params.embedding, t.soft_steps[s].retained_ids[0]));
  }
}

TEST(RolloutSoftGumbel, ZeroNoiseUnitTemperatureMatchesDeterministic) {
  Fixture f;
  f.cfg.zero_noise = true;
  f.cfg.tau_g = 1.0;
  RngStream a(3), b(3);
  const auto gum = rollout_soft_gumbel(f.params, f.inst, f.spec, f.cfg, a);
  const auto det = rollout_soft_deterministic(f.params, f.inst, f.spec, f.cfg, b);
  ASSERT_EQ(gum.soft_steps.size(), det.soft_steps.size());
  for (std::size_t s = 0; s < gum.soft_steps.size(); ++s) {
    ASSERT_EQ(gum.soft_steps[s].retained_ids, det.soft_steps[s].retained_ids);
    for (std::size_t i = 0; i < gum.soft_steps[s].weights.size(); ++i)
      EXPECT_NEAR(gum.soft_steps[s].weights[i], det.soft_steps[s].old_probs[i], 1e-12);
  }
  EXPECT_EQ(gum.answer_ids(), det.answer_ids());
}

TEST(RolloutSoftGumbel, RecordsAreConsistent) {
  Fixture f;
  RngStream r(4);
  const auto t = rollout_soft_gumbel(f.params, f.inst, f.spec, f.cfg, r);
  for (const auto& s : t.soft_steps) {
    const std::size_t k = s.retained_ids.size();
    ASSERT_EQ(s.old_probs.size(), k);
    ASSERT_EQ(s.perturbed.size(), k);
    ASSERT_EQ(s.weights.size(), k);
    ASSERT_EQ(s.noise.size(), k);
    double sum = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      EXPECT_NEAR(s.noise[i], s.perturbed[i] - std::log(s.old_probs[i]), 1e-12);
      EXPECT_GE(s.weights[i], 0.0);
      sum += s.weights[i];
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(RolloutSoftGumbel, ReconstructionReproducesFedInputsAndProbs) {
  Fixture f;
  RngStream r(5);
  const auto t = rollout_soft_gumbel(f.params, f.inst, f.spec, f.cfg, r);
  ad::Graph g(false);
  const auto b = model::bind(g, f.params, false);
  const auto X = build_inputs(b, t, f.spec);
  const Tensor logits = model::forward_logits(b, X).value();
  const auto lay = layout_of(t);
  for (std::size_t s = 0; s < t.soft_steps.size(); ++s) {
    const auto& st = t.soft_steps[s];
    EXPECT_EQ(row(X.value(), lay.prefix_len + s), mix_rows(f.params.embedding, st.retained_ids, st.weights));
    const auto d = sampling::top_k_top_p_filter(sampling::temperature_scale(row(logits, lay.think_row(s)), f.cfg.temperature),
                                                f.cfg.top_k, f.cfg.top_p);
    ASSERT_EQ(d.retained_ids, st.retained_ids);
    for (std::size_t i = 0; i < d.size(); ++i) EXPECT_NEAR(d.probs[i], st.old_probs[i], 1e-12);
  }
}

TEST(RolloutSoftGumbel, DistinctStreamsGiveDistinctWeights) {
  Fixture f;
  RngStream a(1), b(2);
  const auto x = rollout_soft_gumbel(f.params, f.inst, f.spec, f.cfg, a);
  const auto y = rollout_soft_gumbel(f.params, f.inst, f.spec, f.cfg, b);
  EXPECT_NE(x.soft_steps[0].weights, y.soft_steps[0].weights);
}

TEST(RolloutSoftGumbel, NonPositiveTauIsContractError) {
  Fixture f;
  f.cfg.tau_g = 0.0;
  RngStream r(1);
  EXPECT_THROW(rollout_soft_gumbel(f.params, f.inst, f.spec, f.cfg, r), ContractError);
}

TEST(RolloutSoftDirichlet, HugeConcentrationTracksDeterministic) {
  Fixture f;
  f.cfg.dirichlet_alpha = 1e6;
  RngStream r(6);
  const auto dir = rollout_soft_dirichlet(f.params, f.inst, f.spec, f.cfg, r);
  const auto det = rollout_soft_deterministic(f.params, f.inst, f.spec, f.cfg);
  // Trajectories can diverge only through the weights fed at earlier steps; the first step is identical in law.
  ASSERT_EQ(dir.soft_steps[0].retained_ids, det.soft_steps[0].retained_ids);
  for (std::size_t s = 0; s < dir.soft_steps.size(); ++s) {
    if (dir.soft_steps[s].retained_ids != det.soft_steps[s].retained_ids) break;
    for (std::size_t i = 0; i < dir.soft_steps[s].weights.size(); ++i)
      EXPECT_NEAR(dir.soft_steps[s].weights[i], det.soft_steps[s].old_probs[i], 0.01);
  }
}

TEST(RolloutSoftDirichlet, SimplexAndDeterminism) {
  Fixture f;
  RngStream a(7), b(7);
  const auto x = rollout_soft_dirichlet(f.params, f.inst, f.spec, f.cfg, a);
  EXPECT_EQ(x, rollout_soft_dirichlet(f.params, f.inst, f.spec, f.cfg, b));
  for (const auto& s : x.soft_steps) {
    double sum = 0.0;
    for (double w : s.weights) sum += w;
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(RolloutSoftGaussian, ZeroSigmaFeedsTheMean) {
  Fixture f;
  f.cfg.gaussian_sigma = 0.0;
  f.cfg.top_k = 16;
  f.cfg.top_p = 1.0;
  RngStream r(8);
  const auto gau = rollout_soft_gaussian(f.params, f.inst, f.spec, f.cfg, r);
  const auto det = rollout_soft_deterministic(f.params, f.inst, f.spec, f.cfg);
  for (std::size_t s = 0; s < gau.soft_steps.size(); ++s) {
    EXPECT_EQ(gau.soft_steps[s].fed_input, gau.soft_steps[s].mean_input);
    const auto want = mix_rows(f.params.embedding, det.soft_steps[s].retained_ids, det.soft_steps[s].old_probs);
    for (std::size_t j = 0; j < want.size(); ++j) EXPECT_NEAR(gau.soft_steps[s].mean_input[j], want[j], 1e-12);
  }
}

TEST(RolloutSoftGaussian, NoiseVarianceMatchesSigma) {
  Fixture f;
  f.cfg.gaussian_sigma = 0.1;
  RngStream r(9);
  double ss = 0.0;
  std::size_t n = 0;
  for (int i = 0; i < 400; ++i) {
    const auto t = rollout_soft_gaussian(f.params, f.inst, f.spec, f.cfg, r);
    for (const auto& s : t.soft_steps) {
      for (std::size_t j = 0; j < s.fed_input.size(); ++j) ss += std::pow(s.fed_input[j] - s.mean_input[j], 2);
      n += s.fed_input.size();
    }
  }
  EXPECT_NEAR(ss / static_cast<double>(n), 0.01, 0.0005);
}

TEST(RolloutSoftGaussian, SameStreamSameTrajectory) {
  Fixture f;
  RngStream a(10), b(10);
  EXPECT_EQ(rollout_soft_gaussian(f.params, f.inst, f.spec, f.cfg, a),
            rollout_soft_gaussian(f.params, f.inst, f.spec, f.cfg, b));
}

TEST(RolloutSoftGaussian, NegativeSigmaIsContractError) {
  Fixture f;
  f.cfg.gaussian_sigma = -1.0;
  RngStream r(1);
  EXPECT_THROW(rollout_soft_gaussian(f.params, f.inst, f.spec, f.cfg, r), ContractError);
}

// --- groups ---------------------------------------------------------------------

TEST(RolloutGroup, IndependentOfThreadCount) {
  Fixture f;
  for (Mode m : {Mode::kDiscrete, Mode::kSoftGumbel, Mode::kSoftGaussian}) {
    const auto a = rollout_group(f.params, f.inst, f.spec, 6, m, f.cfg, RngStream(11), 1e-6, 1);
    const auto b = rollout_group(f.params, f.inst, f.spec, 6, m, f.cfg, RngStream(11), 1e-6, 4);
    EXPECT_EQ(a.trajectories, b.trajectories);
    EXPECT_EQ(a.advantages, b.advantages);
  }
}

TEST(RolloutGroup, RewardsAndAdvantagesConsistent) {
  // Parity over a 6-token vocabulary: a near-uniform policy is right often enough to mix rewards.
  const auto spec = tasks::make_task("parity", 6, 3);
  model::ModelConfig mc;
  mc.vocab_size = 6;
  mc.embed_dim = 8;
  mc.max_seq_len = 16;
  const auto params = model::init_params(mc, 3);
  RolloutConfig cfg;
  cfg.temperature = 1.0;
  cfg.top_k = 6;
  cfg.top_p = 1.0;
  int mixed = 0;
  RngStream gen(13);
  for (std::uint64_t s = 0; s < 60; ++s) {
    const auto g = rollout_group(params, tasks::generate(gen, spec), spec, 8, Mode::kSoftGumbel, cfg, RngStream(s), 1e-6);
    ASSERT_EQ(g.trajectories.size(), 8u);
    double mean = 0.0;
    for (std::size_t i = 0; i < 8; ++i) {
      EXPECT_EQ(g.rewards[i], tasks::verify(g.trajectories[i].answer_ids(), g.instance, spec));
      mean += g.advantages[i] / 8.0;
    }
    if (g.rewards_mixed()) {
      ++mixed;
      EXPECT_NEAR(mean, 0.0, 1e-9);
    } else {
      for (double a : g.advantages) EXPECT_EQ(a, 0.0);
    }
  }
  EXPECT_GT(mixed, 0);
}

TEST(RolloutGroup, TooSmallGroupIsContractError) {
  Fixture f;
  EXPECT_THROW(rollout_group(f.params, f.inst, f.spec, 1, Mode::kDiscrete, f.cfg, RngStream(1), 1e-6), ContractError);
}

TEST(Modes, NamesRoundTrip) {
  for (Mode m : {Mode::kDiscrete, Mode::kSoftDeterministic, Mode::kSoftGumbel, Mode::kSoftDirichlet, Mode::kSoftGaussian})
    EXPECT_EQ(parse_mode(to_string(m)), m);
  EXPECT_FALSE(parse_mode("soft").has_value());
}

TEST(DumpTrajectory, OneRecordPerLine) {
  Fixture f;
  RngStream r(12);
  const auto t = rollout_soft_gumbel(f.params, f.inst, f.spec, f.cfg, r);
  std::ostringstream os;
  dump_trajectory(os, t);
  const std::string s = os.str();
  EXPECT_EQ(static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')), 1 + t.soft_steps.size() + t.answer.size());
  EXPECT_EQ(s.rfind("trajectory\tsoft-gumbel", 0), 0u);
}

}  // namespace
