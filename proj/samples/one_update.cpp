// One SofT-GRPO update by hand: roll out a group of soft-thinking trajectories,
// score the clipped objective, take an Adam step and measure how far it moved.

#include <cstdio>
#include <iostream>

#include "softgrpo/softgrpo.hpp"

using namespace softgrpo;

int main() {
  const auto spec = tasks::make_task("parity", 6, 3);
  model::ModelConfig mc;
  mc.vocab_size = spec.vocab_size;
  mc.embed_dim = 16;
  auto params = model::init_params(mc, 7);
  const auto ref = model::snapshot(params);

  rollout::RolloutConfig rc;
  rc.think_len = 4;
  rc.temperature = 1.0;
  rc.top_k = spec.vocab_size;
  rc.top_p = 1.0;
  optimize::LossConfig lc;
  lc.learning_rate = 1e-2;

  RngStream rng(2024);
  std::vector<rollout::RolloutGroup> groups;
  for (std::uint64_t q = 0; q < 4; ++q) {
    RngStream qr = rng.derive({1, q});
    const auto inst = tasks::generate(qr, spec);
    groups.push_back(rollout::rollout_group(params, inst, spec, 8, rollout::Mode::kSoftGumbel, rc, rng.derive({2, q}),
                                            lc.std_guard));
  }
  rollout::dump_trajectory(std::cout, groups[0].trajectories[0]);

  auto res = optimize::policy_objective(groups, params, ref, spec, lc, rc);
  std::printf("objective %.6f  ratio %.3f  grad norm %.4g\n", res.objective, res.report.mean_ratio,
              res.report.grad_norm);

  for (double& g : res.grad) g = -g;  // ascend the objective
  optimize::AdamState adam;
  optimize::adam_step(params, res.grad, adam, lc);

  const auto kl = optimize::ppo_kl_parts(groups, params, spec, rc, lc.log_ratio_clamp);
  std::printf("PPO-KL after the step: %.3g (think %.3g, answer %.3g)\n", kl.all, kl.think, kl.answer);
}
