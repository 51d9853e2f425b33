#pragma once

// Self-checks runnable from the CLI and the acceptance binary: each suite
// measures a statistic, compares it with a pinned tolerance and reports.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "json.hpp"
#include "softgrpo/autodiff.hpp"
#include "softgrpo/diagnostics.hpp"
#include "softgrpo/metrics.hpp"
#include "softgrpo/model.hpp"
#include "softgrpo/objectives.hpp"
#include "softgrpo/rollout.hpp"
#include "softgrpo/sampling.hpp"
#include "softgrpo/tasks.hpp"

namespace softgrpo::verify {

using Json = nlohmann::ordered_json;

struct SuiteResult {
  std::string name;
  bool passed = false;
  std::string summary;
  Json stats;
  double seconds = 0.0;
};

namespace detail {
template <class F>
SuiteResult timed(const std::string& name, F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult r = f();
  r.name = name;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.stats["seconds"] = r.seconds;
  return r;
}

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Gumbel-max frequencies

struct GumbelMaxOptions {
  std::size_t draws = 200000;
  double tolerance = 0.01;
  std::uint64_t seed = 11;
};

// Max |freq_j - p_j / sum p| over entries for argmax(log p + eps).
inline double gumbel_max_deviation(std::span<const double> weights, std::size_t draws, RngStream rng) {
  double total = 0.0;
  for (double w : weights) total += w;
  std::vector<std::size_t> counts(weights.size(), 0);
  for (std::size_t i = 0; i < draws; ++i) {
    const auto eps = sampling::sample_gumbel(rng, weights.size());
    ++counts[sampling::gumbel_argmax(weights, eps)];
  }
  double dev = 0.0;
  for (std::size_t j = 0; j < weights.size(); ++j)
    dev = std::max(dev, std::abs(static_cast<double>(counts[j]) / static_cast<double>(draws) - weights[j] / total));
  return dev;
}

inline SuiteResult gumbel_max_suite(const GumbelMaxOptions& o = {}) {
  return detail::timed("gumbel-max", [&] {
    const RngStream base(o.seed);
    const std::vector<double> p{0.2, 0.3, 0.5}, u{2.0, 3.0, 5.0};
    const double d1 = gumbel_max_deviation(p, o.draws, base.derive({1}));
    const double d2 = gumbel_max_deviation(u, o.draws, base.derive({2}));
    SuiteResult r;
    r.passed = d1 <= o.tolerance && d2 <= o.tolerance;
    r.stats["max_deviation_normalized"] = d1;
    r.stats["max_deviation_unnormalized"] = d2;
    r.summary = "max deviation " + detail::fmt(d1) + " / " + detail::fmt(d2) + " (unnormalized), tolerance " +
                detail::fmt(o.tolerance);
    return r;
  });
}

// ---------------------------------------------------------------------------
// Toy instances for the loss checks

struct ToyInstance {
  tasks::TaskSpec spec;
  rollout::RolloutConfig rcfg;
  model::PolicyParams old_params, params, ref;
  std::vector<rollout::RolloutGroup> groups;
};

struct ToyOptions {
  std::size_t vocab = 12;
  std::size_t embed_dim = 8;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t think_len = 3;
  std::size_t group_size = 4;
  double init_scale = 10.0;  // multiplies the default init so logits are far from uniform
  double drift = 1e-2;       // relative offset of theta and theta_ref from theta_old
};

// Rollouts of `mode` under theta_old on a parity query, then theta and
// theta_ref are random perturbations of theta_old. Rewards are overridden
// with a fixed non-constant pattern unless `constant_reward` is set.
inline ToyInstance make_toy(rollout::Mode mode, std::uint64_t seed, const ToyOptions& o = {},
                            bool constant_reward = false) {
  ToyInstance t;
  t.spec = tasks::make_task("parity", o.vocab, 2);
  t.rcfg.think_len = o.think_len;
  model::ModelConfig mc;
  mc.vocab_size = o.vocab;
  mc.embed_dim = o.embed_dim;
  mc.num_layers = o.layers;
  mc.num_heads = o.heads;
  mc.max_seq_len = rollout::sequence_length(t.spec, t.rcfg);
  RngStream rng = RngStream(seed).derive({0x70E});
  t.old_params = model::init_params(mc, rng.next_u64());
  t.old_params.for_each([&](const std::string& name, autodiff::Tensor& x) {
    if (name.find("norm") == std::string::npos)
      for (double& v : x.data) v *= o.init_scale;
  });
  auto perturbed = [&](RngStream r) {
    model::PolicyParams p = t.old_params;
    p.for_each([&](const std::string&, autodiff::Tensor& x) {
      for (double& v : x.data) v += o.drift * (std::abs(v) + 0.02) * r.normal();
    });
    return p;
  };
  t.params = perturbed(rng.derive({1}));
  t.ref = perturbed(rng.derive({2}));
  const auto inst = tasks::gen_parity(rng, t.spec);
  auto grp = rollout::rollout_group(t.old_params, inst, t.spec, o.group_size, mode, t.rcfg, rng.derive({3}), 1e-6);
  for (std::size_t g = 0; g < grp.rewards.size(); ++g) grp.rewards[g] = constant_reward ? 1.0 : (g % 2 == 0 ? 1.0 : 0.0);
  grp.advantages = optimize::compute_advantages(grp.rewards, 1e-6);
  t.groups.push_back(std::move(grp));
  return t;
}

// Max relative error between the analytic gradient of the objective and
// central differences over every parameter.
inline double loss_gradient_error(const ToyInstance& t, const optimize::LossConfig& cfg, double h = 1e-5) {
  const auto analytic = optimize::policy_objective(t.groups, t.params, t.ref, t.spec, cfg, t.rcfg).grad;
  model::PolicyParams p = t.params;
  std::vector<double> flat = p.flatten();
  double worst = 0.0;
  for (std::size_t i = 0; i < flat.size(); ++i) {
    const double x0 = flat[i];
    auto eval = [&](double x) {
      flat[i] = x;
      p.assign_flat(flat);
      optimize::LossConfig c = cfg;
      return optimize::policy_objective(t.groups, p, t.ref, t.spec, c, t.rcfg).objective;
    };
    const double num = (eval(x0 + h) - eval(x0 - h)) / (2.0 * h);
    flat[i] = x0;
    const double a = analytic[i];
    worst = std::max(worst, std::abs(a - num) / std::max({1.0, std::abs(a), std::abs(num)}));
  }
  return worst;
}

struct GradientOptions {
  std::size_t instances = 5;
  double tolerance = 1e-4;
  std::uint64_t seed = 21;
};

inline SuiteResult gradient_suite(const GradientOptions& o = {}) {
  return detail::timed("gradient-check", [&] {
    SuiteResult r;
    optimize::LossConfig cfg;
    double worst_soft = 0.0, worst_disc = 0.0;
    for (std::size_t i = 0; i < o.instances; ++i) {
      worst_soft = std::max(worst_soft, loss_gradient_error(make_toy(rollout::Mode::kSoftGumbel, o.seed + i), cfg));
      worst_disc = std::max(worst_disc, loss_gradient_error(make_toy(rollout::Mode::kDiscrete, o.seed + i), cfg));
    }
    r.passed = worst_soft <= o.tolerance && worst_disc <= o.tolerance;
    r.stats["max_rel_error_soft_grpo"] = worst_soft;
    r.stats["max_rel_error_grpo"] = worst_disc;
    r.summary = "max rel. error soft " + detail::fmt(worst_soft) + ", discrete " + detail::fmt(worst_disc) +
                ", tolerance " + detail::fmt(o.tolerance);
    return r;
  });
}

// ---------------------------------------------------------------------------
// Recorded vs recomputed densities at theta = theta_old

struct ConsistencyOptions {
  std::size_t records = 100;
  double tolerance = 1e-12;
  std::uint64_t seed = 31;
};

inline SuiteResult consistency_suite(const ConsistencyOptions& o = {}) {
  return detail::timed("density-consistency", [&] {
    SuiteResult r;
    double worst_density = 0.0, worst_ratio = 0.0;
    std::size_t records = 0, tokens = 0;
    for (std::uint64_t s = 0; records < o.records; ++s) {
      const ToyInstance t = make_toy(rollout::Mode::kSoftGumbel, o.seed + s);
      for (const auto& traj : t.groups[0].trajectories) {
        const auto cur = optimize::token_logprob_values(t.old_params, traj, t.spec, t.rcfg);
        const auto old = optimize::recorded_old_logprobs(traj, t.rcfg);
        for (std::size_t k = 0; k < cur.size(); ++k) {
          if (k < traj.soft_steps.size()) {
            worst_density = std::max(worst_density, std::abs(cur[k] - old[k]));
            ++records;
          }
          worst_ratio = std::max(worst_ratio, std::abs(std::exp(cur[k] - old[k]) - 1.0));
          ++tokens;
        }
      }
    }
    r.passed = worst_density <= o.tolerance && worst_ratio <= o.tolerance;
    r.stats["records"] = records;
    r.stats["tokens"] = tokens;
    r.stats["max_abs_density_diff"] = worst_density;
    r.stats["max_abs_ratio_minus_1"] = worst_ratio;
    r.summary = std::to_string(records) + " think records, max |recomputed - recorded| " + detail::fmt(worst_density) +
                ", max |ratio - 1| " + detail::fmt(worst_ratio);
    return r;
  });
}

// ---------------------------------------------------------------------------
// Constant rewards produce no update

inline SuiteResult zero_advantage_suite(std::uint64_t seed = 41, double tolerance = 1e-12) {
  return detail::timed("zero-advantage", [&] {
    SuiteResult r;
    optimize::LossConfig cfg;
    cfg.beta = 0.0;
    double worst = 0.0;
    for (auto mode : {rollout::Mode::kSoftGumbel, rollout::Mode::kDiscrete}) {
      const ToyInstance t = make_toy(mode, seed, {}, true);
      worst = std::max(worst, optimize::policy_objective(t.groups, t.params, t.ref, t.spec, cfg, t.rcfg).report.grad_norm);
    }
    r.passed = worst <= tolerance;
    r.stats["max_grad_norm"] = worst;
    r.summary = "max gradient norm " + detail::fmt(worst);
    return r;
  });
}

// ---------------------------------------------------------------------------
// Embedding-space diagnostics

struct DiagnosticsOptions {
  std::size_t collision_matrices = 10;
  std::size_t hull_trials = 1000;
  std::size_t hull_required = 999;
  double hull_threshold = 1e-9;  // residuals at or below this count as "inside"
  double sigma = 0.1;
  std::uint64_t seed = 51;
};

inline autodiff::Tensor random_matrix(std::size_t rows, std::size_t cols, RngStream& rng) {
  autodiff::Tensor E({rows, cols});
  for (double& v : E.data) v = rng.normal();
  return E;
}

inline SuiteResult diagnostics_suite(const DiagnosticsOptions& o = {}) {
  return detail::timed("embedding-diagnostics", [&] {
    SuiteResult r;
    RngStream rng = RngStream(o.seed).derive({1});
    double worst_residual = 0.0, min_sep = 1e300, worst_simplex = 0.0;
    for (std::size_t m = 0; m < o.collision_matrices; ++m) {
      const auto E = random_matrix(12, 4, rng);
      const auto w = diagnostics::embedding_kernel_collision(E, rng);
      worst_residual = std::max(worst_residual, w.residual);
      min_sep = std::min(min_sep, w.separation);
      for (const auto* p : {&w.p1, &w.p2}) {
        double s = 0.0;
        for (double x : *p) {
          s += x;
          if (x < 0.0) worst_simplex = std::max(worst_simplex, -x);
        }
        worst_simplex = std::max(worst_simplex, std::abs(s - 1.0));
      }
    }
    const bool collisions_ok = worst_residual <= 1e-10 && min_sep >= 1e-3 && worst_simplex <= 1e-12;

    // Gaussian-perturbed soft inputs over a top-3 retained set.
    RngStream hr = RngStream(o.seed).derive({2});
    std::size_t outside = 0;
    double min_res = 1e300;
    for (std::size_t trial = 0; trial < o.hull_trials; ++trial) {
      const auto E = random_matrix(12, 8, hr);
      std::vector<double> logits(12);
      for (double& v : logits) v = hr.normal();
      const auto dist = sampling::top_k_top_p_filter(sampling::temperature_scale(logits, 1.0), 3, 1.0);
      const auto s = rollout::mix_rows(E, dist.retained_ids, dist.probs);
      const auto noise = sampling::gaussian_noise(8, o.sigma, hr);
      std::vector<double> v(8);
      for (std::size_t j = 0; j < 8; ++j) v[j] = s[j] + noise[j];
      const double res = diagnostics::top_k_hull_residual(v, E, 3);
      min_res = std::min(min_res, res);
      outside += res > o.hull_threshold ? 1 : 0;
    }
    const bool hull_ok = outside >= o.hull_required;
    r.passed = collisions_ok && hull_ok;
    r.stats["collision_max_residual"] = worst_residual;
    r.stats["collision_min_separation"] = min_sep;
    r.stats["collision_max_simplex_violation"] = worst_simplex;
    r.stats["hull_outside"] = outside;
    r.stats["hull_trials"] = o.hull_trials;
    r.stats["hull_min_residual"] = min_res;
    r.summary = "collisions: max residual " + detail::fmt(worst_residual) + ", min separation " + detail::fmt(min_sep) +
                "; hull: " + std::to_string(outside) + "/" + std::to_string(o.hull_trials) + " outside";
    return r;
  });
}

// ---------------------------------------------------------------------------
// Pass@k against brute-force enumeration

inline SuiteResult pass_at_k_suite(std::size_t max_n = 6) {
  return detail::timed("pass-at-k", [&] {
    SuiteResult r;
    std::size_t cases = 0, mismatches = 0;
    for (std::size_t n = 1; n <= max_n; ++n)
      for (std::size_t c = 0; c <= n; ++c)
        for (std::size_t k = 1; k <= n; ++k) {
          // attempts 0..c-1 correct; count k-subsets containing one of them
          std::size_t hit = 0, total = 0;
          for (unsigned mask = 0; mask < (1U << n); ++mask) {
            if (static_cast<std::size_t>(std::popcount(mask)) != k) continue;
            ++total;
            hit += (mask & ((1U << c) - 1U)) != 0 ? 1 : 0;
          }
          const double oracle = static_cast<double>(hit) / static_cast<double>(total);
          ++cases;
          if (metrics::pass_at_k(n, c, k) != oracle) ++mismatches;
          if (k == 1 && metrics::pass_at_k(n, c, 1) != static_cast<double>(c) / static_cast<double>(n)) ++mismatches;
        }
    r.passed = mismatches == 0;
    r.stats["cases"] = cases;
    r.stats["mismatches"] = mismatches;
    r.summary = std::to_string(cases) + " cases, " + std::to_string(mismatches) + " mismatches";
    return r;
  });
}

inline std::vector<SuiteResult> run_all() {
  return {gumbel_max_suite(), gradient_suite(), consistency_suite(), zero_advantage_suite(), diagnostics_suite(),
          pass_at_k_suite()};
}

}  // namespace softgrpo::verify
