#pragma once

// Policy-update math: log-densities of recorded tokens, the clipped
// surrogate, the k3 reference-KL estimator, the discrete GRPO and soft-token
// Gumbel objectives, and Adam.
//
// Every recorded token (think or answer) carries a log-density under the
// rollout policy and one under the current policy:
//   discrete token   log softmax(raw logits)[id]
//   Gumbel think     sum_i -(g'_i - log p_i) - exp(-(g'_i - log p_i)),
//                    p = softmax(logits[retained] / tau); at the rollout
//                    policy g' - log p is exactly the drawn noise eps.
//   Dirichlet think  log Dirichlet(x; alpha * p)
//   Gaussian think   -|s_hat - s|^2 / (2 sigma^2), s = sum_i softmax(logits / tau)_i e_i
// The importance ratio of a token is exp(clamp(new - old, +-log_ratio_clamp)).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "softgrpo/advantages.hpp"
#include "softgrpo/autodiff.hpp"
#include "softgrpo/errors.hpp"
#include "softgrpo/model.hpp"
#include "softgrpo/parallel.hpp"
#include "softgrpo/rollout.hpp"
#include "softgrpo/tasks.hpp"

namespace softgrpo::optimize {

namespace ad = autodiff;
using ad::Graph;
using ad::Tensor;
using ad::Var;
using rollout::Mode;
using rollout::RolloutConfig;
using rollout::RolloutGroup;
using rollout::SoftStep;
using rollout::Trajectory;

struct LossConfig {
  double clip_eps = 0.2;
  double beta = 1e-3;
  double std_guard = 1e-6;
  double log_ratio_clamp = 5.0;
  double learning_rate = 3e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double max_grad_norm = 0.0;  // global-norm clip before the Adam step; 0 disables

  void validate() const {
    if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw ContractError("loss: clip_eps must lie in (0, 1)");
    if (!(beta >= 0.0)) throw ContractError("loss: beta must be >= 0");
    if (!(std_guard > 0.0)) throw ContractError("loss: std_guard must be > 0");
    if (!(log_ratio_clamp > std::log1p(clip_eps))) throw ContractError("loss: log_ratio_clamp must exceed log(1 + clip_eps)");
    if (!(learning_rate > 0.0)) throw ContractError("loss: learning_rate must be > 0");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0))
      throw ContractError("loss: Adam betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ContractError("loss: adam_eps must be > 0");
    if (!(max_grad_norm >= 0.0)) throw ContractError("loss: max_grad_norm must be >= 0");
  }
};

struct UpdateReport {
  double surrogate = 0.0;      // objective without the KL term
  double objective = 0.0;      // surrogate - beta * ref_kl, group- and token-averaged
  double mean_ratio = 0.0;
  double max_ratio = 0.0;
  double ref_kl = 0.0;         // token-mean k3(current || reference)
  double ppo_kl = 0.0;         // token-mean k3(updated || rollout policy); filled after the step
  double ppo_kl_think = 0.0;   // the same over think tokens only
  double ppo_kl_answer = 0.0;  // the same over answer tokens only
  double grad_norm = 0.0;
  double clip_fraction = 0.0;  // tokens whose ratio left [1 - eps, 1 + eps]
  std::size_t tokens = 0;
};

// ---------------------------------------------------------------------------
// Scalar building blocks

// Joint standard-Gumbel log-density: sum_i -eps_i - exp(-eps_i).
inline double gumbel_noise_logdensity(std::span<const double> eps) {
  double s = 0.0;
  for (double e : eps) s += -e - std::exp(-e);
  return s;
}

// -|s_hat - s|^2 / (2 sigma^2), additive constant dropped.
inline double gaussian_soft_logprob(std::span<const double> s_hat, std::span<const double> s, double sigma) {
  if (!(sigma > 0.0)) throw ContractError("gaussian_soft_logprob: sigma must be > 0");
  if (s_hat.size() != s.size()) throw DimensionError("gaussian_soft_logprob: length mismatch");
  double sq = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) sq += (s_hat[i] - s[i]) * (s_hat[i] - s[i]);
  return -sq / (2.0 * sigma * sigma);
}

inline double dirichlet_logdensity(std::span<const double> log_x, std::span<const double> probs, double alpha) {
  double total = 0.0, s = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double a = alpha * probs[i];
    total += a;
    s += -std::lgamma(a) + (a - 1.0) * log_x[i];
  }
  return s + std::lgamma(total);
}

// k3 estimator exp(r - c) - (r - c) - 1 of KL(current || reference).
inline double kl_ref_estimate(double logp_cur, double logp_ref) {
  const double d = logp_ref - logp_cur;
  return std::exp(d) - d - 1.0;
}

inline Var kl_ref_estimate(Var logp_cur, double logp_ref, double clamp) {
  Var d = ad::clamp(ad::add_scalar(ad::neg(logp_cur), logp_ref), -clamp, clamp);
  return ad::add_scalar(ad::sub(ad::exp(d), d), -1.0);
}

// min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A), ratio = exp(clamp(new - old)).
inline Var token_surrogate(Var logp_new, double logp_old, double advantage, const LossConfig& cfg) {
  Var ratio = ad::exp(ad::clamp(ad::add_scalar(logp_new, -logp_old), -cfg.log_ratio_clamp, cfg.log_ratio_clamp));
  Var unclipped = ad::scale(ratio, advantage);
  Var clipped = ad::scale(ad::clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps), advantage);
  return ad::minimum(unclipped, clipped);
}

inline double token_surrogate(double logp_new, double logp_old, double advantage, const LossConfig& cfg) {
  Graph g(false);
  return token_surrogate(g.constant(Tensor::scalar(logp_new)), logp_old, advantage, cfg).item();
}

// ---------------------------------------------------------------------------
// Differentiable per-token log-densities from a logits matrix

namespace detail {

inline std::vector<std::size_t> row_indices(std::size_t row, std::size_t vocab, std::span<const std::size_t> ids) {
  std::vector<std::size_t> flat;
  flat.reserve(ids.size());
  for (std::size_t id : ids) flat.push_back(row * vocab + id);
  return flat;
}

// log softmax(logits[row, ids] / tau) over the retained ids.
inline Var retained_logprobs(Var logits, std::size_t row, std::span<const std::size_t> ids, double tau) {
  const std::size_t V = logits.value().cols();
  return ad::log_softmax_row(ad::scale(ad::select(logits, row_indices(row, V, ids)), 1.0 / tau));
}

}  // namespace detail

inline Var gumbel_step_logdensity(Var logits, std::size_t row, const SoftStep& step, double tau) {
  if (step.retained_ids.empty()) throw ContractError("soft_token_logprob: empty retained set");
  Graph& g = *logits.graph;
  Var logp = detail::retained_logprobs(logits, row, step.retained_ids, tau);
  Var implied = ad::sub(g.constant(Tensor::vector(step.perturbed)), logp);
  return ad::sum_all(ad::sub(ad::neg(implied), ad::exp(ad::neg(implied))));
}

inline Var dirichlet_step_logdensity(Var logits, std::size_t row, const SoftStep& step, double tau, double alpha) {
  Graph& g = *logits.graph;
  Var conc = ad::scale(ad::exp(detail::retained_logprobs(logits, row, step.retained_ids, tau)), alpha);
  Var log_x = g.constant(Tensor::vector(step.perturbed));
  Var body = ad::sum_all(ad::sub(ad::mul(ad::add_scalar(conc, -1.0), log_x), ad::lgamma(conc)));
  return ad::add(body, ad::lgamma(ad::sum_all(conc)));
}

inline Var gaussian_step_logdensity(Var logits, Var embedding, std::size_t row, const SoftStep& step, double tau,
                                    double sigma) {
  if (!(sigma > 0.0)) throw ContractError("gaussian_soft_logprob: sigma must be > 0");
  Graph& g = *logits.graph;
  const std::size_t V = logits.value().cols();
  Var probs = ad::softmax_row(ad::scale(ad::select(logits, detail::row_indices(row, V, step.retained_ids)), 1.0 / tau));
  Var mean = ad::row_weighted_sum(ad::gather_rows(embedding, step.retained_ids), probs);
  Var diff = ad::sub(g.constant(Tensor::vector(step.fed_input)), mean);
  return ad::scale(ad::sum_all(ad::mul(diff, diff)), -1.0 / (2.0 * sigma * sigma));
}

// Gumbel log-density of a recorded think step under the policy `b`, whose
// context is the [len x d] matrix of inputs preceding the step.
inline Var soft_token_logprob(const model::BoundParams& b, Var context, const SoftStep& step, double tau) {
  Var logits = model::forward_logits(b, context);
  return gumbel_step_logdensity(logits, logits.value().rows() - 1, step, tau);
}

// log pi(token | context) from raw logits at the last context position.
inline Var answer_token_logprob(const model::BoundParams& b, Var context, std::size_t token) {
  Var logits = model::forward_logits(b, context);
  const std::size_t V = logits.value().cols(), last = logits.value().rows() - 1;
  std::vector<std::size_t> idx(V);
  for (std::size_t i = 0; i < V; ++i) idx[i] = last * V + i;
  return ad::element(ad::log_softmax_row(ad::select(logits, idx)), token);
}

// Log-densities of every recorded token of `t` (think tokens, then answer
// tokens) under the policy bound in `b`.
inline std::vector<Var> token_logprobs(const model::BoundParams& b, const Trajectory& t, const tasks::TaskSpec& spec,
                                       const RolloutConfig& rcfg) {
  const auto layout = rollout::layout_of(t);
  Var logits = model::forward_logits(b, rollout::build_inputs(b, t, spec));
  const std::size_t V = logits.value().cols();
  std::vector<Var> out;
  out.reserve(layout.think_len + layout.answer_len);
  Var logp_rows;
  auto categorical = [&](std::size_t row, std::size_t id) {
    if (logp_rows.graph == nullptr) logp_rows = ad::log_softmax_rows(logits);
    return ad::element(logp_rows, row * V + id);
  };
  switch (t.mode) {
    case Mode::kDiscrete:
      for (std::size_t s = 0; s < t.think_tokens.size(); ++s)
        out.push_back(categorical(layout.think_row(s), t.think_tokens[s].id));
      break;
    case Mode::kSoftGumbel:
      for (std::size_t s = 0; s < t.soft_steps.size(); ++s)
        out.push_back(gumbel_step_logdensity(logits, layout.think_row(s), t.soft_steps[s], rcfg.temperature));
      break;
    case Mode::kSoftDirichlet:
      for (std::size_t s = 0; s < t.soft_steps.size(); ++s)
        out.push_back(dirichlet_step_logdensity(logits, layout.think_row(s), t.soft_steps[s], rcfg.temperature,
                                                rcfg.dirichlet_alpha));
      break;
    case Mode::kSoftGaussian:
      for (std::size_t s = 0; s < t.soft_steps.size(); ++s)
        out.push_back(gaussian_step_logdensity(logits, b.embedding, layout.think_row(s), t.soft_steps[s],
                                               rcfg.temperature, rcfg.gaussian_sigma));
      break;
    case Mode::kSoftDeterministic:
      throw ContractError("soft-det trajectories carry no sampling density and cannot be trained on");
  }
  for (std::size_t i = 0; i < t.answer.size(); ++i) out.push_back(categorical(layout.answer_row(i), t.answer[i].id));
  return out;
}

// The same log-densities as plain numbers (no gradient recording).
inline std::vector<double> token_logprob_values(const model::PolicyParams& params, const Trajectory& t,
                                                const tasks::TaskSpec& spec, const RolloutConfig& rcfg) {
  Graph g(false);
  const auto b = model::bind(g, params, false);
  std::vector<double> out;
  for (const Var& v : token_logprobs(b, t, spec, rcfg)) out.push_back(v.item());
  return out;
}

// Log-densities under the rollout policy, from the trajectory's records alone.
inline std::vector<double> recorded_old_logprobs(const Trajectory& t, const RolloutConfig& rcfg) {
  std::vector<double> out;
  switch (t.mode) {
    case Mode::kDiscrete:
      for (const auto& s : t.think_tokens) out.push_back(s.old_logprob);
      break;
    case Mode::kSoftGumbel:
      for (const auto& s : t.soft_steps) out.push_back(gumbel_noise_logdensity(s.noise));
      break;
    case Mode::kSoftDirichlet:
      for (const auto& s : t.soft_steps) out.push_back(dirichlet_logdensity(s.perturbed, s.old_probs, rcfg.dirichlet_alpha));
      break;
    case Mode::kSoftGaussian:
      for (const auto& s : t.soft_steps) out.push_back(gaussian_soft_logprob(s.fed_input, s.mean_input, rcfg.gaussian_sigma));
      break;
    case Mode::kSoftDeterministic:
      throw ContractError("soft-det trajectories carry no sampling density");
  }
  for (const auto& a : t.answer) out.push_back(a.old_logprob);
  return out;
}

inline bool trainable(Mode m) { return m != Mode::kSoftDeterministic; }

// ---------------------------------------------------------------------------
// Full objective

struct LossResult {
  double objective = 0.0;
  std::vector<double> grad;  // d objective / d params, manifest order
  UpdateReport report;
};

namespace detail {

struct TrajectoryTerms {
  std::vector<double> grad;
  double objective = 0.0, surrogate = 0.0, ref_kl = 0.0, ratio_sum = 0.0, ratio_max = 0.0;
  std::size_t tokens = 0, clipped = 0;
};

inline TrajectoryTerms trajectory_terms(const Trajectory& t, double advantage, double weight,
                                        const model::PolicyParams& params, const model::PolicyParams& ref,
                                        const tasks::TaskSpec& spec, const LossConfig& cfg, const RolloutConfig& rcfg,
                                        std::size_t index) {
  TrajectoryTerms out;
  const std::vector<double> old = recorded_old_logprobs(t, rcfg);
  std::vector<double> ref_lp;
  if (cfg.beta > 0.0) ref_lp = token_logprob_values(ref, t, spec, rcfg);

  Graph g(true);
  const auto b = model::bind(g, params, true);
  const std::vector<Var> cur = token_logprobs(b, t, spec, rcfg);
  if (cur.size() != old.size()) throw ContractError("trajectory token count mismatch");
  const std::size_t n = cur.size();
  out.tokens = n;
  if (n == 0) {
    out.grad.assign(params.num_parameters(), 0.0);
    return out;
  }

  std::vector<Var> terms;
  terms.reserve(n);
  double surr_sum = 0.0, kl_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double lp = cur[i].item();
    if (!std::isfinite(lp) || !std::isfinite(old[i]))
      throw NumericError("non-finite log-density at trajectory " + std::to_string(index) + ", token " + std::to_string(i));
    Var surr = token_surrogate(cur[i], old[i], advantage, cfg);
    surr_sum += surr.item();
    const double ratio = std::exp(std::clamp(lp - old[i], -cfg.log_ratio_clamp, cfg.log_ratio_clamp));
    out.ratio_sum += ratio;
    out.ratio_max = std::max(out.ratio_max, ratio);
    if (ratio < 1.0 - cfg.clip_eps || ratio > 1.0 + cfg.clip_eps) ++out.clipped;
    Var term = surr;
    if (cfg.beta > 0.0) {
      Var kl = kl_ref_estimate(cur[i], ref_lp[i], cfg.log_ratio_clamp);
      kl_sum += kl.item();
      term = ad::sub(surr, ad::scale(kl, cfg.beta));
    }
    terms.push_back(term);
  }
  // Contribution of this trajectory: weight * token-mean of the terms.
  Var objective = ad::scale(ad::add_n(terms), weight / static_cast<double>(n));
  out.objective = objective.item();
  out.surrogate = weight * surr_sum / static_cast<double>(n);
  out.ref_kl = kl_sum;
  if (!std::isfinite(out.objective))
    throw NumericError("non-finite objective at trajectory " + std::to_string(index));
  g.backward(objective);
  out.grad.reserve(params.num_parameters());
  for (const Var& leaf : b.leaves()) {
    const auto gr = g.grad(leaf);
    out.grad.insert(out.grad.end(), gr.begin(), gr.end());
  }
  return out;
}

inline void require_mode(std::span<const RolloutGroup> groups, Mode mode, const char* who) {
  for (const auto& grp : groups)
    for (const auto& t : grp.trajectories)
      if (t.mode != mode)
        throw ContractError(std::string(who) + ": expected " + rollout::to_string(mode) + " trajectories, got " +
                            rollout::to_string(t.mode));
}

}  // namespace detail

// Group- and token-averaged clipped objective with k3 reference penalty, and
// its gradient with respect to every parameter. Trajectories of any trainable
// mode are accepted; the objective is averaged over groups.
inline LossResult policy_objective(std::span<const RolloutGroup> groups, const model::PolicyParams& params,
                                   const model::PolicyParams& ref, const tasks::TaskSpec& spec, const LossConfig& cfg,
                                   const RolloutConfig& rcfg, std::size_t threads = 1) {
  cfg.validate();
  if (groups.empty()) throw ContractError("policy_objective: no groups");
  struct Item {
    const Trajectory* t;
    double advantage, weight;
  };
  std::vector<Item> items;
  for (const auto& grp : groups) {
    if (grp.advantages.size() != grp.trajectories.size()) throw ContractError("policy_objective: advantages missing");
    const double w = 1.0 / (static_cast<double>(grp.trajectories.size()) * static_cast<double>(groups.size()));
    for (std::size_t g = 0; g < grp.trajectories.size(); ++g) {
      if (!trainable(grp.trajectories[g].mode))
        throw ContractError("policy_objective: soft-det trajectories cannot be trained on");
      items.push_back({&grp.trajectories[g], grp.advantages[g], w});
    }
  }
  std::vector<detail::TrajectoryTerms> terms(items.size());
  parallel_for(items.size(), threads, [&](std::size_t i) {
    terms[i] = detail::trajectory_terms(*items[i].t, items[i].advantage, items[i].weight, params, ref, spec, cfg, rcfg, i);
  });

  LossResult res;
  res.grad.assign(params.num_parameters(), 0.0);
  double ratio_sum = 0.0, kl_sum = 0.0;
  std::size_t clipped = 0;
  for (const auto& tt : terms) {
    for (std::size_t j = 0; j < tt.grad.size(); ++j) res.grad[j] += tt.grad[j];
    res.objective += tt.objective;
    res.report.surrogate += tt.surrogate;
    ratio_sum += tt.ratio_sum;
    kl_sum += tt.ref_kl;
    clipped += tt.clipped;
    res.report.tokens += tt.tokens;
    res.report.max_ratio = std::max(res.report.max_ratio, tt.ratio_max);
  }
  const double ntok = static_cast<double>(std::max<std::size_t>(1, res.report.tokens));
  res.report.objective = res.objective;
  res.report.mean_ratio = ratio_sum / ntok;
  res.report.ref_kl = kl_sum / ntok;
  res.report.clip_fraction = static_cast<double>(clipped) / ntok;
  double sq = 0.0;
  for (double v : res.grad) sq += v * v;
  res.report.grad_norm = std::sqrt(sq);
  return res;
}

// Discrete-token GRPO objective.
inline LossResult grpo_loss(std::span<const RolloutGroup> groups, const model::PolicyParams& params,
                            const model::PolicyParams& ref, const tasks::TaskSpec& spec, const LossConfig& cfg,
                            const RolloutConfig& rcfg, std::size_t threads = 1) {
  detail::require_mode(groups, Mode::kDiscrete, "grpo_loss");
  return policy_objective(groups, params, ref, spec, cfg, rcfg, threads);
}

// Soft-token objective with Gumbel-reparameterized think-token densities.
inline LossResult soft_grpo_loss(std::span<const RolloutGroup> groups, const model::PolicyParams& params,
                                 const model::PolicyParams& ref, const tasks::TaskSpec& spec, const LossConfig& cfg,
                                 const RolloutConfig& rcfg, std::size_t threads = 1) {
  detail::require_mode(groups, Mode::kSoftGumbel, "soft_grpo_loss");
  return policy_objective(groups, params, ref, spec, cfg, rcfg, threads);
}

struct PpoKl {
  double all = 0.0;     // token mean over every recorded token
  double think = 0.0;   // think tokens only
  double answer = 0.0;  // answer tokens only
};

// Token-mean k3(current || rollout) over the batch, current = `params`.
inline PpoKl ppo_kl_parts(std::span<const RolloutGroup> groups, const model::PolicyParams& params,
                          const tasks::TaskSpec& spec, const RolloutConfig& rcfg, double clamp, std::size_t threads = 1) {
  std::vector<const Trajectory*> ts;
  for (const auto& grp : groups)
    for (const auto& t : grp.trajectories) ts.push_back(&t);
  struct Acc {
    double think = 0.0, answer = 0.0;
    std::size_t n_think = 0, n_answer = 0;
  };
  std::vector<Acc> acc(ts.size());
  parallel_for(ts.size(), threads, [&](std::size_t i) {
    const auto cur = token_logprob_values(params, *ts[i], spec, rcfg);
    const auto old = recorded_old_logprobs(*ts[i], rcfg);
    const std::size_t n_think = ts[i]->think_length();
    for (std::size_t k = 0; k < cur.size(); ++k) {
      const double kl = kl_ref_estimate(cur[k], std::clamp(old[k], cur[k] - clamp, cur[k] + clamp));
      if (k < n_think) {
        acc[i].think += kl;
        ++acc[i].n_think;
      } else {
        acc[i].answer += kl;
        ++acc[i].n_answer;
      }
    }
  });
  Acc total;
  for (const auto& a : acc) {
    total.think += a.think;
    total.answer += a.answer;
    total.n_think += a.n_think;
    total.n_answer += a.n_answer;
  }
  auto mean = [](double s, std::size_t n) { return n ? s / static_cast<double>(n) : 0.0; };
  return {mean(total.think + total.answer, total.n_think + total.n_answer), mean(total.think, total.n_think),
          mean(total.answer, total.n_answer)};
}

inline double ppo_kl(std::span<const RolloutGroup> groups, const model::PolicyParams& params,
                     const tasks::TaskSpec& spec, const RolloutConfig& rcfg, double clamp, std::size_t threads = 1) {
  return ppo_kl_parts(groups, params, spec, rcfg, clamp, threads).all;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  std::vector<double> m, v;
  std::size_t step = 0;
};

// Rescales `grad` so its Euclidean norm is at most `max_norm` (0 disables).
// Returns the norm before rescaling.
inline double clip_grad_norm(std::span<double> grad, double max_norm) {
  double ss = 0.0;
  for (double g : grad) ss += g * g;
  const double norm = std::sqrt(ss);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (double& g : grad) g *= s;
  }
  return norm;
}

// One Adam step descending `loss_grad` (pass the negated objective gradient to ascend).
inline void adam_step(model::PolicyParams& params, std::span<const double> loss_grad, AdamState& state,
                      const LossConfig& cfg) {
  const std::size_t n = params.num_parameters();
  if (loss_grad.size() != n) throw DimensionError("adam_step: gradient length mismatch");
  if (state.m.empty()) {
    state.m.assign(n, 0.0);
    state.v.assign(n, 0.0);
  }
  ++state.step;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  std::size_t off = 0;
  params.for_each([&](const std::string&, Tensor& t) {
    for (double& p : t.data) {
      const double g = loss_grad[off];
      state.m[off] = b1 * state.m[off] + (1.0 - b1) * g;
      state.v[off] = b2 * state.v[off] + (1.0 - b2) * g * g;
      const double mhat = state.m[off] / c1, vhat = state.v[off] / c2;
      p -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);
      ++off;
    }
  });
}

}  // namespace softgrpo::optimize
