#pragma once

// Trajectory generation under the five reasoning patterns.
//
// Sequence protocol (all modes):
//   BOS, query..., think_1 .. think_L, SEP, answer_1 .. answer_n
// The think phase always runs exactly L steps. What is fed at a think
// position depends on the mode: a sampled token embedding (discrete), the
// filtered-probability mixture (soft-det), a Gumbel-Softmax mixture
// (soft-gumbel), a Dirichlet mixture (soft-dirichlet) or a full-vocabulary
// mixture plus Gaussian noise (soft-gaussian). The answer phase is always
// discrete sampling and stops at EOS or at the answer budget.

#include <cmath>
#include <cstddef>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "softgrpo/advantages.hpp"
#include "softgrpo/autodiff.hpp"
#include "softgrpo/errors.hpp"
#include "softgrpo/model.hpp"
#include "softgrpo/parallel.hpp"
#include "softgrpo/rng.hpp"
#include "softgrpo/sampling.hpp"
#include "softgrpo/tasks.hpp"

namespace softgrpo::rollout {

enum class Mode { kDiscrete, kSoftDeterministic, kSoftGumbel, kSoftDirichlet, kSoftGaussian };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::kDiscrete: return "discrete";
    case Mode::kSoftDeterministic: return "soft-det";
    case Mode::kSoftGumbel: return "soft-gumbel";
    case Mode::kSoftDirichlet: return "soft-dirichlet";
    case Mode::kSoftGaussian: return "soft-gaussian";
  }
  return "?";
}

inline std::optional<Mode> parse_mode(const std::string& s) {
  for (Mode m : {Mode::kDiscrete, Mode::kSoftDeterministic, Mode::kSoftGumbel, Mode::kSoftDirichlet, Mode::kSoftGaussian})
    if (to_string(m) == s) return m;
  return std::nullopt;
}

struct RolloutConfig {
  std::size_t think_len = 8;
  std::size_t answer_budget = 0;  // 0: task answer length + 1 (room for EOS)
  double temperature = 0.6;
  std::size_t top_k = 5;
  double top_p = 0.95;
  double tau_g = 0.1;
  double dirichlet_alpha = 10.0;
  double gaussian_sigma = 0.1;
  bool greedy = false;      // argmax of raw logits everywhere a token is sampled
  bool zero_noise = false;  // test hook: Gumbel noise forced to 0

  std::size_t budget_for(const tasks::TaskSpec& spec) const {
    return answer_budget == 0 ? spec.answer_len + 1 : answer_budget;
  }
};

// A sampled discrete token with log pi_old(token) from raw, untempered logits.
struct TokenStep {
  std::size_t id = 0;
  double old_logprob = 0.0;
  friend bool operator==(const TokenStep&, const TokenStep&) = default;
};

// One soft think step.
//  soft-det:       retained_ids, old_probs (the mixture weights)
//  soft-gumbel:    + perturbed (g'), weights (y'), noise (eps)
//  soft-dirichlet: + weights (x), perturbed (log x)
//  soft-gaussian:  retained_ids = whole vocabulary, old_probs, mean_input (s), fed_input (s_hat)
struct SoftStep {
  std::vector<std::size_t> retained_ids;
  std::vector<double> old_probs;
  std::vector<double> perturbed;
  std::vector<double> weights;
  std::vector<double> noise;
  std::vector<double> mean_input;
  std::vector<double> fed_input;
  friend bool operator==(const SoftStep&, const SoftStep&) = default;
};

struct Trajectory {
  Mode mode = Mode::kDiscrete;
  std::vector<std::size_t> query;
  std::vector<TokenStep> think_tokens;  // discrete mode
  std::vector<SoftStep> soft_steps;     // soft modes
  std::vector<TokenStep> answer;
  int reward = 0;

  std::size_t think_length() const { return mode == Mode::kDiscrete ? think_tokens.size() : soft_steps.size(); }
  std::vector<std::size_t> answer_ids() const {
    std::vector<std::size_t> ids;
    for (const auto& a : answer) ids.push_back(a.id);
    return ids;
  }
  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

struct RolloutGroup {
  tasks::TaskInstance instance;
  std::vector<Trajectory> trajectories;
  std::vector<double> rewards;
  std::vector<double> advantages;

  bool rewards_mixed() const {
    for (double r : rewards)
      if (r != rewards.front()) return true;
    return false;
  }
};

// sum_i w_i * E[ids_i], accumulated in the same order as autodiff::row_weighted_sum.
inline std::vector<double> mix_rows(const autodiff::Tensor& E, std::span<const std::size_t> ids, std::span<const double> w) {
  const std::size_t d = E.cols();
  std::vector<double> out(d, 0.0);
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) out[j] += w[i] * E.data[ids[i] * d + j];
  return out;
}

inline std::vector<double> embedding_row(const autodiff::Tensor& E, std::size_t id) {
  const std::size_t d = E.cols();
  return {E.data.begin() + static_cast<std::ptrdiff_t>(id * d), E.data.begin() + static_cast<std::ptrdiff_t>((id + 1) * d)};
}

inline std::vector<double> log_softmax(std::span<const double> logits) {
  std::vector<double> out(logits.begin(), logits.end());
  autodiff::detail::log_softmax_inplace(out);
  return out;
}

inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

inline std::size_t sequence_length(const tasks::TaskSpec& spec, const RolloutConfig& cfg) {
  return 1 + spec.query_len + cfg.think_len + 1 + cfg.budget_for(spec) - 1;
}

namespace detail {

class Decoder {
 public:
  Decoder(const model::PolicyParams& params, const tasks::TaskSpec& spec, const RolloutConfig& cfg,
          std::span<const std::size_t> query)
      : params_(params), spec_(spec), cfg_(cfg), inc_(params) {
    if (sequence_length(spec, cfg) > params.config.max_seq_len)
      throw CapacityError("rollout: BOS + query + think + SEP + answer needs " +
                          std::to_string(sequence_length(spec, cfg)) + " positions, model has " +
                          std::to_string(params.config.max_seq_len));
    if (params.config.vocab_size != spec.vocab_size) throw ContractError("rollout: model and task vocabularies differ");
    feed_token(spec.bos());
    for (std::size_t q : query) feed_token(q);
  }

  void feed_token(std::size_t id) { feed(embedding_row(params_.embedding, id)); }
  void feed(const std::vector<double>& v) { last_ = inc_.push(v); }

  // Logits for the next position given everything fed so far.
  const std::vector<double>& next_logits() const { return last_; }

  TokenStep sample_token(RngStream& rng) const {
    const std::vector<double> logits = next_logits();
    const std::vector<double> logp = log_softmax(logits);
    std::size_t id;
    if (cfg_.greedy) {
      id = argmax(logits);
    } else {
      const auto dist = sampling::top_k_top_p_filter(sampling::temperature_scale(logits, cfg_.temperature),
                                                     cfg_.top_k, cfg_.top_p);
      id = sampling::categorical_sample(dist, rng);
    }
    return {id, logp[id]};
  }

  sampling::FilteredDist filtered(const std::vector<double>& logits) const {
    return sampling::top_k_top_p_filter(sampling::temperature_scale(logits, cfg_.temperature), cfg_.top_k, cfg_.top_p);
  }

  void run_answer(Trajectory& t, RngStream& rng) {
    feed_token(spec_.sep());
    const std::size_t budget = cfg_.budget_for(spec_);
    for (std::size_t i = 0; i < budget; ++i) {
      TokenStep s = sample_token(rng);
      t.answer.push_back(s);
      if (s.id == spec_.eos()) break;
      if (i + 1 < budget) feed_token(s.id);
    }
  }

  const model::PolicyParams& params() const { return params_; }

 private:
  const model::PolicyParams& params_;
  const tasks::TaskSpec& spec_;
  const RolloutConfig& cfg_;
  model::IncrementalForward inc_;
  std::vector<double> last_;
};

inline void finish(Trajectory& t, const tasks::TaskInstance& inst, const tasks::TaskSpec& spec) {
  t.reward = tasks::verify(t.answer_ids(), inst, spec);
}

}  // namespace detail

inline Trajectory rollout_discrete(const model::PolicyParams& params_old, const tasks::TaskInstance& inst,
                                   const tasks::TaskSpec& spec, const RolloutConfig& cfg, RngStream& rng) {
  detail::Decoder dec(params_old, spec, cfg, inst.query);
  Trajectory t;
  t.mode = Mode::kDiscrete;
  t.query = inst.query;
  for (std::size_t s = 0; s < cfg.think_len; ++s) {
    TokenStep step = dec.sample_token(rng);
    t.think_tokens.push_back(step);
    dec.feed_token(step.id);
  }
  dec.run_answer(t, rng);
  detail::finish(t, inst, spec);
  return t;
}

inline Trajectory rollout_soft_deterministic(const model::PolicyParams& params_old, const tasks::TaskInstance& inst,
                                             const tasks::TaskSpec& spec, const RolloutConfig& cfg, RngStream& rng) {
  detail::Decoder dec(params_old, spec, cfg, inst.query);
  Trajectory t;
  t.mode = Mode::kSoftDeterministic;
  t.query = inst.query;
  for (std::size_t s = 0; s < cfg.think_len; ++s) {
    const auto dist = dec.filtered(dec.next_logits());
    SoftStep step;
    step.retained_ids = dist.retained_ids;
    step.old_probs = dist.probs;
    dec.feed(mix_rows(params_old.embedding, step.retained_ids, step.old_probs));
    t.soft_steps.push_back(std::move(step));
  }
  dec.run_answer(t, rng);
  detail::finish(t, inst, spec);
  return t;
}

// Noise-free think phase; the answer phase draws from a fixed stream.
inline Trajectory rollout_soft_deterministic(const model::PolicyParams& params_old, const tasks::TaskInstance& inst,
                                             const tasks::TaskSpec& spec, const RolloutConfig& cfg) {
  RngStream rng(0);
  return rollout_soft_deterministic(params_old, inst, spec, cfg, rng);
}

inline Trajectory rollout_soft_gumbel(const model::PolicyParams& params_old, const tasks::TaskInstance& inst,
                                      const tasks::TaskSpec& spec, const RolloutConfig& cfg, RngStream& rng) {
  if (!(cfg.tau_g > 0.0)) throw ContractError("rollout_soft_gumbel: tau_g must be > 0");
  detail::Decoder dec(params_old, spec, cfg, inst.query);
  Trajectory t;
  t.mode = Mode::kSoftGumbel;
  t.query = inst.query;
  for (std::size_t s = 0; s < cfg.think_len; ++s) {
    const auto dist = dec.filtered(dec.next_logits());
    SoftStep step;
    step.retained_ids = dist.retained_ids;
    step.old_probs = dist.probs;
    step.noise = cfg.zero_noise ? std::vector<double>(dist.size(), 0.0) : sampling::sample_gumbel(rng, dist.size());
    auto gs = sampling::gumbel_softmax(dist, step.noise, cfg.tau_g);
    step.perturbed = std::move(gs.perturbed);
    step.weights = std::move(gs.weights);
    dec.feed(mix_rows(params_old.embedding, step.retained_ids, step.weights));
    t.soft_steps.push_back(std::move(step));
  }
  dec.run_answer(t, rng);
  detail::finish(t, inst, spec);
  return t;
}

inline Trajectory rollout_soft_dirichlet(const model::PolicyParams& params_old, const tasks::TaskInstance& inst,
                                         const tasks::TaskSpec& spec, const RolloutConfig& cfg, RngStream& rng) {
  detail::Decoder dec(params_old, spec, cfg, inst.query);
  Trajectory t;
  t.mode = Mode::kSoftDirichlet;
  t.query = inst.query;
  for (std::size_t s = 0; s < cfg.think_len; ++s) {
    const auto dist = dec.filtered(dec.next_logits());
    SoftStep step;
    step.retained_ids = dist.retained_ids;
    step.old_probs = dist.probs;
    auto ds = sampling::dirichlet_resample(dist, cfg.dirichlet_alpha, rng);
    step.weights = std::move(ds.weights);
    step.perturbed = std::move(ds.log_weights);
    dec.feed(mix_rows(params_old.embedding, step.retained_ids, step.weights));
    t.soft_steps.push_back(std::move(step));
  }
  dec.run_answer(t, rng);
  detail::finish(t, inst, spec);
  return t;
}

inline Trajectory rollout_soft_gaussian(const model::PolicyParams& params_old, const tasks::TaskInstance& inst,
                                        const tasks::TaskSpec& spec, const RolloutConfig& cfg, RngStream& rng) {
  if (!(cfg.gaussian_sigma >= 0.0)) throw ContractError("rollout_soft_gaussian: sigma must be >= 0");
  detail::Decoder dec(params_old, spec, cfg, inst.query);
  Trajectory t;
  t.mode = Mode::kSoftGaussian;
  t.query = inst.query;
  const std::size_t V = params_old.config.vocab_size, d = params_old.config.embed_dim;
  std::vector<std::size_t> all(V);
  for (std::size_t i = 0; i < V; ++i) all[i] = i;
  for (std::size_t s = 0; s < cfg.think_len; ++s) {
    SoftStep step;
    step.retained_ids = all;
    step.old_probs = sampling::temperature_scale(dec.next_logits(), cfg.temperature);
    step.mean_input = mix_rows(params_old.embedding, all, step.old_probs);
    const auto noise = sampling::gaussian_noise(d, cfg.gaussian_sigma, rng);
    step.fed_input = step.mean_input;
    for (std::size_t j = 0; j < d; ++j) step.fed_input[j] += noise[j];
    dec.feed(step.fed_input);
    t.soft_steps.push_back(std::move(step));
  }
  dec.run_answer(t, rng);
  detail::finish(t, inst, spec);
  return t;
}

inline Trajectory rollout(Mode mode, const model::PolicyParams& params_old, const tasks::TaskInstance& inst,
                          const tasks::TaskSpec& spec, const RolloutConfig& cfg, RngStream& rng) {
  switch (mode) {
    case Mode::kDiscrete: return rollout_discrete(params_old, inst, spec, cfg, rng);
    case Mode::kSoftDeterministic: return rollout_soft_deterministic(params_old, inst, spec, cfg, rng);
    case Mode::kSoftGumbel: return rollout_soft_gumbel(params_old, inst, spec, cfg, rng);
    case Mode::kSoftDirichlet: return rollout_soft_dirichlet(params_old, inst, spec, cfg, rng);
    case Mode::kSoftGaussian: return rollout_soft_gaussian(params_old, inst, spec, cfg, rng);
  }
  throw ContractError("rollout: unknown mode");
}

// G trajectories for one query; member g draws from base.derive({g}).
inline RolloutGroup rollout_group(const model::PolicyParams& params_old, const tasks::TaskInstance& inst,
                                  const tasks::TaskSpec& spec, std::size_t group_size, Mode mode,
                                  const RolloutConfig& cfg, const RngStream& base, double std_guard,
                                  std::size_t threads = 1) {
  if (group_size < 2) throw ContractError("rollout_group: group size must be >= 2");
  RolloutGroup group;
  group.instance = inst;
  group.trajectories.resize(group_size);
  parallel_for(group_size, threads, [&](std::size_t g) {
    RngStream rng = base.derive({g});
    group.trajectories[g] = rollout(mode, params_old, inst, spec, cfg, rng);
  });
  for (const auto& t : group.trajectories) group.rewards.push_back(static_cast<double>(t.reward));
  group.advantages = optimize::compute_advantages(group.rewards, std_guard);
  return group;
}

// Teacher-forced input matrix for a recorded trajectory, built on `b`'s graph so
// that gradients reach the embedding rows used by discrete and soft inputs.
struct SequenceLayout {
  std::size_t prefix_len = 0;  // BOS + query
  std::size_t think_len = 0;
  std::size_t answer_len = 0;

  // Logit row that predicts think step s (0-based).
  std::size_t think_row(std::size_t s) const { return prefix_len - 1 + s; }
  // Logit row that predicts answer token i (0-based).
  std::size_t answer_row(std::size_t i) const { return prefix_len + think_len + i; }
  std::size_t input_len() const { return prefix_len + think_len + 1 + (answer_len > 0 ? answer_len - 1 : 0); }
};

inline SequenceLayout layout_of(const Trajectory& t) {
  return {1 + t.query.size(), t.think_length(), t.answer.size()};
}

inline autodiff::Var build_inputs(const model::BoundParams& b, const Trajectory& t, const tasks::TaskSpec& spec) {
  autodiff::Graph& g = *b.embedding.graph;
  std::vector<autodiff::Var> rows;
  rows.push_back(model::embed_discrete(b, spec.bos()));
  for (std::size_t q : t.query) rows.push_back(model::embed_discrete(b, q));
  if (t.mode == Mode::kDiscrete) {
    for (const auto& s : t.think_tokens) rows.push_back(model::embed_discrete(b, s.id));
  } else {
    for (const auto& s : t.soft_steps) {
      switch (t.mode) {
        case Mode::kSoftDeterministic: rows.push_back(model::embed_soft(b, s.retained_ids, s.old_probs)); break;
        case Mode::kSoftGumbel:
        case Mode::kSoftDirichlet: rows.push_back(model::embed_soft(b, s.retained_ids, s.weights)); break;
        case Mode::kSoftGaussian: rows.push_back(g.constant(autodiff::Tensor::vector(s.fed_input))); break;
        case Mode::kDiscrete: break;
      }
    }
  }
  rows.push_back(model::embed_discrete(b, spec.sep()));
  for (std::size_t i = 0; i + 1 < t.answer.size(); ++i) rows.push_back(model::embed_discrete(b, t.answer[i].id));
  return autodiff::stack_rows(rows);
}

// Tab-separated debugging dump, one record per line.
inline void dump_trajectory(std::ostream& os, const Trajectory& t) {
  auto join = [](const auto& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  };
  os << "trajectory\t" << to_string(t.mode) << "\tquery=" << join(t.query) << "\treward=" << t.reward << '\n';
  for (std::size_t i = 0; i < t.think_tokens.size(); ++i)
    os << "think\t" << i << "\tid=" << t.think_tokens[i].id << "\told_logprob=" << t.think_tokens[i].old_logprob << '\n';
  for (std::size_t i = 0; i < t.soft_steps.size(); ++i) {
    const auto& s = t.soft_steps[i];
    os << "soft\t" << i << "\tids=" << join(s.retained_ids) << "\told_probs=" << join(s.old_probs)
       << "\tg=" << join(s.perturbed) << "\ty=" << join(s.weights) << "\teps=" << join(s.noise) << '\n';
  }
  for (std::size_t i = 0; i < t.answer.size(); ++i)
    os << "answer\t" << i << "\tid=" << t.answer[i].id << "\told_logprob=" << t.answer[i].old_logprob << '\n';
}

}  // namespace softgrpo::rollout
