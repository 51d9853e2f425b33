#pragma once

// End-to-end flows: train, eval and compare. Every random draw comes from a
// stream derived from the master seed and a fixed id path, so a run is a pure
// function of its config regardless of the thread count.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "softgrpo/checkpoint.hpp"
#include "softgrpo/config.hpp"
#include "softgrpo/errors.hpp"
#include "softgrpo/metrics.hpp"
#include "softgrpo/model.hpp"
#include "softgrpo/objectives.hpp"
#include "softgrpo/parallel.hpp"
#include "softgrpo/rollout.hpp"
#include "softgrpo/tasks.hpp"

namespace softgrpo::experiment {

using Json = nlohmann::ordered_json;

// Stream ids under the master seed.
enum : std::uint64_t { kInitStream = 1, kTrainQueryStream = 2, kTrainRolloutStream = 3, kEvalStream = 4 };

// Append-only JSON Lines sink; records are also kept in memory when asked.
class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(const std::string& path, bool keep = false) : keep_(keep) {
    os_.open(path, std::ios::trunc);
    if (!os_) throw ConfigError("cannot open metrics log '" + path + "'");
  }
  static MetricsLog memory() {
    MetricsLog m;
    m.keep_ = true;
    return m;
  }

  void write(const Json& rec) {
    if (os_.is_open()) {
      os_ << rec.dump() << '\n';
      os_.flush();
    }
    if (keep_) records_.push_back(rec);
  }
  const std::vector<Json>& records() const { return records_; }

 private:
  std::ofstream os_;
  bool keep_ = false;
  std::vector<Json> records_;
};

inline std::size_t resolve_threads(const config::RunConfig& cfg) {
  return cfg.schedule.threads == 0 ? default_threads() : cfg.schedule.threads;
}

inline model::PolicyParams initial_params(const config::RunConfig& cfg) {
  model::ModelConfig mc = cfg.model;
  mc.vocab_size = cfg.task.vocab_size;
  return model::init_params(mc, RngStream(cfg.seed).derive({kInitStream}).next_u64());
}

// Query q of update `step`; identical across modes for a given seed.
inline tasks::TaskInstance train_query(const config::RunConfig& cfg, const tasks::TaskSpec& spec, std::size_t step,
                                       std::size_t q) {
  RngStream r = RngStream(cfg.seed).derive({kTrainQueryStream, step, q});
  return tasks::generate(r, spec);
}

inline tasks::TaskInstance eval_query(const config::RunConfig& cfg, const tasks::TaskSpec& spec, std::size_t q) {
  RngStream r = RngStream(cfg.seed).derive({kEvalStream, cfg.eval.seed_offset, q});
  return tasks::generate(r, spec);
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalSummary {
  double mean_at_n = 0.0;
  std::vector<std::pair<std::size_t, double>> pass;   // (k, Pass@k)
  std::vector<std::pair<std::size_t, double>> major;  // (k, Major@k)
  metrics::TokenStats tokens;
  std::size_t attempts = 0;
  std::size_t queries = 0;

  double pass_at(std::size_t k) const {
    for (auto [kk, v] : pass)
      if (kk == k) return v;
    return std::numeric_limits<double>::quiet_NaN();
  }

  Json to_json() const {
    Json j;
    j["mean_at_" + std::to_string(attempts)] = mean_at_n;
    for (auto [k, v] : pass) j["pass_at_" + std::to_string(k)] = v;
    for (auto [k, v] : major) j["major_at_" + std::to_string(k)] = v;
    j["tokens"] = tokens.mean_tokens;
    j["tokens_correct"] = tokens.mean_tokens_correct ? Json(*tokens.mean_tokens_correct) : Json(nullptr);
    return j;
  }
};

// The answer as compared against the truth: cut at EOS, PAD removed. Answers
// without EOS get an id outside the vocabulary so they never match.
inline std::vector<std::size_t> canonical_answer(std::span<const std::size_t> ids, const tasks::TaskSpec& spec) {
  std::vector<std::size_t> out;
  for (std::size_t id : ids) {
    if (id == spec.eos()) return out;
    if (id != spec.pad()) out.push_back(id);
  }
  out.push_back(std::numeric_limits<std::size_t>::max());
  return out;
}

inline EvalSummary summarize(const metrics::EvalResult& r, const tasks::TaskSpec& spec) {
  EvalSummary s;
  s.attempts = r.attempts_per_query();
  s.queries = r.queries.size();
  s.mean_at_n = metrics::mean_at_k(r);
  for (std::size_t k : {1, 8, 16, 32})
    if (k <= s.attempts) s.pass.emplace_back(k, metrics::pass_at_k(r, k));
  for (std::size_t k : {16, 32})
    if (k <= s.attempts)
      s.major.emplace_back(k, metrics::major_at_k(r, k, [&](const metrics::Attempt& a) {
                             return canonical_answer(a.answer, spec);
                           }));
  s.tokens = metrics::token_stats(r);
  return s;
}

inline metrics::EvalResult evaluate(const model::PolicyParams& params, const config::RunConfig& cfg,
                                    rollout::Mode mode) {
  const auto spec = cfg.task.spec();
  const auto rcfg = cfg.eval_rollout();
  const std::size_t n = cfg.eval.attempts, nq = cfg.eval.queries;
  metrics::EvalResult res;
  res.queries.resize(nq);
  for (std::size_t q = 0; q < nq; ++q) {
    const auto inst = eval_query(cfg, spec, q);
    res.queries[q].truth = inst.truth;
    res.queries[q].attempts.resize(n);
  }
  const RngStream base = RngStream(cfg.seed).derive({kEvalStream, cfg.eval.seed_offset, 0xA77E});
  parallel_for(nq * n, resolve_threads(cfg), [&](std::size_t i) {
    const std::size_t q = i / n, a = i % n;
    const auto inst = eval_query(cfg, spec, q);
    RngStream rng = base.derive({q, a});
    const auto t = rollout::rollout(mode, params, inst, spec, rcfg, rng);
    auto& at = res.queries[q].attempts[a];
    at.answer = t.answer_ids();
    at.correct = t.reward == 1;
    at.think_len = t.think_length();
    at.answer_len = t.answer.size();
  });
  return res;
}

// ---------------------------------------------------------------------------
// Training

struct StepStats {
  std::size_t step = 0;
  double reward_mean = 0.0;
  double mixed_fraction = 0.0;  // groups whose rewards are not all equal
  optimize::UpdateReport report;
};

struct TrainOutcome {
  model::PolicyParams params;
  std::vector<StepStats> steps;
  std::optional<EvalSummary> final_eval;
};

struct TrainHooks {
  MetricsLog* log = nullptr;
  std::string checkpoint_dir;  // empty: no checkpoints
  bool final_eval = true;
  std::function<void(const StepStats&)> on_step;
  std::function<bool(const StepStats&)> stop;  // true ends training after this update
};

inline Json step_record(const StepStats& s, rollout::Mode mode) {
  Json j;
  j["step"] = s.step;
  j["phase"] = "train";
  j["mode"] = rollout::to_string(mode);
  j["reward_mean"] = s.reward_mean;
  j["mixed_groups"] = s.mixed_fraction;
  j["surrogate"] = s.report.surrogate;
  j["objective"] = s.report.objective;
  j["ref_kl"] = s.report.ref_kl;
  j["ppo_kl"] = s.report.ppo_kl;
  j["ppo_kl_think"] = s.report.ppo_kl_think;
  j["ppo_kl_answer"] = s.report.ppo_kl_answer;
  j["grad_norm"] = s.report.grad_norm;
  j["clip_fraction"] = s.report.clip_fraction;
  j["mean_ratio"] = s.report.mean_ratio;
  j["max_ratio"] = s.report.max_ratio;
  j["tokens"] = s.report.tokens;
  return j;
}

inline Json eval_record(std::size_t step, rollout::Mode mode, const EvalSummary& e) {
  Json j;
  j["step"] = step;
  j["phase"] = "eval";
  j["mode"] = rollout::to_string(mode);
  const Json body = e.to_json();
  for (auto& [k, v] : body.items()) j[k] = v;
  return j;
}

inline void require_finite(double v, const char* what, std::size_t step) {
  if (!std::isfinite(v)) throw NumericError(std::string("non-finite ") + what + " at update " + std::to_string(step));
}

inline TrainOutcome train(const config::RunConfig& cfg, rollout::Mode mode, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (!optimize::trainable(mode))
    throw ConfigError("mode " + rollout::to_string(mode) + " has no trainable density; use it with eval");
  const auto spec = cfg.task.spec();
  const std::size_t threads = resolve_threads(cfg);
  const std::size_t Q = cfg.schedule.queries_per_batch, G = cfg.schedule.group_size;

  TrainOutcome out;
  out.params = initial_params(cfg);
  const model::PolicyParams ref = model::snapshot(out.params);
  optimize::AdamState adam;

  auto save = [&](std::size_t step, const std::string& name) {
    if (hooks.checkpoint_dir.empty()) return;
    std::filesystem::create_directories(hooks.checkpoint_dir);
    checkpoint::save(out.params, {step, cfg.seed}, (std::filesystem::path(hooks.checkpoint_dir) / name).string());
  };
  auto run_eval = [&](std::size_t step) {
    const EvalSummary e = summarize(evaluate(out.params, cfg, mode), spec);
    if (hooks.log) hooks.log->write(eval_record(step, mode, e));
    return e;
  };

  for (std::size_t step = 0; step < cfg.schedule.steps; ++step) {
    // Rollouts under theta_old = current parameters, frozen for this update.
    std::vector<rollout::RolloutGroup> groups(Q);
    const RngStream rbase = RngStream(cfg.seed).derive({kTrainRolloutStream, step});
    parallel_for(Q, threads, [&](std::size_t q) {
      groups[q] = rollout::rollout_group(out.params, train_query(cfg, spec, step, q), spec, G, mode, cfg.rollout,
                                         rbase.derive({q}), cfg.loss.std_guard);
    });

    auto res = optimize::policy_objective(groups, out.params, ref, spec, cfg.loss, cfg.rollout, threads);
    require_finite(res.objective, "objective", step);
    require_finite(res.report.grad_norm, "gradient", step);
    for (double& g : res.grad) g = -g;
    optimize::clip_grad_norm(res.grad, cfg.loss.max_grad_norm);
    optimize::adam_step(out.params, res.grad, adam, cfg.loss);
    const auto kl = optimize::ppo_kl_parts(groups, out.params, spec, cfg.rollout, cfg.loss.log_ratio_clamp, threads);
    res.report.ppo_kl = kl.all;
    res.report.ppo_kl_think = kl.think;
    res.report.ppo_kl_answer = kl.answer;
    require_finite(res.report.ppo_kl, "PPO-KL", step);

    StepStats s;
    s.step = step;
    s.report = res.report;
    std::size_t mixed = 0;
    double rsum = 0.0;
    for (const auto& g : groups) {
      for (double r : g.rewards) rsum += r;
      mixed += g.rewards_mixed() ? 1 : 0;
    }
    s.reward_mean = rsum / static_cast<double>(Q * G);
    s.mixed_fraction = static_cast<double>(mixed) / static_cast<double>(Q);
    out.steps.push_back(s);
    if (hooks.log && step % cfg.schedule.log_every == 0) hooks.log->write(step_record(s, mode));
    if (hooks.on_step) hooks.on_step(s);

    const std::size_t done = step + 1;
    if (cfg.eval.every && done % cfg.eval.every == 0 && done < cfg.schedule.steps) run_eval(done);
    if (cfg.schedule.checkpoint_every && done % cfg.schedule.checkpoint_every == 0)
      save(done, "step_" + std::to_string(done) + ".ckpt");
    if (hooks.stop && hooks.stop(s)) break;
  }
  const std::size_t done = out.steps.size();
  save(done, "final.ckpt");
  if (hooks.final_eval) out.final_eval = run_eval(done);
  return out;
}

// ---------------------------------------------------------------------------
// Compare: matched discrete and soft-gumbel runs plus a summary table.

struct CompareOutcome {
  TrainOutcome discrete, soft;
};

inline std::string summary_table(const EvalSummary& d, const EvalSummary& s) {
  auto row = [](const std::string& name, const EvalSummary& e) {
    char buf[256];
    const double tc = e.tokens.mean_tokens_correct.value_or(std::numeric_limits<double>::quiet_NaN());
    std::snprintf(buf, sizeof buf, "%-12s %8.4f %8.4f %8.4f %8.4f %8.4f %8.2f %8.2f\n", name.c_str(), e.mean_at_n,
                  e.pass_at(16), e.pass_at(32), e.major.size() > 0 ? e.major[0].second : NAN,
                  e.major.size() > 1 ? e.major[1].second : NAN, e.tokens.mean_tokens, tc);
    return std::string(buf);
  };
  std::string t = "arm            Mean@n  Pass@16  Pass@32 Major@16 Major@32   #Token #Token_c\n";
  return t + row("discrete", d) + row("soft-gumbel", s);
}

inline CompareOutcome compare(const config::RunConfig& cfg, MetricsLog* log_discrete, MetricsLog* log_soft,
                              const std::string& checkpoint_root = "") {
  CompareOutcome c;
  TrainHooks hd{log_discrete, checkpoint_root.empty() ? "" : checkpoint_root + "/discrete", true, {}, {}};
  TrainHooks hs{log_soft, checkpoint_root.empty() ? "" : checkpoint_root + "/soft-gumbel", true, {}, {}};
  c.discrete = train(cfg, rollout::Mode::kDiscrete, hd);
  c.soft = train(cfg, rollout::Mode::kSoftGumbel, hs);
  return c;
}

}  // namespace softgrpo::experiment
