#pragma once

// Run configuration: `key = value` lines with dotted section prefixes.
// Blank lines and `#` comments are ignored; unknown keys are rejected.
// echo() prints every key in table order and load(echo(cfg)) == cfg.

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "softgrpo/errors.hpp"
#include "softgrpo/model.hpp"
#include "softgrpo/objectives.hpp"
#include "softgrpo/rollout.hpp"
#include "softgrpo/tasks.hpp"

namespace softgrpo::config {

struct TaskConfig {
  std::string name = "modsum";
  std::size_t vocab_size = 16;
  std::size_t length = 3;  // parity bits / reverse length

  tasks::TaskSpec spec() const { return tasks::make_task(name, vocab_size, length); }
  friend bool operator==(const TaskConfig&, const TaskConfig&) = default;
};

struct EvalConfig {
  std::size_t attempts = 32;
  std::size_t queries = 64;
  std::size_t every = 0;  // 0: only at the end of training
  double temperature = 0.6;
  std::size_t top_k = 30;
  double top_p = 0.95;
  double tau_g = 0.5;
  std::uint64_t seed_offset = 1000003;  // held-out instances come from a disjoint stream

  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

struct ScheduleConfig {
  std::size_t steps = 2000;
  std::size_t queries_per_batch = 8;
  std::size_t group_size = 8;
  std::size_t checkpoint_every = 0;
  std::size_t threads = 0;  // 0: hardware concurrency
  std::size_t log_every = 1;

  friend bool operator==(const ScheduleConfig&, const ScheduleConfig&) = default;
};

struct RunConfig {
  TaskConfig task;
  model::ModelConfig model;
  rollout::RolloutConfig rollout;
  rollout::Mode mode = rollout::Mode::kSoftGumbel;
  optimize::LossConfig loss;
  ScheduleConfig schedule;
  EvalConfig eval;
  std::uint64_t seed = 1;
  std::string out = "out";

  void validate() const;

  // Rollout settings used for held-out evaluation.
  rollout::RolloutConfig eval_rollout() const {
    rollout::RolloutConfig r = rollout;
    r.temperature = eval.temperature;
    r.top_k = eval.top_k;
    r.top_p = eval.top_p;
    r.tau_g = eval.tau_g;
    return r;
  }

  friend bool operator==(const RunConfig& a, const RunConfig& b) {
    auto same_rollout = [](const rollout::RolloutConfig& x, const rollout::RolloutConfig& y) {
      return x.think_len == y.think_len && x.answer_budget == y.answer_budget && x.temperature == y.temperature &&
             x.top_k == y.top_k && x.top_p == y.top_p && x.tau_g == y.tau_g && x.dirichlet_alpha == y.dirichlet_alpha &&
             x.gaussian_sigma == y.gaussian_sigma && x.greedy == y.greedy && x.zero_noise == y.zero_noise;
    };
    auto same_loss = [](const optimize::LossConfig& x, const optimize::LossConfig& y) {
      return x.clip_eps == y.clip_eps && x.beta == y.beta && x.std_guard == y.std_guard &&
             x.log_ratio_clamp == y.log_ratio_clamp && x.learning_rate == y.learning_rate &&
             x.adam_beta1 == y.adam_beta1 && x.adam_beta2 == y.adam_beta2 && x.adam_eps == y.adam_eps &&
             x.max_grad_norm == y.max_grad_norm;
    };
    return a.task == b.task && a.model == b.model && same_rollout(a.rollout, b.rollout) && a.mode == b.mode &&
           same_loss(a.loss, b.loss) && a.schedule == b.schedule && a.eval == b.eval && a.seed == b.seed &&
           a.out == b.out;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* first = v.data();
  const char* last = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last) throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
  return out;
}

inline std::string fmt_double(double x) {
  std::ostringstream os;
  os << std::setprecision(17) << x;
  return os.str();
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
  std::string doc;
};

#define SOFTGRPO_SIZE(K, EXPR, DOC)                                                                            \
  Field{K, [](RunConfig& c, const std::string& v) { c.EXPR = parse_number<std::size_t>(K, v); },              \
        [](const RunConfig& c) { return std::to_string(c.EXPR); }, DOC}
#define SOFTGRPO_U64(K, EXPR, DOC)                                                                             \
  Field{K, [](RunConfig& c, const std::string& v) { c.EXPR = parse_number<std::uint64_t>(K, v); },            \
        [](const RunConfig& c) { return std::to_string(c.EXPR); }, DOC}
#define SOFTGRPO_REAL(K, EXPR, DOC)                                                                            \
  Field{K, [](RunConfig& c, const std::string& v) { c.EXPR = parse_number<double>(K, v); },                   \
        [](const RunConfig& c) { return fmt_double(c.EXPR); }, DOC}
#define SOFTGRPO_BOOL(K, EXPR, DOC)                                                                            \
  Field{K, [](RunConfig& c, const std::string& v) { c.EXPR = parse_bool(K, v); },                             \
        [](const RunConfig& c) { return std::string(c.EXPR ? "true" : "false"); }, DOC}
#define SOFTGRPO_STR(K, EXPR, DOC)                                                                             \
  Field{K, [](RunConfig& c, const std::string& v) { c.EXPR = v; }, [](const RunConfig& c) { return c.EXPR; }, DOC}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      SOFTGRPO_U64("run.seed", seed, "master seed"),
      SOFTGRPO_STR("run.out", out, "output directory"),
      Field{"run.mode",
            [](RunConfig& c, const std::string& v) {
              auto m = rollout::parse_mode(v);
              if (!m) throw ConfigError("config key 'run.mode': unknown mode '" + v + "'");
              c.mode = *m;
            },
            [](const RunConfig& c) { return rollout::to_string(c.mode); }, "rollout mode"},
      SOFTGRPO_STR("task.name", task.name, "modsum | parity | reverse"),
      SOFTGRPO_SIZE("task.vocab_size", task.vocab_size, "|T|"),
      SOFTGRPO_SIZE("task.length", task.length, "parity bits / reverse length"),
      SOFTGRPO_SIZE("model.embed_dim", model.embed_dim, "d"),
      SOFTGRPO_SIZE("model.num_layers", model.num_layers, ""),
      SOFTGRPO_SIZE("model.num_heads", model.num_heads, ""),
      SOFTGRPO_SIZE("model.max_seq_len", model.max_seq_len, ""),
      SOFTGRPO_REAL("model.hidden_mult", model.hidden_mult, "feed-forward width / d"),
      SOFTGRPO_SIZE("rollout.think_len", rollout.think_len, "think steps before SEP"),
      SOFTGRPO_SIZE("rollout.answer_budget", rollout.answer_budget, "0: answer length + 1"),
      SOFTGRPO_REAL("rollout.temperature", rollout.temperature, "tau"),
      SOFTGRPO_SIZE("rollout.top_k", rollout.top_k, ""),
      SOFTGRPO_REAL("rollout.top_p", rollout.top_p, ""),
      SOFTGRPO_REAL("rollout.tau_g", rollout.tau_g, "Gumbel-Softmax temperature"),
      SOFTGRPO_REAL("rollout.dirichlet_alpha", rollout.dirichlet_alpha, ""),
      SOFTGRPO_REAL("rollout.gaussian_sigma", rollout.gaussian_sigma, ""),
      SOFTGRPO_BOOL("rollout.greedy", rollout.greedy, "argmax decoding"),
      SOFTGRPO_REAL("loss.clip_eps", loss.clip_eps, ""),
      SOFTGRPO_REAL("loss.beta", loss.beta, "reference KL weight"),
      SOFTGRPO_REAL("loss.std_guard", loss.std_guard, ""),
      SOFTGRPO_REAL("loss.log_ratio_clamp", loss.log_ratio_clamp, ""),
      SOFTGRPO_REAL("loss.learning_rate", loss.learning_rate, ""),
      SOFTGRPO_REAL("loss.adam_beta1", loss.adam_beta1, ""),
      SOFTGRPO_REAL("loss.adam_beta2", loss.adam_beta2, ""),
      SOFTGRPO_REAL("loss.adam_eps", loss.adam_eps, ""),
      SOFTGRPO_REAL("loss.max_grad_norm", loss.max_grad_norm, "global gradient-norm clip, 0: off"),
      SOFTGRPO_SIZE("train.steps", schedule.steps, "updates"),
      SOFTGRPO_SIZE("train.queries_per_batch", schedule.queries_per_batch, ""),
      SOFTGRPO_SIZE("train.group_size", schedule.group_size, "G"),
      SOFTGRPO_SIZE("train.checkpoint_every", schedule.checkpoint_every, "0: final only"),
      SOFTGRPO_SIZE("train.threads", schedule.threads, "0: all cores"),
      SOFTGRPO_SIZE("train.log_every", schedule.log_every, ""),
      SOFTGRPO_SIZE("eval.attempts", eval.attempts, "n per query"),
      SOFTGRPO_SIZE("eval.queries", eval.queries, "held-out queries"),
      SOFTGRPO_SIZE("eval.every", eval.every, "0: end of training only"),
      SOFTGRPO_REAL("eval.temperature", eval.temperature, ""),
      SOFTGRPO_SIZE("eval.top_k", eval.top_k, ""),
      SOFTGRPO_REAL("eval.top_p", eval.top_p, ""),
      SOFTGRPO_REAL("eval.tau_g", eval.tau_g, ""),
      SOFTGRPO_U64("eval.seed_offset", eval.seed_offset, "held-out stream id"),
  };
  return f;
}

#undef SOFTGRPO_SIZE
#undef SOFTGRPO_U64
#undef SOFTGRPO_REAL
#undef SOFTGRPO_BOOL
#undef SOFTGRPO_STR

}  // namespace detail

inline void RunConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) { throw ConfigError("config key '" + key + "': " + why); };
  try {
    task.spec();
  } catch (const std::exception& e) {
    fail("task", e.what());
  }
  if (model.vocab_size != task.vocab_size) fail("task.vocab_size", "model and task vocabularies differ");
  try {
    model.validate();
  } catch (const std::exception& e) {
    fail("model", e.what());
  }
  if (!(rollout.temperature > 0.0)) fail("rollout.temperature", "must be > 0");
  if (rollout.top_k == 0) fail("rollout.top_k", "must be >= 1");
  if (!(rollout.top_p > 0.0 && rollout.top_p <= 1.0)) fail("rollout.top_p", "must lie in (0, 1]");
  if (!(rollout.tau_g > 0.0)) fail("rollout.tau_g", "must be > 0");
  if (!(rollout.dirichlet_alpha > 0.0)) fail("rollout.dirichlet_alpha", "must be > 0");
  if (!(rollout.gaussian_sigma > 0.0)) fail("rollout.gaussian_sigma", "must be > 0");
  const auto spec = task.spec();
  if (rollout::sequence_length(spec, rollout) > model.max_seq_len)
    fail("model.max_seq_len", "too small for query + think + answer (" +
                                  std::to_string(rollout::sequence_length(spec, rollout)) + " positions)");
  if (!(loss.clip_eps > 0.0 && loss.clip_eps < 1.0)) fail("loss.clip_eps", "must lie in (0, 1)");
  if (!(loss.beta >= 0.0)) fail("loss.beta", "must be >= 0");
  if (!(loss.std_guard > 0.0)) fail("loss.std_guard", "must be > 0");
  if (!(loss.log_ratio_clamp > std::log1p(loss.clip_eps))) fail("loss.log_ratio_clamp", "must exceed log(1 + clip_eps)");
  if (!(loss.learning_rate > 0.0)) fail("loss.learning_rate", "must be > 0");
  if (!(loss.adam_beta1 >= 0.0 && loss.adam_beta1 < 1.0)) fail("loss.adam_beta1", "must lie in [0, 1)");
  if (!(loss.adam_beta2 >= 0.0 && loss.adam_beta2 < 1.0)) fail("loss.adam_beta2", "must lie in [0, 1)");
  if (!(loss.adam_eps > 0.0)) fail("loss.adam_eps", "must be > 0");
  if (!(loss.max_grad_norm >= 0.0)) fail("loss.max_grad_norm", "must be >= 0");
  if (schedule.queries_per_batch == 0) fail("train.queries_per_batch", "must be >= 1");
  if (schedule.group_size < 2) fail("train.group_size", "must be >= 2");
  if (schedule.log_every == 0) fail("train.log_every", "must be >= 1");
  if (eval.attempts == 0) fail("eval.attempts", "must be >= 1");
  if (eval.queries == 0) fail("eval.queries", "must be >= 1");
  if (!(eval.temperature > 0.0)) fail("eval.temperature", "must be > 0");
  if (eval.top_k == 0) fail("eval.top_k", "must be >= 1");
  if (!(eval.top_p > 0.0 && eval.top_p <= 1.0)) fail("eval.top_p", "must lie in (0, 1]");
  if (!(eval.tau_g > 0.0)) fail("eval.tau_g", "must be > 0");
  if (out.empty()) fail("run.out", "must not be empty");
}

// Applies `key = value` text on top of `base` (defaults when omitted).
inline RunConfig parse(std::istream& in, RunConfig base = {}) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    bool found = false;
    for (const auto& f : detail::fields())
      if (f.key == key) {
        f.set(base, value);
        found = true;
        break;
      }
    if (!found) throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  base.model.vocab_size = base.task.vocab_size;
  base.validate();
  return base;
}

inline RunConfig parse_string(const std::string& text, RunConfig base = {}) {
  std::istringstream is(text);
  return parse(is, std::move(base));
}

inline RunConfig load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  return parse(in);
}

inline std::string echo(const RunConfig& cfg) {
  std::ostringstream os;
  for (const auto& f : detail::fields()) os << f.key << " = " << f.get(cfg) << "\n";
  return os.str();
}

inline const std::vector<detail::Field>& documented_keys() { return detail::fields(); }

}  // namespace softgrpo::config
