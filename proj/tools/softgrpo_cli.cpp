// softgrpo: train / eval / verify / compare.
//
// Exit codes: 0 ok, 1 usage or config error, 2 verification or integrity
// failure, 3 numeric failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "softgrpo/softgrpo.hpp"

namespace fs = std::filesystem;
using namespace softgrpo;

namespace {

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string mode;
  std::string checkpoint;
};

config::RunConfig resolve(const Options& o) {
  config::RunConfig cfg = o.config_path.empty() ? config::parse_string("") : config::load(o.config_path);
  if (o.seed) cfg.seed = *o.seed;
  if (!o.out.empty()) cfg.out = o.out;
  if (!o.mode.empty()) {
    auto m = rollout::parse_mode(o.mode);
    if (!m) throw ConfigError("unknown --mode '" + o.mode + "'");
    cfg.mode = *m;
  }
  cfg.validate();
  fs::create_directories(cfg.out);
  std::ofstream(fs::path(cfg.out) / "config.resolved") << config::echo(cfg);
  return cfg;
}

void print_eval(const experiment::EvalSummary& e) { std::cout << e.to_json().dump() << "\n"; }

int cmd_train(const Options& o) {
  const auto cfg = resolve(o);
  experiment::MetricsLog log((fs::path(cfg.out) / "metrics.jsonl").string());
  experiment::TrainHooks hooks;
  hooks.log = &log;
  hooks.checkpoint_dir = (fs::path(cfg.out) / "checkpoints").string();
  hooks.on_step = [&](const experiment::StepStats& s) {
    if ((s.step + 1) % 50 == 0)
      std::fprintf(stderr, "update %zu reward %.3f ppo_kl %.2e ref_kl %.3e\n", s.step + 1, s.reward_mean,
                   s.report.ppo_kl, s.report.ref_kl);
  };
  const auto out = experiment::train(cfg, cfg.mode, hooks);
  if (!o.checkpoint.empty()) checkpoint::save(out.params, {cfg.schedule.steps, cfg.seed}, o.checkpoint);
  if (out.final_eval) print_eval(*out.final_eval);
  return 0;
}

int cmd_eval(const Options& o) {
  if (o.checkpoint.empty()) throw CLI::ValidationError("eval", "--checkpoint is required");
  const auto cfg = resolve(o);
  model::ModelConfig mc = cfg.model;
  mc.vocab_size = cfg.task.vocab_size;
  const auto loaded = checkpoint::load(o.checkpoint, &mc);
  const auto spec = cfg.task.spec();
  const auto summary = experiment::summarize(experiment::evaluate(loaded.params, cfg, cfg.mode), spec);
  experiment::MetricsLog log((fs::path(cfg.out) / "eval.jsonl").string());
  log.write(experiment::eval_record(loaded.meta.step, cfg.mode, summary));
  print_eval(summary);
  return 0;
}

int cmd_verify(const Options& o) {
  std::optional<experiment::MetricsLog> log;
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    log.emplace((fs::path(o.out) / "verify.jsonl").string());
  }
  bool ok = true;
  for (const auto& r : verify::run_all()) {
    std::printf("%s %-22s %s (%.1fs)\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.summary.c_str(), r.seconds);
    ok = ok && r.passed;
    if (log) {
      verify::Json j;
      j["suite"] = r.name;
      j["passed"] = r.passed;
      j["stats"] = r.stats;
      log->write(j);
    }
  }
  return ok ? 0 : 2;
}

int cmd_compare(const Options& o) {
  const auto cfg = resolve(o);
  const fs::path root(cfg.out);
  fs::create_directories(root / "discrete");
  fs::create_directories(root / "soft-gumbel");
  experiment::MetricsLog ld((root / "discrete" / "metrics.jsonl").string());
  experiment::MetricsLog ls((root / "soft-gumbel" / "metrics.jsonl").string());
  const auto c = experiment::compare(cfg, &ld, &ls, (root / "checkpoints").string());
  const std::string table = experiment::summary_table(*c.discrete.final_eval, *c.soft.final_eval);
  std::ofstream(root / "summary.txt") << table;
  experiment::MetricsLog summary((root / "summary.jsonl").string());
  summary.write({{"arm", "discrete"}, {"eval", c.discrete.final_eval->to_json()}});
  summary.write({{"arm", "soft-gumbel"}, {"eval", c.soft.final_eval->to_json()}});
  std::cout << table;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SofT-GRPO laboratory"};
  app.require_subcommand(1);
  Options o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "key = value config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "master seed override");
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--mode", o.mode, "rollout mode")
        ->check(CLI::IsMember({"discrete", "soft-det", "soft-gumbel", "soft-dirichlet", "soft-gaussian"}));
    sub->add_option("--checkpoint", o.checkpoint, "checkpoint path");
  };
  auto* train = app.add_subcommand("train", "train a policy");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  auto* ver = app.add_subcommand("verify", "run the self-check suites");
  auto* cmp = app.add_subcommand("compare", "discrete vs soft-gumbel under matched budgets");
  for (auto* s : {train, eval, ver, cmp}) add_common(s);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  try {
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o);
    if (*ver) return cmd_verify(o);
    if (*cmp) return cmd_compare(o);
  } catch (const CLI::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const IntegrityError& e) {
    std::cerr << "integrity error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
