#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "softgrpo/softgrpo.hpp"

namespace {

using namespace softgrpo;
namespace fs = std::filesystem;
using experiment::Json;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("softgrpo_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Small enough that a few updates run in well under a second.
config::RunConfig tiny_config() {
  return config::parse_string(
      "model.embed_dim = 8\n"
      "model.num_layers = 1\n"
      "model.max_seq_len = 16\n"
      "rollout.think_len = 2\n"
      "train.steps = 3\n"
      "train.queries_per_batch = 2\n"
      "train.group_size = 4\n"
      "train.threads = 1\n"
      "eval.attempts = 4\n"
      "eval.queries = 3\n");
}

std::vector<double> flat(const model::PolicyParams& p) {
  std::vector<double> v;
  auto copy = p;
  copy.for_each([&](const std::string&, autodiff::Tensor& t) { v.insert(v.end(), t.data.begin(), t.data.end()); });
  return v;
}

// ---------------------------------------------------------------------------
// Config

TEST(Config, EmptyFileGivesDocumentedDefaults) {
  const auto c = config::parse_string("");
  EXPECT_EQ(c.task.name, "modsum");
  EXPECT_EQ(c.task.vocab_size, 16u);
  EXPECT_EQ(c.model.embed_dim, 32u);
  EXPECT_EQ(c.model.num_layers, 2u);
  EXPECT_EQ(c.rollout.temperature, 0.6);
  EXPECT_EQ(c.rollout.top_p, 0.95);
  EXPECT_EQ(c.rollout.top_k, 5u);
  EXPECT_EQ(c.rollout.tau_g, 0.1);
  EXPECT_EQ(c.eval.top_k, 30u);
  EXPECT_EQ(c.eval.tau_g, 0.5);
  EXPECT_EQ(c.eval.attempts, 32u);
  EXPECT_EQ(c.loss.learning_rate, 3e-4);
  EXPECT_EQ(c.schedule.queries_per_batch, 8u);
  EXPECT_EQ(c.schedule.group_size, 8u);
  EXPECT_EQ(c.mode, rollout::Mode::kSoftGumbel);
}

TEST(Config, EchoListsEveryDocumentedKeyOnce) {
  const std::string e = config::echo(config::parse_string(""));
  for (const auto& f : config::documented_keys()) {
    const std::string needle = f.key + " = ";
    const auto first = e.find(needle);
    ASSERT_NE(first, std::string::npos) << f.key;
    EXPECT_EQ(e.find("\n" + needle, first + 1), std::string::npos) << f.key;
  }
}

TEST(Config, RoundTripThroughEcho) {
  const auto c = config::parse_string(
      "run.seed = 77\nrun.mode = soft-dirichlet\ntask.name = parity\ntask.vocab_size = 6\ntask.length = 5\n"
      "rollout.tau_g = 0.37\nloss.learning_rate = 1.234567890123e-3\nloss.beta = 0\neval.every = 10\n"
      "rollout.greedy = true\n");
  EXPECT_EQ(config::parse_string(config::echo(c)), c);
  EXPECT_EQ(config::echo(config::parse_string(config::echo(c))), config::echo(c));
}

TEST(Config, CommentsAndWhitespace) {
  const auto c = config::parse_string("  # header\n\nrollout.top_k=7   # inline\n\t loss.beta =  0.5 \n");
  EXPECT_EQ(c.rollout.top_k, 7u);
  EXPECT_EQ(c.loss.beta, 0.5);
}

TEST(Config, ConstraintViolationNamesKey) {
  try {
    config::parse_string("rollout.tau_g = -1\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("rollout.tau_g"), std::string::npos) << e.what();
  }
}

TEST(Config, UnknownKeyRejected) {
  try {
    config::parse_string("rollout.topk = 3\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("rollout.topk"), std::string::npos) << e.what();
  }
}

TEST(Config, TypeMismatchAndMalformedLines) {
  EXPECT_THROW(config::parse_string("train.steps = many\n"), ConfigError);
  EXPECT_THROW(config::parse_string("train.steps = -3\n"), ConfigError);
  EXPECT_THROW(config::parse_string("loss.beta = 0.1x\n"), ConfigError);
  EXPECT_THROW(config::parse_string("rollout.greedy = maybe\n"), ConfigError);
  EXPECT_THROW(config::parse_string("run.mode = soft-laplace\n"), ConfigError);
  EXPECT_THROW(config::parse_string("just words\n"), ConfigError);
}

TEST(Config, CrossFieldValidation) {
  EXPECT_THROW(config::parse_string("rollout.top_p = 0\n"), ConfigError);
  EXPECT_THROW(config::parse_string("train.group_size = 1\n"), ConfigError);
  EXPECT_THROW(config::parse_string("model.max_seq_len = 8\n"), ConfigError);
  EXPECT_THROW(config::parse_string("model.num_heads = 3\n"), ConfigError);
  EXPECT_THROW(config::parse_string("task.vocab_size = 12\n"), ConfigError);
}

TEST(Config, MissingFileIsConfigError) { EXPECT_THROW(config::load("/nonexistent/run.cfg"), ConfigError); }

// ---------------------------------------------------------------------------
// Checkpoint

class CheckpointTest : public ::testing::Test {
 protected:
  model::ModelConfig mc = [] {
    model::ModelConfig c;
    c.embed_dim = 8;
    c.num_layers = 2;
    return c;
  }();
  model::PolicyParams params = [this] {
    auto p = model::init_params(mc, 5);
    RngStream r(6);
    p.for_each([&](const std::string&, autodiff::Tensor& t) {
      for (double& v : t.data) v += r.normal();
    });
    return p;
  }();
};

TEST_F(CheckpointTest, RoundTripIsBitwise) {
  const auto bytes = checkpoint::serialize(params, {42, 9});
  const auto back = checkpoint::deserialize(bytes, &mc);
  EXPECT_EQ(back.meta.step, 42u);
  EXPECT_EQ(back.meta.seed, 9u);
  EXPECT_TRUE(back.params.config == mc);
  const auto a = flat(params), b = flat(back.params);
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)), 0);
  EXPECT_EQ(checkpoint::serialize(back.params, back.meta), bytes);
}

TEST_F(CheckpointTest, FileRoundTrip) {
  const auto dir = scratch("ckpt");
  const auto path = (dir / "p.ckpt").string();
  checkpoint::save(params, {1, 2}, path);
  EXPECT_EQ(flat(checkpoint::load(path).params), flat(params));
}

TEST_F(CheckpointTest, HeaderIsLittleEndianAndVersioned) {
  const auto bytes = checkpoint::serialize(params, {0x0102, 0});
  ASSERT_GT(bytes.size(), 16u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "SGRPOCKP");
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[9], 0);
  EXPECT_EQ(bytes[10], 0);
  EXPECT_EQ(bytes[11], 0);
  // First model field after the version: vocab_size as u64.
  EXPECT_EQ(bytes[12], 16);
  for (int i = 13; i < 20; ++i) EXPECT_EQ(bytes[static_cast<std::size_t>(i)], 0);
}

TEST_F(CheckpointTest, PayloadLengthMatchesManifest) {
  const auto bytes = checkpoint::serialize(params, {});
  const auto bare = checkpoint::serialize(model::init_params(mc, 0), {});
  EXPECT_EQ(bytes.size(), bare.size());
  EXPECT_GE(bytes.size(), params.num_parameters() * 8);
}

TEST_F(CheckpointTest, AnyFlippedPayloadByteIsDetected) {
  const auto bytes = checkpoint::serialize(params, {});
  const std::size_t payload_begin = bytes.size() - 8 - params.num_parameters() * 8;
  for (std::size_t i = payload_begin; i < bytes.size() - 8; i += 37) {
    auto bad = bytes;
    bad[i] ^= 0x01;
    EXPECT_THROW(checkpoint::deserialize(bad), IntegrityError) << "byte " << i;
  }
}

TEST_F(CheckpointTest, HeaderCorruptionAndTruncationDetected) {
  const auto bytes = checkpoint::serialize(params, {});
  auto bad = bytes;
  bad[3] ^= 0xFF;
  EXPECT_THROW(checkpoint::deserialize(bad), IntegrityError);
  EXPECT_THROW(checkpoint::deserialize({bytes.begin(), bytes.begin() + 100}), IntegrityError);
  EXPECT_THROW(checkpoint::deserialize({}), IntegrityError);
}

TEST_F(CheckpointTest, WrongModelConfigIsManifestError) {
  const auto bytes = checkpoint::serialize(params, {});
  model::ModelConfig other = mc;
  other.num_layers = 1;
  EXPECT_THROW(checkpoint::deserialize(bytes, &other), IntegrityError);
}

TEST_F(CheckpointTest, MissingFileIsIntegrityError) {
  EXPECT_THROW(checkpoint::load("/nonexistent/x.ckpt"), IntegrityError);
}

// ---------------------------------------------------------------------------
// Metrics log and training flow

TEST(MetricsLog, OneParseableRecordPerLine) {
  const auto dir = scratch("log");
  const auto path = (dir / "m.jsonl").string();
  {
    experiment::MetricsLog log(path);
    experiment::TrainHooks h;
    h.log = &log;
    experiment::train(tiny_config(), rollout::Mode::kSoftGumbel, h);
  }
  std::ifstream in(path);
  std::string line;
  std::vector<Json> recs;
  while (std::getline(in, line)) recs.push_back(Json::parse(line));
  ASSERT_EQ(recs.size(), 4u);  // 3 train + final eval
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(recs[i]["phase"], "train");
    EXPECT_EQ(recs[i]["step"], i);
    for (const char* k : {"reward_mean", "surrogate", "ref_kl", "ppo_kl", "grad_norm", "clip_fraction"})
      EXPECT_TRUE(recs[i].contains(k)) << k;
  }
  EXPECT_EQ(recs[3]["phase"], "eval");
  EXPECT_EQ(recs[3]["step"], 3);
  for (const char* k : {"mean_at_4", "pass_at_1", "tokens", "tokens_correct"}) EXPECT_TRUE(recs[3].contains(k)) << k;
}

TEST(Train, ZeroStepsLeavesInitialization) {
  auto c = tiny_config();
  c.schedule.steps = 0;
  experiment::TrainHooks h;
  h.final_eval = false;
  const auto out = experiment::train(c, rollout::Mode::kDiscrete, h);
  EXPECT_EQ(flat(out.params), flat(experiment::initial_params(c)));
  EXPECT_TRUE(out.steps.empty());
}

TEST(Train, SameSeedGivesIdenticalLog) {
  for (auto mode : {rollout::Mode::kDiscrete, rollout::Mode::kSoftGumbel}) {
    auto a = experiment::MetricsLog::memory(), b = experiment::MetricsLog::memory();
    experiment::TrainHooks ha, hb;
    ha.log = &a;
    hb.log = &b;
    const auto ra = experiment::train(tiny_config(), mode, ha);
    const auto rb = experiment::train(tiny_config(), mode, hb);
    ASSERT_EQ(a.records().size(), b.records().size());
    for (std::size_t i = 0; i < a.records().size(); ++i) EXPECT_EQ(a.records()[i].dump(), b.records()[i].dump());
    EXPECT_EQ(flat(ra.params), flat(rb.params));
  }
}

TEST(Train, ThreadCountDoesNotChangeResults) {
  auto c1 = tiny_config(), c3 = tiny_config();
  c3.schedule.threads = 3;
  auto a = experiment::MetricsLog::memory(), b = experiment::MetricsLog::memory();
  experiment::TrainHooks ha, hb;
  ha.log = &a;
  hb.log = &b;
  const auto r1 = experiment::train(c1, rollout::Mode::kSoftGumbel, ha);
  const auto r3 = experiment::train(c3, rollout::Mode::kSoftGumbel, hb);
  EXPECT_EQ(flat(r1.params), flat(r3.params));
  for (std::size_t i = 0; i < a.records().size(); ++i) EXPECT_EQ(a.records()[i].dump(), b.records()[i].dump());
}

TEST(Train, DifferentSeedsDiffer) {
  auto c = tiny_config();
  c.seed = 2;
  EXPECT_NE(flat(experiment::train(tiny_config(), rollout::Mode::kDiscrete).params),
            flat(experiment::train(c, rollout::Mode::kDiscrete).params));
}

TEST(Train, CheckpointsAtCadence) {
  const auto dir = scratch("cadence");
  auto c = tiny_config();
  c.schedule.checkpoint_every = 2;
  experiment::TrainHooks h;
  h.checkpoint_dir = dir.string();
  h.final_eval = false;
  const auto out = experiment::train(c, rollout::Mode::kDiscrete, h);
  EXPECT_TRUE(fs::exists(dir / "step_2.ckpt"));
  const auto fin = checkpoint::load((dir / "final.ckpt").string());
  EXPECT_EQ(fin.meta.step, 3u);
  EXPECT_EQ(flat(fin.params), flat(out.params));
}

TEST(Train, StopHookEndsEarlyAndEvaluatesThere) {
  auto c = tiny_config();
  c.schedule.steps = 10;
  auto log = experiment::MetricsLog::memory();
  experiment::TrainHooks h;
  h.log = &log;
  h.stop = [](const experiment::StepStats& s) { return s.step == 1; };
  const auto out = experiment::train(c, rollout::Mode::kDiscrete, h);
  EXPECT_EQ(out.steps.size(), 2u);
  ASSERT_EQ(log.records().size(), 3u);
  EXPECT_EQ(log.records().back()["phase"], "eval");
  EXPECT_EQ(log.records().back()["step"], 2);
}

TEST(Train, DeterministicModeIsRejected) {
  EXPECT_THROW(experiment::train(tiny_config(), rollout::Mode::kSoftDeterministic), ConfigError);
}

TEST(Train, DivergenceIsNumericError) {
  auto c = tiny_config();
  c.loss.learning_rate = 1e300;
  c.schedule.steps = 20;
  EXPECT_THROW(experiment::train(c, rollout::Mode::kDiscrete), NumericError);
}

// ---------------------------------------------------------------------------
// Eval and compare

metrics::EvalResult synthetic(std::size_t queries, std::size_t n, double p_correct, RngStream& rng) {
  metrics::EvalResult r;
  for (std::size_t q = 0; q < queries; ++q) {
    metrics::QueryResult qr;
    qr.truth = {q % 10};
    for (std::size_t a = 0; a < n; ++a) {
      const bool ok = rng.uniform() < p_correct;
      qr.attempts.push_back({ok ? std::vector<std::size_t>{q % 10, 12} : std::vector<std::size_t>{rng.below(10), 12}, ok,
                             8, 2});
    }
    r.queries.push_back(qr);
  }
  return r;
}

TEST(Eval, PerfectPolicyScoresOneEverywhere) {
  RngStream rng(1);
  const auto spec = tasks::make_task("modsum", 16, 0);
  const auto s = experiment::summarize(synthetic(5, 32, 1.1, rng), spec);
  EXPECT_EQ(s.mean_at_n, 1.0);
  for (auto [k, v] : s.pass) EXPECT_EQ(v, 1.0) << k;
  for (auto [k, v] : s.major) EXPECT_EQ(v, 1.0) << k;
  EXPECT_EQ(s.tokens.mean_tokens, 10.0);
}

TEST(Eval, PassAtKOrdering) {
  RngStream rng(2);
  const auto spec = tasks::make_task("modsum", 16, 0);
  for (double p : {0.0, 0.05, 0.3, 0.8}) {
    const auto s = experiment::summarize(synthetic(7, 32, p, rng), spec);
    EXPECT_GE(s.pass_at(32), s.pass_at(16));
    EXPECT_GE(s.pass_at(16), s.mean_at_n);
    EXPECT_EQ(s.pass_at(1), s.mean_at_n);
  }
}

TEST(Eval, CanonicalAnswerCutsAtEosAndRejectsMissingEos) {
  const auto spec = tasks::make_task("modsum", 16, 0);
  EXPECT_EQ(experiment::canonical_answer(std::vector<std::size_t>{4, 12, 9}, spec), std::vector<std::size_t>{4});
  EXPECT_EQ(experiment::canonical_answer(std::vector<std::size_t>{13, 4, 12}, spec), std::vector<std::size_t>{4});
  EXPECT_NE(experiment::canonical_answer(std::vector<std::size_t>{4, 4}, spec), (std::vector<std::size_t>{4, 4}));
}

TEST(Eval, RecordsConfiguredAttemptsForEveryMode) {
  auto c = tiny_config();
  c.eval.attempts = 32;
  const auto p = experiment::initial_params(c);
  for (auto mode : {rollout::Mode::kDiscrete, rollout::Mode::kSoftDeterministic, rollout::Mode::kSoftGumbel,
                    rollout::Mode::kSoftDirichlet, rollout::Mode::kSoftGaussian}) {
    const auto r = experiment::evaluate(p, c, mode);
    ASSERT_EQ(r.queries.size(), 3u);
    EXPECT_EQ(r.attempts_per_query(), 32u);
    const auto s = experiment::summarize(r, c.task.spec());
    EXPECT_EQ(s.pass.size(), 4u);
    EXPECT_EQ(s.major.size(), 2u);
  }
}

TEST(Eval, HeldOutQueriesAreFixedBySeed) {
  const auto c = tiny_config();
  const auto spec = c.task.spec();
  for (std::size_t q = 0; q < 5; ++q)
    EXPECT_EQ(experiment::eval_query(c, spec, q), experiment::eval_query(c, spec, q));
}

TEST(Compare, ArmsSeeIdenticalQuerySequences) {
  auto c = tiny_config();
  std::vector<tasks::TaskInstance> seen_d, seen_s;
  const auto spec = c.task.spec();
  for (std::size_t step = 0; step < 4; ++step)
    for (std::size_t q = 0; q < c.schedule.queries_per_batch; ++q) {
      seen_d.push_back(experiment::train_query(c, spec, step, q));
      c.mode = rollout::Mode::kDiscrete;
      seen_s.push_back(experiment::train_query(c, spec, step, q));
      c.mode = rollout::Mode::kSoftGumbel;
    }
  EXPECT_EQ(seen_d, seen_s);
}

TEST(Compare, SummaryCarriesBothArms) {
  auto c = tiny_config();
  c.eval.attempts = 32;
  c.schedule.steps = 1;
  const auto out = experiment::compare(c, nullptr, nullptr);
  ASSERT_TRUE(out.discrete.final_eval && out.soft.final_eval);
  EXPECT_FALSE(std::isnan(out.discrete.final_eval->pass_at(32)));
  EXPECT_FALSE(std::isnan(out.soft.final_eval->pass_at(32)));
  const auto table = experiment::summary_table(*out.discrete.final_eval, *out.soft.final_eval);
  for (const char* s : {"discrete", "soft-gumbel", "Pass@32", "Major@32", "#Token", "#Token_c"})
    EXPECT_NE(table.find(s), std::string::npos) << s;
}

// ---------------------------------------------------------------------------
// Verification suites

TEST(Verify, GumbelMaxReportsDeviation) {
  const auto r = verify::gumbel_max_suite();
  EXPECT_TRUE(r.passed) << r.summary;
  EXPECT_TRUE(r.stats.contains("max_deviation_normalized"));
  EXPECT_LE(r.stats["max_deviation_normalized"].get<double>(), 0.01);
}

TEST(Verify, CorruptedGradientRuleFailsGradientSuite) {
  verify::GradientOptions o;
  o.instances = 1;
  EXPECT_TRUE(verify::gradient_suite(o).passed);
  autodiff::testing_hooks::corrupt_matmul_backward = true;
  const auto bad = verify::gradient_suite(o);
  autodiff::testing_hooks::corrupt_matmul_backward = false;
  EXPECT_FALSE(bad.passed) << bad.summary;
}

// ---------------------------------------------------------------------------
// CLI exit codes

#ifdef SOFTGRPO_CLI
int run_cli(const std::string& args) {
  const std::string cmd = std::string(SOFTGRPO_CLI) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

fs::path write_tiny_config(const fs::path& dir, const std::string& extra = "") {
  const fs::path p = dir / "tiny.cfg";
  std::ofstream(p) << config::echo(tiny_config()) << extra;
  return p;
}

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run_cli(""), 1);
  EXPECT_EQ(run_cli("fly"), 1);
  EXPECT_EQ(run_cli("train --mode soft-laplace"), 1);
  EXPECT_EQ(run_cli("train --config /nonexistent.cfg"), 1);
  EXPECT_EQ(run_cli("eval"), 1);
  EXPECT_EQ(run_cli("--help"), 0);
}

TEST(Cli, BadConfigExitsOne) {
  const auto dir = scratch("cli_cfg");
  const auto cfg = write_tiny_config(dir, "rollout.tau_g = -1\n");
  EXPECT_EQ(run_cli("train --config " + cfg.string() + " --out " + (dir / "o").string()), 1);
}

TEST(Cli, TrainThenEvalAndCorruptionExitsTwo) {
  const auto dir = scratch("cli_run");
  const auto cfg = write_tiny_config(dir);
  const auto ckpt = (dir / "final.ckpt").string();
  ASSERT_EQ(run_cli("train --mode discrete --config " + cfg.string() + " --out " + (dir / "t").string() +
                    " --checkpoint " + ckpt),
            0);
  EXPECT_TRUE(fs::exists(dir / "t" / "metrics.jsonl"));
  EXPECT_TRUE(fs::exists(dir / "t" / "config.resolved"));
  EXPECT_EQ(run_cli("eval --mode soft-det --config " + cfg.string() + " --out " + (dir / "e").string() +
                    " --checkpoint " + ckpt),
            0);
  EXPECT_TRUE(fs::exists(dir / "e" / "eval.jsonl"));

  auto bytes = checkpoint::read_bytes(ckpt);
  bytes[bytes.size() - 20] ^= 0x10;
  std::ofstream(ckpt, std::ios::binary | std::ios::trunc)
      .write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  EXPECT_EQ(run_cli("eval --config " + cfg.string() + " --out " + (dir / "e2").string() + " --checkpoint " + ckpt), 2);
}

TEST(Cli, DivergenceExitsThree) {
  const auto dir = scratch("cli_nan");
  const auto cfg = write_tiny_config(dir, "loss.learning_rate = 1e300\ntrain.steps = 20\n");
  EXPECT_EQ(run_cli("train --mode discrete --config " + cfg.string() + " --out " + (dir / "o").string()), 3);
}
#endif

}  // namespace
