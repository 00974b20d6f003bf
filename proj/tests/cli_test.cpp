#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gspen/commands.hpp"

namespace gspen {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / ("gspen_cli_" + std::string(info->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  /// A three-letter toy version of the word task, small enough for unit tests.
  json toy(const std::string& out = "out") const {
    return {{"output_dir", (dir_ / out).string()},
            {"seed", 3},
            {"task",
             {{"synthetic",
               {{"vocabulary", {{0, 1, 2}, {2, 1, 0}, {1, 1, 3}, {3, 0, 2}, {0, 3, 1}}},
                {"num_variables", 3},
                {"num_labels", 4},
                {"feature_dim", 4},
                {"noise", 0.6},
                {"train_size", 60},
                {"val_size", 40},
                {"test_size", 40}}}}},
            {"train", {{"learning_rate", 0.05}, {"batch_size", 16}, {"epochs", 3}}}};
  }

  json staged() const {
    json j = toy();
    j["stages"] = {{{"name", "unary"},
                    {"task", {{"graph", {{"builder", "unary"}}}}},
                    {"model", {{"stage", "unary"}, {"pairwise", {{"mode", "none"}}}}}},
                   {{"name", "struct"}, {"model", {{"stage", "struct-from-unary"}}}}};
    return j;
  }

  fs::path write(const std::string& name, const json& j) const {
    const auto p = dir_ / name;
    std::ofstream(p) << j.dump(2);
    return p;
  }

  static std::string error_of(const json& doc, const std::vector<std::string>& overrides = {}) {
    try {
      load_experiment(doc, overrides);
    } catch (const ConfigError& e) {
      return e.what();
    }
    return "";
  }

  static json read(const fs::path& p) { return json::parse(std::ifstream(p)); }

  static CommandOptions quiet(unsigned threads = 1) {
    CommandOptions o;
    o.threads = threads;
    o.log = nullptr;
    return o;
  }

  int run_cli(const std::string& args) const {
    const std::string cmd = std::string(GSPEN_CLI_PATH) + " " + args + " -q > " + (dir_ / "cli.log").string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  fs::path dir_;
};

TEST_F(Cli, ErrorsNameTheFieldPath) {
  json j = toy();
  j["model"]["T"]["hiden"] = {4};
  EXPECT_NE(error_of(j).find("model.T.hiden: unknown field"), std::string::npos) << error_of(j);
  EXPECT_NE(error_of(toy(), {"inference.max_iters=0"}).find("inference.max_iters must be >= 1"), std::string::npos);
  EXPECT_NE(error_of(toy(), {"train.batch_size=\"many\""}).find("train.batch_size: expected an integer"),
            std::string::npos);
  j = toy();
  j.erase("output_dir");
  EXPECT_NE(error_of(j).find("output_dir: required"), std::string::npos);
  EXPECT_NE(error_of(toy(), {"task.synthetic.noise=-1"}).find("task.synthetic"), std::string::npos);
  EXPECT_NE(error_of(toy(), {"eval.threshold=2"}).find("eval.threshold"), std::string::npos);
}

TEST_F(Cli, IncludesAndOverridesMerge) {
  json base = toy();
  base["train"]["epochs"] = 7;
  write("base.json", base);
  const auto top = write("top.json", {{"include", "base.json"}, {"train", {{"batch_size", 4}}}});
  const auto doc = load_config_document(top);
  EXPECT_EQ(doc["train"]["epochs"], 7);
  EXPECT_EQ(doc["train"]["batch_size"], 4);
  EXPECT_EQ(doc["train"]["learning_rate"], 0.05);

  json d = doc;
  apply_override(d, "model.T.hidden=[8,4]");
  apply_override(d, "model.kind=gspen-sum");
  apply_override(d, "inference.step_scale=2.5");
  EXPECT_EQ(d["model"]["T"]["hidden"], json({8, 4}));
  EXPECT_EQ(d["model"]["kind"], "gspen-sum");
  const auto rc = load_experiment(d, {}).front();
  EXPECT_EQ(rc.model.spec.kind, EnergyKind::gspen_sum);
  EXPECT_EQ(rc.inference.step_scale, 2.5);
  EXPECT_THROW(apply_override(d, "no_equals_sign"), ConfigError);
  EXPECT_THROW(apply_override(d, "train.epochs.deeper=1"), ConfigError);

  write("loop_a.json", {{"include", "loop_b.json"}});
  write("loop_b.json", {{"include", "loop_a.json"}});
  EXPECT_THROW(load_config_document(dir_ / "loop_a.json"), ConfigError);
}

TEST_F(Cli, StagesAreDiffsOverTheBase) {
  const auto stages = load_experiment(staged(), {"train.epochs=2"});
  ASSERT_EQ(stages.size(), 2u);
  EXPECT_EQ(stages[0].task.graph.builder, "unary");
  EXPECT_EQ(stages[1].task.graph.builder, "chain");
  EXPECT_EQ(stages[1].model.source_stage, "unary");
  EXPECT_EQ(stages[1].output_dir, stages[1].root_dir / "struct");
  EXPECT_EQ(stages[0].train.epochs, 2);

  json bad = staged();
  bad["stages"].erase(0);
  EXPECT_NE(error_of(bad).find("not an earlier stage"), std::string::npos) << error_of(bad);
  bad = staged();
  bad["stages"][1]["name"] = "unary";
  EXPECT_NE(error_of(bad).find("duplicate stage"), std::string::npos);
}

TEST_F(Cli, SeedFlowsIntoDataAndTraining) {
  const auto rc = load_experiment(toy(), {"seed=42"}).front();
  EXPECT_EQ(rc.task.synthetic.seed, 42u);
  EXPECT_EQ(rc.train.seed, 42u);
  const auto defaults = load_experiment(json{{"output_dir", "x"}}, {}).front();
  EXPECT_EQ(defaults.task.synthetic.train_size, 10000u);
  EXPECT_EQ(defaults.task.synthetic.val_size, 2000u);
  EXPECT_EQ(defaults.task.synthetic.test_size, 2000u);
}

TEST_F(Cli, GenDataWritesSplitsAndRefusesOverwrite) {
  const auto rc = load_experiment(toy(), {"task.synthetic.train_size=20"}).front();
  const auto r = cmd_gen_data(rc, quiet());
  EXPECT_EQ(load_jsonl(r.train.string()).size(), 20u);
  EXPECT_EQ(load_jsonl(r.test.string()).size(), 40u);
  const auto manifest = read(r.manifest);
  EXPECT_EQ(manifest["seed"], 3);
  EXPECT_EQ(manifest["sizes"]["train"], 20);
  EXPECT_THROW(cmd_gen_data(rc, quiet()), ConfigError);
  auto forced = quiet();
  forced.force = true;
  cmd_gen_data(rc, forced);
  EXPECT_EQ(read(r.manifest), manifest);
  EXPECT_EQ(load_jsonl(r.train.string()), generate_synthetic_sequence_dataset(rc.task.synthetic).train);
}

TEST_F(Cli, StructStageNeedsUnaryCheckpoint) {
  const auto stages = load_experiment(staged(), {});
  try {
    cmd_train(stages, quiet(), "struct");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("train the 'unary' stage first"), std::string::npos) << e.what();
  }
  EXPECT_THROW(cmd_train(stages, quiet(), "nonexistent"), ConfigError);
}

TEST_F(Cli, StagedTrainingWritesArtifacts) {
  const auto stages = load_experiment(staged(), {});
  const auto out = cmd_train(stages, quiet());
  ASSERT_EQ(out.size(), 2u);
  for (const auto& rc : stages) {
    EXPECT_TRUE(fs::exists(rc.checkpoint_path()));
    EXPECT_TRUE(fs::exists(rc.output_dir / "metrics.json"));
    EXPECT_TRUE(fs::exists(rc.output_dir / "config.resolved.json"));
    std::ifstream log(rc.output_dir / "train_log.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(log, line)) {
      const auto rec = json::parse(line);
      EXPECT_EQ(rec["epoch"], lines);
      ++lines;
    }
    EXPECT_EQ(lines, 4);
  }
  // The struct stage keeps the unary weights it started from.
  const auto u = load_checkpoint(stages[0].checkpoint_path());
  const auto s = load_checkpoint(stages[1].checkpoint_path());
  const auto a = u.slice_values("unary.0.W"), b = s.slice_values("unary.0.W");
  EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
  EXPECT_EQ(s.frozen(), (std::set<std::string>{"unary"}));
}

TEST_F(Cli, TrainingIsReproducibleAndEvalMatchesLog) {
  const auto a = load_experiment(toy("a"), {}).front();
  const auto b = load_experiment(toy("b"), {}).front();
  const auto ra = cmd_train({a}, quiet(1)).front();
  const auto rb = cmd_train({b}, quiet(3)).front();
  EXPECT_EQ(read(a.output_dir / "metrics.json"), read(b.output_dir / "metrics.json"));
  EXPECT_EQ(ra.train_metrics.sequence_accuracy, rb.train_metrics.sequence_accuracy);

  const auto logged = read(a.output_dir / "metrics.json");
  const auto on_train = cmd_eval(a, quiet(), "train");
  EXPECT_NEAR(on_train.metrics.sequence_accuracy, logged["train"]["sequence_accuracy"].get<double>(), 1e-9);
  EXPECT_NEAR(on_train.metrics.hamming_accuracy, logged["train"]["hamming_accuracy"].get<double>(), 1e-9);
  const auto on_val = cmd_eval(a, quiet(), "val");
  EXPECT_NEAR(on_val.metrics.sequence_accuracy, logged["val"]["sequence_accuracy"].get<double>(), 1e-9);
  EXPECT_TRUE(fs::exists(a.output_dir / "eval_val.json"));
}

TEST_F(Cli, EvalWritesPredictionsCsv) {
  const auto rc = load_experiment(toy(), {"eval.predictions_csv=true", "train.epochs=1"}).front();
  cmd_train({rc}, quiet());
  const auto ev = cmd_eval(rc, quiet());
  std::ifstream f(ev.predictions_file);
  std::string header, row;
  std::getline(f, header);
  EXPECT_EQ(header, "index,id,prediction,truth,correct");
  int rows = 0, correct = 0;
  while (std::getline(f, row)) {
    ++rows;
    correct += row.back() == '1';
  }
  EXPECT_EQ(rows, 40);
  EXPECT_NEAR(correct / 40.0, ev.metrics.sequence_accuracy, 1e-12);
}

TEST_F(Cli, MultilabelEvalReportsTunedThreshold) {
  std::vector<Example> train, val;
  std::mt19937_64 rng(5);
  std::bernoulli_distribution coin(0.4);
  for (int i = 0; i < 40; ++i) {
    Example ex;
    for (int k = 0; k < 3; ++k) ex.y.push_back(coin(rng));
    for (int k = 0; k < 3; ++k) ex.x.push_back(ex.y[k] ? 1.0 : 0.0);
    ex.x.push_back(1.0);
    (i < 30 ? train : val).push_back(ex);
  }
  save_jsonl((dir_ / "train.jsonl").string(), train);
  save_jsonl((dir_ / "val.jsonl").string(), val);
  json j = {{"output_dir", (dir_ / "ml").string()},
            {"task",
             {{"type", "files"},
              {"files", {{"train", (dir_ / "train.jsonl").string()}, {"val", (dir_ / "val.jsonl").string()},
                         {"test", (dir_ / "val.jsonl").string()}}},
              {"graph", {{"builder", "full_pairwise"}, {"num_variables", 3}, {"labels_per_variable", 2}}}}},
            {"model", {{"unary", {{"mode", "global"}}}, {"pairwise", {{"mode", "conditioned"}, {"hidden", {4}}}}}},
            {"inference", {{"algorithm", "mirror_descent"}, {"max_iters", 10}}},
            {"train", {{"epochs", 2}, {"learning_rate", 0.05}, {"validation_metric", "macro_f1"}}},
            {"eval", {{"threshold", "tune"}}}};
  const auto rc = load_experiment(j, {}).front();
  cmd_train({rc}, quiet());
  const auto ev = cmd_eval(rc, quiet());
  ASSERT_TRUE(ev.metrics.threshold.has_value());
  const auto report = read(ev.metrics_file);
  EXPECT_EQ(report["threshold"].get<double>(), *ev.metrics.threshold);
  EXPECT_GT(*ev.metrics.threshold, 0.0);
  EXPECT_LT(*ev.metrics.threshold, 1.0);
}

TEST_F(Cli, MissingDataFileIsAConfigError) {
  json j = toy();
  j["task"] = {{"type", "files"},
               {"files", {{"train", (dir_ / "absent.jsonl").string()}}},
               {"graph", {{"num_variables", 3}, {"labels_per_variable", 4}}}};
  EXPECT_NE(error_of(j).find("task.files.train: file not found"), std::string::npos) << error_of(j);
}

TEST_F(Cli, StarHubIsTheMostFrequentTrainingLabel) {
  std::vector<Example> train;
  for (int i = 0; i < 6; ++i) train.push_back({{1.0, 0.0}, {i % 2, 1, i < 2 ? 1 : 0, 0}, std::nullopt});
  save_jsonl((dir_ / "star.jsonl").string(), train);
  json j = toy();
  j["task"] = {{"type", "files"},
               {"files", {{"train", (dir_ / "star.jsonl").string()}}},
               {"graph", {{"builder", "star"}, {"num_variables", 4}, {"labels_per_variable", 2}, {"hub", "most_frequent"}}}};
  const auto data = load_task(load_experiment(j, {}).front());
  ASSERT_EQ(data.graph.num_regions(), 7u);
  for (std::size_t r = 4; r < 7; ++r) EXPECT_NE(std::ranges::find(data.graph.region_vars(r), 1), data.graph.region_vars(r).end());
  j["task"]["graph"]["hub"] = "busiest";
  EXPECT_NE(error_of(j).find("task.graph.hub: expected a variable index"), std::string::npos) << error_of(j);
}

TEST_F(Cli, InferWritesFeasibleBeliefsAndTrace) {
  const auto rc = load_experiment(toy(), {"train.epochs=1", "inference.algorithm=mirror_descent"}).front();
  cmd_train({rc}, quiet());
  const auto r = cmd_infer(rc, quiet(), "test", {}, 2);
  EXPECT_EQ(r.examples, 40u);
  EXPECT_LE(r.max_violation, 1e-6);
  std::ifstream trace(r.trace_file);
  std::string header;
  std::getline(trace, header);
  EXPECT_EQ(header, "iteration,objective,violation");
  std::ifstream lines(r.predictions_file);
  std::string first;
  std::getline(lines, first);
  EXPECT_EQ(json::parse(first)["labeling"].size(), 3u);
}

TEST_F(Cli, GradcheckPassesForEveryKind) {
  for (const std::string kind : {"linear", "gspen-sum", "hadamard", "joint-mlp"}) {
    json j = toy();
    j["model"] = {{"kind", kind}, {"T", {{"hidden", {5}}}}};
    if (kind == "joint-mlp") j["model"]["pairwise"] = {{"mode", "none"}};
    j["gradcheck"] = {{"instances", 2}, {"num_probes", 50}};
    const auto r = cmd_gradcheck(load_experiment(j, {}).front(), quiet());
    EXPECT_TRUE(r.passed) << kind;
    EXPECT_LE(std::max(r.beliefs_max_error, r.weights_max_error), kind == "linear" ? 1e-10 : 1e-4) << kind;
    EXPECT_EQ(read(r.report_file)["kind"], kind);
  }
}

TEST_F(Cli, GradcheckCatchesACorruptedGradient) {
  json j = toy();
  j["model"] = {{"kind", "gspen-sum"}, {"T", {{"hidden", {5}}}}};
  j["gradcheck"] = {{"instances", 1}, {"num_probes", 20}, {"analytic_scale", 1.05}};
  EXPECT_THROW(cmd_gradcheck(load_experiment(j, {}).front(), quiet()), ThresholdFailure);
}

TEST_F(Cli, OracleSweeps) {
  json j = toy();
  j["oracle"] = {{"instances", 20}, {"tolerance", 1e-5}};
  auto r = cmd_oracle(load_experiment(j, {}).front(), quiet());
  EXPECT_EQ(r.rows.size(), 20u);
  EXPECT_LE(r.max_marginal_gap, 1e-5);

  j["oracle"] = {{"instances", 20}, {"entropy", 0.0}};
  r = cmd_oracle(load_experiment(j, {}).front(), quiet());
  for (const auto& row : r.rows) EXPECT_EQ(row.objective_gap, 0.0) << row.instance;

  j["oracle"] = {{"instances", 5}, {"structure", "full_pairwise"}, {"max_variables", 3}, {"counting", "paper"}};
  r = cmd_oracle(load_experiment(j, {}).front(), quiet());
  EXPECT_EQ(r.rows.size(), 5u);
  std::ifstream csv(r.csv_file);
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "instance,num_variables,num_regions,marginal_gap,objective_gap");

  j["oracle"]["tolerance"] = 0.0;
  EXPECT_THROW(cmd_oracle(load_experiment(j, {}).front(), quiet()), ThresholdFailure);
}

TEST_F(Cli, ExitCodes) {
  const auto cfg = write("toy.json", toy());
  EXPECT_EQ(run_cli("oracle -c " + cfg.string() + " --set oracle.instances=5"), 0);
  EXPECT_EQ(run_cli("train -c " + cfg.string() + " --set train.bogus=1"), 2);
  EXPECT_EQ(run_cli("eval -c " + cfg.string() + " --checkpoint " + (dir_ / "none.json").string()), 2);
  EXPECT_EQ(run_cli("train -c " + cfg.string() +
                    " --set train.learning_rate=1e308 --set train.optimizer=sgd_momentum --set train.epochs=3"),
            3);
  EXPECT_EQ(run_cli("gradcheck -c " + std::string(GSPEN_SOURCE_DIR) + "/tests/fixtures/gradcheck_corrupt.json --set output_dir=" +
                    (dir_ / "g").string()),
            4);
  EXPECT_EQ(run_cli("gen-data -c " + cfg.string() + " --train-size 10"), 0);
  EXPECT_EQ(run_cli("gen-data -c " + cfg.string() + " --train-size 10"), 2);
  EXPECT_EQ(run_cli("gen-data -c " + cfg.string() + " --train-size 10 --force"), 0);
  EXPECT_EQ(load_jsonl((dir_ / "out" / "data" / "train.jsonl").string()).size(), 10u);
}

TEST_F(Cli, ShippedConfigsValidate) {
  for (const auto& entry : fs::directory_iterator(fs::path(GSPEN_SOURCE_DIR) / "configs")) {
    if (entry.path().extension() != ".json") continue;
    const auto doc = load_config_document(entry.path());
    std::vector<std::string> overrides;
    if (doc.contains("task") && doc["task"].value("type", "") == "files") {
      // External datasets are not shipped: point every split at an empty placeholder.
      const auto stub = dir_ / ("stub" + doc["task"]["files"].value("format", std::string("jsonl")));
      std::ofstream{stub};
      for (const char* split : {"train", "val", "test"})
        overrides.push_back(std::string("task.files.") + split + "=" + stub.string());
    }
    EXPECT_NO_THROW(load_experiment(doc, overrides)) << entry.path();
  }
}

}  // namespace
}  // namespace gspen
