#pragma once

// The command-line verbs as library functions. Each takes fully validated
// RunConfigs, writes only below the configured output directory, and returns
// what it wrote so callers (the CLI, the acceptance suite) can inspect it.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "gspen/energy.hpp"
#include "gspen/inference.hpp"
#include "gspen/inner_solver.hpp"
#include "gspen/learning.hpp"
#include "gspen/metrics.hpp"
#include "gspen/run_config.hpp"
#include "gspen/tasks.hpp"

namespace gspen {

/// A gradcheck or oracle sweep exceeded its configured tolerance.
class ThresholdFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CommandOptions {
  unsigned threads = std::max(1u, std::thread::hardware_concurrency());
  bool force = false;
  std::ostream* log = &std::cerr;  // progress lines; nullptr silences them
};

namespace command_detail {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw FormatError(path.string(), "cannot write file");
  f << std::setw(2) << j << "\n";
}

inline json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw FormatError(path.string(), "cannot open file");
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string(), e.what());
  }
}

inline void say(const CommandOptions& o, const std::string& line) {
  if (o.log) *o.log << line << std::endl;
}

inline json metrics_json(const Evaluation& ev) {
  json j = {{"hamming_accuracy", ev.hamming_accuracy},
            {"sequence_accuracy", ev.sequence_accuracy},
            {"macro_f1", ev.macro_f1}};
  if (ev.threshold) j["threshold"] = *ev.threshold;
  return j;
}

}  // namespace command_detail

// ---------------------------------------------------------------------------
// Task data

struct TaskData {
  RegionGraph graph;
  DatasetSplits splits;

  const std::vector<Example>& split(const std::string& name) const {
    if (name == "train") return splits.train;
    if (name == "val") return splits.val;
    if (name == "test") return splits.test;
    throw InvalidArgument("unknown split '" + name + "'");
  }
};

/// Builds the task graph and loads (or regenerates) its splits, checking
/// every example against the graph domains.
inline TaskData load_task(const RunConfig& rc) {
  const auto& t = rc.task;
  TaskData d;
  if (t.type == "synthetic") {
    d.splits = generate_synthetic_sequence_dataset(t.synthetic);
  } else {
    auto load = [&](const std::string& path) -> std::vector<Example> {
      if (path.empty()) return {};
      if (t.files.format == "jsonl") return load_jsonl(path);
      return load_arff_multilabel(path, t.files.num_labels, t.files.label_columns).examples;
    };
    d.splits = {load(t.files.train), load(t.files.val), load(t.files.test)};
  }
  GraphConfig gc = t.graph;
  if (gc.hub_most_frequent) gc.hub = most_frequent_label(d.splits.train, gc.num_variables);
  d.graph = gc.build();
  const std::size_t dim = d.splits.train.empty() ? 0 : d.splits.train.front().x.size();
  for (const auto& [name, data] : {std::pair{"train", &d.splits.train}, {"val", &d.splits.val}, {"test", &d.splits.test}})
    check_examples(*data, dim, d.graph.domains(), name);
  return d;
}

/// The model spec with feature_dim filled from the data when not configured.
inline ModelSpec resolved_model_spec(const RunConfig& rc, const TaskData& data) {
  ModelSpec s = rc.model.spec;
  if (rc.model.feature_dim_from_data && !data.splits.train.empty()) s.feature_dim = data.splits.train.front().x.size();
  return s;
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataResult {
  std::filesystem::path train, val, test, manifest;
};

inline GenDataResult cmd_gen_data(const RunConfig& rc, const CommandOptions& opt = {}) {
  namespace fs = std::filesystem;
  if (rc.task.type != "synthetic") throw ConfigError("task.type", "gen-data needs a synthetic task");
  const fs::path dir = rc.root_dir / "data";
  GenDataResult r{dir / "train.jsonl", dir / "val.jsonl", dir / "test.jsonl", dir / "manifest.json"};
  if (!opt.force)
    for (const auto& p : {r.train, r.val, r.test, r.manifest})
      if (fs::exists(p)) throw ConfigError("output_dir", p.string() + " exists (use --force to overwrite)");
  const auto splits = generate_synthetic_sequence_dataset(rc.task.synthetic);
  fs::create_directories(dir);
  save_jsonl(r.train.string(), splits.train);
  save_jsonl(r.val.string(), splits.val);
  save_jsonl(r.test.string(), splits.test);
  const auto& s = rc.task.synthetic;
  command_detail::write_json(r.manifest, nlohmann::json{{"seed", s.seed},
                                          {"noise", s.noise},
                                          {"num_variables", s.num_variables},
                                          {"num_labels", s.num_labels},
                                          {"feature_dim", s.feature_dim},
                                          {"vocabulary", s.vocabulary},
                                          {"sizes", {{"train", splits.train.size()},
                                                     {"val", splits.val.size()},
                                                     {"test", splits.test.size()}}},
                                          {"files", {{"train", "train.jsonl"}, {"val", "val.jsonl"}, {"test", "test.jsonl"}}}});
  command_detail::say(opt, "gen-data: wrote " + std::to_string(splits.train.size()) + "/" +
                               std::to_string(splits.val.size()) + "/" + std::to_string(splits.test.size()) +
                               " examples to " + dir.string());
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation with the configured threshold rule

/// Tuning picks the macro-F1 threshold on the validation split.
inline std::optional<double> resolve_threshold(const EnergyModel& model, const RunConfig& rc, const TaskData& data,
                                               const CommandOptions& opt) {
  switch (rc.eval.threshold) {
    case EvalConfig::Threshold::none: return std::nullopt;
    case EvalConfig::Threshold::fixed: return rc.eval.threshold_value;
    case EvalConfig::Threshold::tune: {
      if (data.splits.val.empty()) throw ConfigError("eval.threshold", "tuning needs a validation split");
      const auto beliefs = predict_beliefs(model, data.splits.val, rc.inference, opt.threads, rc.train.batch_size);
      Labelings truth;
      for (const auto& ex : data.splits.val) truth.push_back(ex.y);
      return tune_threshold(positive_probabilities(beliefs, model.graph()), truth).threshold;
    }
  }
  return std::nullopt;
}

inline Evaluation evaluate_split(const EnergyModel& model, const RunConfig& rc, const std::vector<Example>& data,
                                 std::optional<double> threshold, const CommandOptions& opt) {
  return evaluate(model, data, rc.inference, opt.threads, rc.train.batch_size, threshold);
}

// ---------------------------------------------------------------------------
// train

struct StageOutcome {
  std::string stage;
  std::filesystem::path checkpoint;
  TrainRecord record;
  Evaluation train_metrics, val_metrics;
};

inline EnergyModel load_checkpoint(const std::filesystem::path& path, const RegionGraph* expected = nullptr) {
  return checkpoint_from_json(command_detail::read_json(path), expected);
}

inline void save_checkpoint(const std::filesystem::path& path, const EnergyModel& m) {
  namespace fs = std::filesystem;
  fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw FormatError(path.string(), "cannot write file");
  f << std::setprecision(17) << checkpoint_to_json(m) << "\n";
}

/// Where a stage finds the model it starts from.
inline std::filesystem::path source_checkpoint_path(const RunConfig& rc) {
  if (!rc.model.source_checkpoint.empty()) return rc.model.source_checkpoint;
  return rc.root_dir / rc.model.source_stage / "checkpoint.json";
}

inline StageOutcome train_stage(const RunConfig& rc, const CommandOptions& opt) {
  namespace fs = std::filesystem;
  using command_detail::say;
  const TaskData data = load_task(rc);
  const ModelSpec spec = resolved_model_spec(rc, data);
  const StagePlan& plan = stage_plan(rc.model.stage);
  std::optional<EnergyModel> source;
  if (!rc.model.source_stage.empty()) {
    const fs::path src = source_checkpoint_path(rc);
    if (!fs::exists(src))
      throw ConfigError("model.source_stage", "stage '" + rc.model.stage + "' needs " + src.string() +
                                                   " (train the '" + rc.model.source_stage + "' stage first)");
    source = load_checkpoint(src);
  }
  EnergyModel model = build_stage_model(plan, spec, data.graph, source ? &*source : nullptr, rc.seed);

  fs::create_directories(rc.output_dir);
  command_detail::write_json(rc.output_dir / "config.resolved.json", rc.resolved);
  std::ofstream log(rc.output_dir / "train_log.jsonl");
  if (!log) throw FormatError((rc.output_dir / "train_log.jsonl").string(), "cannot write file");
  const std::string label = rc.stage_name.empty() ? "train" : rc.stage_name;
  TrainConfig tc = rc.train;
  tc.threads = opt.threads;
  auto sink = [&](const EpochRecord& r) {
    log << to_json(r).dump() << "\n" << std::flush;
    std::ostringstream line;
    line << label << ": epoch " << r.epoch << " hinge " << r.mean_hinge << " val " << r.validation_metric << " ("
         << std::fixed << std::setprecision(1) << r.seconds << "s)";
    say(opt, line.str());
  };
  TrainResult result = train(std::move(model), data.splits.train, data.splits.val, tc, sink);

  StageOutcome out{rc.stage_name, rc.checkpoint_path(), std::move(result.record), {}, {}};
  save_checkpoint(out.checkpoint, result.model);
  const auto threshold = resolve_threshold(result.model, rc, data, opt);
  out.train_metrics = evaluate_split(result.model, rc, data.splits.train, threshold, opt);
  if (!data.splits.val.empty()) out.val_metrics = evaluate_split(result.model, rc, data.splits.val, threshold, opt);
  nlohmann::json metrics = {{"stage", rc.stage_name},
                  {"preset", rc.model.stage},
                  {"best_epoch", out.record.best_epoch},
                  {"epochs_run", static_cast<int>(out.record.epochs.size()) - 1},
                  {"validation_metric", to_string(rc.train.validation_metric)},
                  {"train", command_detail::metrics_json(out.train_metrics)}};
  if (!data.splits.val.empty()) metrics["val"] = command_detail::metrics_json(out.val_metrics);
  command_detail::write_json(rc.output_dir / "metrics.json", metrics);
  say(opt, label + ": best epoch " + std::to_string(out.record.best_epoch) + ", checkpoint " + out.checkpoint.string());
  return out;
}

/// Runs every stage in order, or just `only` (whose source stage must
/// already have a checkpoint on disk).
inline std::vector<StageOutcome> cmd_train(const std::vector<RunConfig>& stages, const CommandOptions& opt = {},
                                           const std::string& only = "") {
  std::vector<StageOutcome> out;
  bool found = only.empty();
  for (const auto& rc : stages) {
    if (!only.empty() && rc.stage_name != only) continue;
    found = true;
    out.push_back(train_stage(rc, opt));
  }
  if (!found) throw ConfigError("--stage", "no stage named '" + only + "'");
  return out;
}

/// The stage a single-model verb (eval, infer) acts on: the named one, else the last.
inline const RunConfig& select_stage(const std::vector<RunConfig>& stages, const std::string& name) {
  if (name.empty()) return stages.back();
  for (const auto& rc : stages)
    if (rc.stage_name == name) return rc;
  throw ConfigError("--stage", "no stage named '" + name + "'");
}

// ---------------------------------------------------------------------------
// eval

struct EvalOutcome {
  std::string split;
  Evaluation metrics;
  std::filesystem::path metrics_file, predictions_file;
};

inline EvalOutcome cmd_eval(const RunConfig& rc, const CommandOptions& opt = {}, const std::string& split = "",
                            const std::filesystem::path& checkpoint = {}) {
  const TaskData data = load_task(rc);
  const auto ckpt = checkpoint.empty() ? rc.checkpoint_path() : checkpoint;
  if (!std::filesystem::exists(ckpt)) throw ConfigError("checkpoint", "not found: " + ckpt.string());
  const EnergyModel model = load_checkpoint(ckpt, &data.graph);
  if (!data.splits.train.empty() && model.spec().feature_dim != resolved_model_spec(rc, data).feature_dim &&
      model.spec().unary.mode != UnaryMode::none)
    throw ConfigError("checkpoint", "feature dimension " + std::to_string(model.spec().feature_dim) +
                                        " does not match the task's " +
                                        std::to_string(resolved_model_spec(rc, data).feature_dim));
  EvalOutcome out;
  out.split = split.empty() ? rc.eval.split : split;
  const auto& examples = data.split(out.split);
  if (examples.empty()) throw ConfigError("eval.split", "split '" + out.split + "' is empty");
  out.metrics = evaluate_split(model, rc, examples, resolve_threshold(model, rc, data, opt), opt);
  out.metrics_file = rc.output_dir / ("eval_" + out.split + ".json");
  auto j = command_detail::metrics_json(out.metrics);
  j["split"] = out.split;
  j["examples"] = examples.size();
  j["checkpoint"] = ckpt.string();
  command_detail::write_json(out.metrics_file, j);
  if (rc.eval.predictions_csv) {
    out.predictions_file = rc.output_dir / ("predictions_" + out.split + ".csv");
    std::ofstream f(out.predictions_file);
    f << "index,id,prediction,truth,correct\n";
    auto join = [](const std::vector<int>& y) {
      std::string s;
      for (std::size_t k = 0; k < y.size(); ++k) s += (k ? " " : "") + std::to_string(y[k]);
      return s;
    };
    for (std::size_t i = 0; i < examples.size(); ++i)
      f << i << "," << examples[i].id.value_or("") << "," << join(out.metrics.predictions[i]) << ","
        << join(examples[i].y) << "," << (out.metrics.predictions[i] == examples[i].y ? 1 : 0) << "\n";
  }
  command_detail::say(opt, "eval " + out.split + ": sequence " + std::to_string(out.metrics.sequence_accuracy) +
                               " hamming " + std::to_string(out.metrics.hamming_accuracy) + " macro-F1 " +
                               std::to_string(out.metrics.macro_f1));
  return out;
}

// ---------------------------------------------------------------------------
// infer

struct InferOutcome {
  std::filesystem::path predictions_file, trace_file;
  double max_violation = 0.0;
  std::size_t examples = 0;
};

/// Per-example inference with diagnostics. `trace_example` (when set) also
/// writes that example's objective trace as CSV.
inline InferOutcome cmd_infer(const RunConfig& rc, const CommandOptions& opt = {}, const std::string& split = "",
                              const std::filesystem::path& checkpoint = {},
                              std::optional<std::size_t> trace_example = {}) {
  const TaskData data = load_task(rc);
  const auto ckpt = checkpoint.empty() ? rc.checkpoint_path() : checkpoint;
  if (!std::filesystem::exists(ckpt)) throw ConfigError("checkpoint", "not found: " + ckpt.string());
  const EnergyModel model = load_checkpoint(ckpt, &data.graph);
  const std::string name = split.empty() ? rc.eval.split : split;
  const auto& examples = data.split(name);
  if (trace_example && *trace_example >= examples.size())
    throw ConfigError("--trace-example", "index out of range for split '" + name + "'");
  InferOutcome out;
  out.examples = examples.size();
  out.predictions_file = rc.output_dir / ("infer_" + name + ".jsonl");
  std::filesystem::create_directories(rc.output_dir);

  InferenceConfig cfg = rc.inference;
  std::vector<InferenceResult> results(examples.size());
  parallel_for(examples.size(), opt.threads, [&](std::size_t i) {
    InferenceConfig c = cfg;
    c.record_trace = cfg.record_trace || (trace_example && *trace_example == i);
    results[i] = infer(model.bind(examples[i].x), data.graph, c);
  });
  std::ofstream f(out.predictions_file);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& r = results[i];
    const double viol = check_local_polytope(r.beliefs, data.graph).max();
    out.max_violation = std::max(out.max_violation, viol);
    nlohmann::json line = {{"index", i},
                 {"labeling", decode(r.beliefs, data.graph)},
                 {"objective", command_detail::finite_or_null(r.objective)},
                 {"iterations", r.iterations_used},
                 {"termination", to_string(r.termination)},
                 {"violation", viol}};
    if (examples[i].id) line["id"] = *examples[i].id;
    f << line.dump() << "\n";
  }
  if (trace_example) {
    out.trace_file = rc.output_dir / ("trace_" + name + "_" + std::to_string(*trace_example) + ".csv");
    std::ofstream t(out.trace_file);
    write_trace_csv(t, results[*trace_example].trace);
  }
  command_detail::say(opt, "infer " + name + ": " + std::to_string(out.examples) + " examples, max violation " +
                               std::to_string(out.max_violation));
  return out;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckOutcome {
  double beliefs_max_error = 0.0, weights_max_error = 0.0;
  std::size_t belief_probes = 0, weight_probes = 0, rejected_probes = 0;
  bool passed = false;
  std::filesystem::path report_file;
};

/// Central-difference check of the configured energy at seeded random
/// weights and interior beliefs, on the first training inputs.
inline GradcheckOutcome cmd_gradcheck(const RunConfig& rc, const CommandOptions& opt = {}) {
  const TaskData data = load_task(rc);
  const ModelSpec spec = resolved_model_spec(rc, data);
  const auto& gc = rc.gradcheck;
  GradcheckOutcome out;
  nlohmann::json per_instance = nlohmann::json::array();
  for (std::size_t i = 0; i < gc.instances; ++i) {
    EnergyModel m(spec, data.graph, rc.seed + i);
    std::mt19937_64 rng(rc.seed * 7919 + i);
    std::uniform_real_distribution<double> w(-gc.weight_scale, gc.weight_scale);
    for (auto& v : m.weights()) v = w(rng);
    std::vector<double> x(spec.feature_dim, 0.0);
    if (!data.splits.train.empty()) x = data.splits.train[i % data.splits.train.size()].x;
    BeliefVector p(data.graph.flat_size());
    std::uniform_real_distribution<double> u(0.05, 1.0);
    for (std::size_t r = 0; r < data.graph.num_regions(); ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < data.graph.table_size(r); ++j) s += (p[data.graph.offset(r) + j] = u(rng));
      for (std::size_t j = 0; j < data.graph.table_size(r); ++j) p[data.graph.offset(r) + j] /= s;
    }
    GradCheckOptions o = gc.options;
    o.seed = rc.seed + 1000 * i;
    const auto rep = finite_difference_report(m, x, p, o);
    out.beliefs_max_error = std::max(out.beliefs_max_error, rep.beliefs_max_error);
    out.weights_max_error = std::max(out.weights_max_error, rep.weights_max_error);
    out.belief_probes += rep.belief_probes;
    out.weight_probes += rep.weight_probes;
    out.rejected_probes += rep.rejected_probes;
    per_instance.push_back({{"beliefs_max_error", rep.beliefs_max_error},
                            {"weights_max_error", rep.weights_max_error},
                            {"belief_probes", rep.belief_probes},
                            {"weight_probes", rep.weight_probes},
                            {"rejected_probes", rep.rejected_probes}});
  }
  out.passed = std::max(out.beliefs_max_error, out.weights_max_error) <= gc.tolerance;
  out.report_file = rc.output_dir / "gradcheck.json";
  command_detail::write_json(out.report_file, nlohmann::json{{"kind", to_string(spec.kind)},
                                               {"tolerance", gc.tolerance},
                                               {"beliefs_max_error", out.beliefs_max_error},
                                               {"weights_max_error", out.weights_max_error},
                                               {"belief_probes", out.belief_probes},
                                               {"weight_probes", out.weight_probes},
                                               {"rejected_probes", out.rejected_probes},
                                               {"passed", out.passed},
                                               {"instances", per_instance}});
  std::ostringstream line;
  line << "gradcheck " << to_string(spec.kind) << ": beliefs " << out.beliefs_max_error << ", weights "
       << out.weights_max_error << " (tolerance " << gc.tolerance << ")";
  command_detail::say(opt, line.str());
  if (!out.passed) throw ThresholdFailure(line.str());
  return out;
}

// ---------------------------------------------------------------------------
// oracle

struct OracleRow {
  std::size_t instance = 0;
  std::size_t num_variables = 0;
  std::size_t num_regions = 0;
  double marginal_gap = 0.0;   // max |solver − oracle| over the belief vector
  double objective_gap = 0.0;  // |objective(solver) − objective(oracle)|
};

struct OracleOutcome {
  std::vector<OracleRow> rows;
  double max_marginal_gap = 0.0;
  std::filesystem::path csv_file;
};

/// Seeded random instance for the agreement sweep.
inline RegionGraph random_oracle_graph(const OracleConfig& c, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> kdist(2, c.max_variables);
  std::uniform_int_distribution<int> ldist(2, c.max_labels);
  const std::size_t K = kdist(rng);
  std::vector<int> domains(K);
  for (auto& d : domains) d = ldist(rng);
  if (c.structure == "chain") return build_chain_graph(K, domains);
  if (c.structure == "full_pairwise") return build_full_pairwise_graph(K, domains);
  std::vector<std::vector<int>> regions;
  for (std::size_t k = 0; k < K; ++k) regions.push_back({static_cast<int>(k)});
  for (std::size_t k = 1; k < K; ++k) {
    std::uniform_int_distribution<std::size_t> parent(0, k - 1);
    regions.push_back({static_cast<int>(parent(rng)), static_cast<int>(k)});
  }
  return RegionGraph(domains, std::move(regions));
}

inline OracleOutcome cmd_oracle(const RunConfig& rc, const CommandOptions& opt = {}) {
  const auto& c = rc.oracle;
  std::mt19937_64 rng(rc.seed);
  std::uniform_real_distribution<double> score(-c.score_range, c.score_range);
  OracleOutcome out;
  InnerConfig inner = rc.inference.inner;
  inner.entropy = c.entropy;
  inner.counting = c.counting;
  for (std::size_t i = 0; i < c.instances; ++i) {
    const RegionGraph g = random_oracle_graph(c, rng);
    ScoreVector a(g.flat_size());
    for (auto& v : a.values) v = score(rng);
    const CountingNumbers counts = make_counting(g, c.counting);
    const BeliefVector ours = solve_inner(g, a, inner);
    const BeliefVector exact = brute_force_oracle(g, a, c.entropy, counts);
    auto objective = [&](const BeliefVector& p) { return dot(a, p) + c.entropy * fractional_entropy(p, g, counts); };
    OracleRow row{i, g.num_variables(), g.num_regions(), 0.0, std::abs(objective(ours) - objective(exact))};
    for (std::size_t j = 0; j < ours.size(); ++j) row.marginal_gap = std::max(row.marginal_gap, std::abs(ours[j] - exact[j]));
    out.max_marginal_gap = std::max(out.max_marginal_gap, row.marginal_gap);
    out.rows.push_back(row);
  }
  out.csv_file = rc.root_dir / "oracle_gaps.csv";
  std::filesystem::create_directories(rc.root_dir);
  std::ofstream f(out.csv_file);
  f << std::setprecision(17) << "instance,num_variables,num_regions,marginal_gap,objective_gap\n";
  for (const auto& r : out.rows)
    f << r.instance << "," << r.num_variables << "," << r.num_regions << "," << r.marginal_gap << "," << r.objective_gap
      << "\n";
  std::ostringstream line;
  line << "oracle " << c.structure << " (" << c.instances << " instances, eps " << c.entropy << ", "
       << to_string(c.counting) << " counting): max marginal gap " << out.max_marginal_gap;
  if (c.tolerance) line << " (tolerance " << *c.tolerance << ")";
  command_detail::say(opt, line.str());
  if (c.tolerance && out.max_marginal_gap > *c.tolerance) throw ThresholdFailure(line.str());
  return out;
}

}  // namespace gspen
