#pragma once

// Experiment configuration. A run is one JSON document (with optional
// "include" files merged underneath it), dot-path overrides applied on top,
// and an optional "stages" list whose entries are diffs merged over the base
// blocks. Every field is checked before any compute, and errors name the
// offending field path.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gspen/energy.hpp"
#include "gspen/errors.hpp"
#include "gspen/inference.hpp"
#include "gspen/learning.hpp"
#include "gspen/region_graph.hpp"
#include "gspen/tasks.hpp"

namespace gspen {

class ConfigError : public InvalidArgument {
 public:
  ConfigError(const std::string& path, const std::string& what)
      : InvalidArgument(what.starts_with(path + ".") || what.starts_with(path + " ") ? what : path + ": " + what) {}
};

namespace config_detail {

using json = nlohmann::json;

/// Typed, strict view of one JSON object: every key must be read or it is
/// reported as unknown by finish().
class Fields {
 public:
  Fields(const json* j, std::string path) : j_(j), path_(std::move(path)) {
    if (j_ && !j_->is_object()) throw ConfigError(path_, "expected an object");
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  const std::string& path() const { return path_; }

  const json* raw(const std::string& key) {
    seen_.insert(key);
    if (!j_ || !j_->contains(key)) return nullptr;
    return &(*j_)[key];
  }
  bool has(const std::string& key) const { return j_ && j_->contains(key); }
  Fields sub(const std::string& key) { return Fields(raw(key), at(key)); }

  double number(const std::string& key, double def) {
    const json* v = raw(key);
    if (!v) return def;
    if (!v->is_number()) throw ConfigError(at(key), "expected a number");
    return v->get<double>();
  }
  long long integer(const std::string& key, long long def) {
    const json* v = raw(key);
    if (!v) return def;
    if (!v->is_number_integer()) throw ConfigError(at(key), "expected an integer");
    return v->get<long long>();
  }
  std::size_t count(const std::string& key, std::size_t def) {
    const long long n = integer(key, static_cast<long long>(def));
    if (n < 0) throw ConfigError(at(key), "must be >= 0");
    return static_cast<std::size_t>(n);
  }
  bool boolean(const std::string& key, bool def) {
    const json* v = raw(key);
    if (!v) return def;
    if (!v->is_boolean()) throw ConfigError(at(key), "expected true or false");
    return v->get<bool>();
  }
  std::string string(const std::string& key, const std::string& def) {
    const json* v = raw(key);
    if (!v) return def;
    if (!v->is_string()) throw ConfigError(at(key), "expected a string");
    return v->get<std::string>();
  }
  std::vector<std::string> strings(const std::string& key) {
    const json* v = raw(key);
    if (!v) return {};
    if (!v->is_array()) throw ConfigError(at(key), "expected an array of strings");
    std::vector<std::string> out;
    for (const auto& e : *v) {
      if (!e.is_string()) throw ConfigError(at(key), "expected an array of strings");
      out.push_back(e.get<std::string>());
    }
    return out;
  }
  std::vector<long long> integers(const std::string& key) {
    const json* v = raw(key);
    if (!v) return {};
    if (!v->is_array()) throw ConfigError(at(key), "expected an array of integers");
    std::vector<long long> out;
    for (const auto& e : *v) {
      if (!e.is_number_integer()) throw ConfigError(at(key), "expected an array of integers");
      out.push_back(e.get<long long>());
    }
    return out;
  }

  /// Runs a parser on a string field, rewrapping its error with the field path.
  template <class F>
  auto choice(const std::string& key, const std::string& def, F parse) {
    const std::string s = string(key, def);
    try {
      return parse(s);
    } catch (const InvalidArgument& e) {
      throw ConfigError(at(key), e.what());
    }
  }

  void finish() const {
    if (!j_) return;
    for (const auto& [k, v] : j_->items())
      if (!seen_.contains(k)) throw ConfigError(at(k), "unknown field");
  }

 private:
  const json* j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class F>
void rewrap(const std::string& path, F&& check) {
  try {
    check();
  } catch (const ConfigError&) {
    throw;
  } catch (const InvalidArgument& e) {
    throw ConfigError(path, e.what());
  }
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError(path.string(), "cannot open config file");
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string(), e.what());
  }
}

inline json load_with_includes(const std::filesystem::path& path, std::vector<std::filesystem::path>& chain) {
  const auto canon = std::filesystem::weakly_canonical(path);
  for (const auto& p : chain)
    if (p == canon) throw ConfigError(path.string(), "include cycle");
  chain.push_back(canon);
  json doc = read_json_file(path);
  if (!doc.is_object()) throw ConfigError(path.string(), "top level must be an object");
  json merged = json::object();
  if (doc.contains("include")) {
    std::vector<std::string> includes;
    const auto& inc = doc["include"];
    if (inc.is_string()) includes.push_back(inc.get<std::string>());
    else if (inc.is_array() && std::all_of(inc.begin(), inc.end(), [](const json& e) { return e.is_string(); }))
      includes = inc.get<std::vector<std::string>>();
    else throw ConfigError(path.string() + ": include", "expected a path or a list of paths");
    for (const auto& rel : includes) merged.merge_patch(load_with_includes(path.parent_path() / rel, chain));
    doc.erase("include");
  }
  merged.merge_patch(doc);
  chain.pop_back();
  return merged;
}

}  // namespace config_detail

/// Reads a config file and merges its includes (resolved relative to the
/// including file; later entries and the file itself win).
inline nlohmann::json load_config_document(const std::filesystem::path& path) {
  std::vector<std::filesystem::path> chain;
  return config_detail::load_with_includes(path, chain);
}

/// Applies "a.b.c=value". The value is parsed as JSON when possible and taken
/// as a plain string otherwise; intermediate objects are created as needed.
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set " + assignment, "expected key.path=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json* node = &doc;
  std::stringstream parts(key);
  std::string part, walked;
  std::vector<std::string> path;
  while (std::getline(parts, part, '.')) {
    if (part.empty()) throw ConfigError("--set " + assignment, "empty path component");
    path.push_back(part);
  }
  for (std::size_t i = 0; i + 1 < path.size(); ++i) {
    walked += (walked.empty() ? "" : ".") + path[i];
    if (!node->contains(path[i])) (*node)[path[i]] = nlohmann::json::object();
    node = &(*node)[path[i]];
    if (!node->is_object()) throw ConfigError(walked, "--set cannot descend into a non-object");
  }
  (*node)[path.back()] = std::move(value);
}

// ---------------------------------------------------------------------------
// Blocks

struct GraphConfig {
  std::string builder = "chain";  // unary | chain | star | full_pairwise
  std::size_t num_variables = 0;
  std::vector<int> domains;
  std::size_t hub = 0;
  bool hub_most_frequent = false;  // star: hub chosen from training labels at load time

  RegionGraph build() const {
    if (builder == "unary") return build_unary_graph(num_variables, domains);
    if (builder == "chain") return build_chain_graph(num_variables, domains);
    if (builder == "star") return build_star_graph(num_variables, hub, domains);
    if (builder == "full_pairwise") return build_full_pairwise_graph(num_variables, domains);
    throw InvalidArgument("unknown graph builder '" + builder + "'");
  }
};

struct DataFiles {
  std::string format = "jsonl";  // jsonl | arff
  std::string train, val, test;
  std::size_t num_labels = 0;  // arff: trailing label attributes
  std::vector<std::size_t> label_columns;
};

struct TaskConfig {
  std::string type = "synthetic";  // synthetic | files
  SyntheticSpec synthetic;
  DataFiles files;
  GraphConfig graph;
};

struct ModelConfig {
  ModelSpec spec;
  bool feature_dim_from_data = true;
  std::string stage = "custom";
  std::string source_stage;       // defaults to the preset's source
  std::string source_checkpoint;  // overrides the source stage's checkpoint path
};

struct EvalConfig {
  enum class Threshold { none, fixed, tune };
  std::string split = "test";
  Threshold threshold = Threshold::none;
  double threshold_value = 0.5;
  bool predictions_csv = false;
};

struct GradcheckConfig {
  std::size_t instances = 5;
  double tolerance = 1e-3;
  double weight_scale = 0.5;
  GradCheckOptions options{.num_probes = 200};
};

struct OracleConfig {
  std::size_t instances = 50;
  std::string structure = "tree";  // tree | chain | full_pairwise
  std::size_t max_variables = 5;
  int max_labels = 4;
  double entropy = 1.0;
  CountingPreset counting = CountingPreset::bethe;
  double score_range = 2.0;
  std::optional<double> tolerance;  // unset: report only
};

struct RunConfig {
  std::string stage_name;               // empty for a single-stage run
  std::filesystem::path root_dir;       // configured output_dir
  std::filesystem::path output_dir;     // root_dir, or root_dir/stage_name
  std::uint64_t seed = 0;
  TaskConfig task;
  ModelConfig model;
  InferenceConfig inference;
  TrainConfig train;
  EvalConfig eval;
  GradcheckConfig gradcheck;
  OracleConfig oracle;
  nlohmann::json resolved;  // effective document after merges and overrides

  std::filesystem::path checkpoint_path() const { return output_dir / "checkpoint.json"; }
};

inline CountingPreset parse_counting(const std::string& s) {
  if (s == "paper") return CountingPreset::paper;
  if (s == "bethe") return CountingPreset::bethe;
  throw InvalidArgument("unknown counting preset '" + s + "' (expected paper or bethe)");
}

inline std::string to_string(CountingPreset c) { return c == CountingPreset::bethe ? "bethe" : "paper"; }

namespace config_detail {

inline MlpSpec read_mlp(Fields& f) {
  MlpSpec s;
  for (long long h : f.integers("hidden")) {
    if (h < 1) throw ConfigError(f.at("hidden"), "layer widths must be >= 1");
    s.hidden.push_back(static_cast<std::size_t>(h));
  }
  for (const auto& a : f.strings("activations")) {
    try {
      s.activations.push_back(parse_activation(a));
    } catch (const InvalidArgument& e) {
      throw ConfigError(f.at("activations"), e.what());
    }
  }
  return s;
}

inline void read_task(Fields f, TaskConfig& t, std::uint64_t seed) {
  t.type = f.string("type", "synthetic");
  if (t.type != "synthetic" && t.type != "files") throw ConfigError(f.at("type"), "expected synthetic or files");

  Fields syn = f.sub("synthetic");
  t.synthetic = SyntheticSpec::words();
  if (const auto* v = syn.raw("vocabulary")) {
    if (v->is_string()) {
      if (v->get<std::string>() != "words") throw ConfigError(syn.at("vocabulary"), "expected \"words\" or a list");
    } else if (v->is_array()) {
      t.synthetic.vocabulary.clear();
      try {
        for (const auto& w : *v) {
          if (w.is_string()) t.synthetic.vocabulary.push_back(word_labels(w.get<std::string>()));
          else if (w.is_array()) t.synthetic.vocabulary.push_back(w.get<std::vector<int>>());
          else throw InvalidArgument("entries must be words or label lists");
        }
      } catch (const nlohmann::json::exception&) {
        throw ConfigError(syn.at("vocabulary"), "label lists must hold integers");
      } catch (const InvalidArgument& e) {
        throw ConfigError(syn.at("vocabulary"), e.what());
      }
    } else {
      throw ConfigError(syn.at("vocabulary"), "expected \"words\" or a list");
    }
  }
  t.synthetic.num_variables = syn.count("num_variables", t.synthetic.num_variables);
  t.synthetic.num_labels = static_cast<int>(syn.count("num_labels", static_cast<std::size_t>(t.synthetic.num_labels)));
  t.synthetic.feature_dim = syn.count("feature_dim", t.synthetic.feature_dim);
  t.synthetic.noise = syn.number("noise", t.synthetic.noise);
  t.synthetic.train_size = syn.count("train_size", t.synthetic.train_size);
  t.synthetic.val_size = syn.count("val_size", t.synthetic.val_size);
  t.synthetic.test_size = syn.count("test_size", t.synthetic.test_size);
  t.synthetic.seed = seed;
  syn.finish();
  if (t.type == "synthetic") rewrap(syn.path(), [&] { t.synthetic.validate(); });

  Fields files = f.sub("files");
  t.files.format = files.string("format", "jsonl");
  if (t.files.format != "jsonl" && t.files.format != "arff")
    throw ConfigError(files.at("format"), "expected jsonl or arff");
  t.files.train = files.string("train", "");
  t.files.val = files.string("val", "");
  t.files.test = files.string("test", "");
  t.files.num_labels = files.count("num_labels", 0);
  for (long long c : files.integers("label_columns")) {
    if (c < 0) throw ConfigError(files.at("label_columns"), "column indices must be >= 0");
    t.files.label_columns.push_back(static_cast<std::size_t>(c));
  }
  files.finish();
  if (t.type == "files") {
    if (t.files.train.empty()) throw ConfigError(files.at("train"), "required for file-based tasks");
    if (t.files.format == "arff" && t.files.num_labels == 0 && t.files.label_columns.empty())
      throw ConfigError(files.at("num_labels"), "required for ARFF input");
    for (const auto& [key, path] : {std::pair{"train", t.files.train}, {"val", t.files.val}, {"test", t.files.test}})
      if (!path.empty() && !std::filesystem::exists(path)) throw ConfigError(files.at(key), "file not found: " + path);
  }

  Fields g = f.sub("graph");
  t.graph.builder = g.string("builder", "chain");
  if (t.type == "synthetic") {
    t.graph.num_variables = t.synthetic.num_variables;
    t.graph.domains.assign(t.graph.num_variables, t.synthetic.num_labels);
  } else if (t.files.format == "arff") {
    t.graph.num_variables = t.files.label_columns.empty() ? t.files.num_labels : t.files.label_columns.size();
    t.graph.domains.assign(t.graph.num_variables, 2);
  }
  t.graph.num_variables = g.count("num_variables", t.graph.num_variables);
  if (g.has("labels_per_variable")) {
    const std::size_t L = g.count("labels_per_variable", 0);
    t.graph.domains.assign(t.graph.num_variables, static_cast<int>(L));
  }
  if (g.has("domains")) {
    t.graph.domains.clear();
    for (long long d : g.integers("domains")) t.graph.domains.push_back(static_cast<int>(d));
  }
  if (const json* h = g.raw("hub"); h && h->is_string()) {
    if (*h != "most_frequent") throw ConfigError(g.at("hub"), "expected a variable index or \"most_frequent\"");
    t.graph.hub_most_frequent = true;
  } else {
    t.graph.hub = g.count("hub", 0);
  }
  g.finish();
  if (t.graph.num_variables == 0) throw ConfigError(g.at("num_variables"), "required (no default for this task)");
  if (t.graph.domains.size() != t.graph.num_variables)
    throw ConfigError(g.path(), "need labels_per_variable or one domain size per variable");
  rewrap(g.path(), [&] { (void)t.graph.build(); });
}

inline void read_model(Fields f, ModelConfig& m) {
  ModelSpec& s = m.spec;
  s.kind = f.choice("kind", "linear", parse_energy_kind);
  m.feature_dim_from_data = !f.has("feature_dim");
  s.feature_dim = f.count("feature_dim", 0);
  m.stage = f.string("stage", "custom");
  rewrap(f.at("stage"), [&] { (void)stage_plan(m.stage); });
  m.source_stage = f.string("source_stage", stage_plan(m.stage).source_stage);
  m.source_checkpoint = f.string("source_checkpoint", "");
  if (!m.source_checkpoint.empty() && !std::filesystem::exists(m.source_checkpoint))
    throw ConfigError(f.at("source_checkpoint"), "file not found: " + m.source_checkpoint);

  Fields u = f.sub("unary");
  s.unary.mode = u.choice("mode", "per-variable", [](const std::string& v) {
    if (v == "none") return UnaryMode::none;
    if (v == "per-variable") return UnaryMode::per_variable;
    if (v == "global") return UnaryMode::global;
    throw InvalidArgument("expected none, per-variable or global");
  });
  s.unary.net = read_mlp(u);
  s.unary.zero_label_fixed = u.boolean("zero_label_fixed", false);
  u.finish();

  Fields p = f.sub("pairwise");
  s.pairwise.mode = p.choice("mode", "table", [](const std::string& v) {
    if (v == "none") return PairwiseMode::none;
    if (v == "table") return PairwiseMode::table;
    if (v == "conditioned") return PairwiseMode::conditioned;
    throw InvalidArgument("expected none, table or conditioned");
  });
  s.pairwise.net = read_mlp(p);
  p.finish();

  Fields t = f.sub("T");
  s.t.net = read_mlp(t);
  s.t.include_potentials = t.boolean("include_potentials", true);
  s.t.beliefs = t.choice("beliefs", "all", [](const std::string& v) {
    if (v == "all") return TBeliefs::all;
    if (v == "unary") return TBeliefs::unary;
    throw InvalidArgument("expected all or unary");
  });
  t.finish();
  f.finish();
}

inline void read_inference(Fields f, InferenceConfig& c) {
  c.algorithm = f.choice("algorithm", "frank_wolfe", parse_algorithm);
  c.max_iters = static_cast<int>(f.integer("max_iters", c.max_iters));
  c.objective_entropy = f.number("objective_entropy", c.objective_entropy);
  c.convergence_epsilon = f.number("convergence_epsilon", c.convergence_epsilon);
  c.step_scale = f.number("step_scale", c.step_scale);
  c.record_trace = f.boolean("record_trace", false);
  Fields in = f.sub("inner");
  c.inner.counting = in.choice("counting", "paper", parse_counting);
  c.inner.max_passes = static_cast<int>(in.integer("max_passes", c.inner.max_passes));
  c.inner.objective_tolerance = in.number("objective_tolerance", c.inner.objective_tolerance);
  c.inner.damping = in.number("damping", c.inner.damping);
  in.finish();
  f.finish();
  rewrap(f.path(), [&] { c.validate(); });
}

inline void read_train(Fields f, TrainConfig& c) {
  c.optimizer.kind = f.choice("optimizer", "adam", parse_optimizer);
  c.optimizer.learning_rate = f.number("learning_rate", c.optimizer.learning_rate);
  c.optimizer.momentum = f.number("momentum", c.optimizer.momentum);
  c.optimizer.beta1 = f.number("beta1", c.optimizer.beta1);
  c.optimizer.beta2 = f.number("beta2", c.optimizer.beta2);
  c.optimizer.epsilon = f.number("adam_epsilon", c.optimizer.epsilon);
  c.batch_size = f.count("batch_size", c.batch_size);
  c.epochs = static_cast<int>(f.integer("epochs", c.epochs));
  c.gradient_clip_norm = f.number("gradient_clip_norm", c.gradient_clip_norm);
  c.patience = static_cast<int>(f.integer("patience", c.patience));
  const auto frozen = f.strings("frozen");
  c.frozen = {frozen.begin(), frozen.end()};
  c.validation_metric = f.choice("validation_metric", "sequence_accuracy", parse_metric);
  f.finish();
  rewrap(f.path(), [&] { c.validate(); });
}

inline void read_eval(Fields f, EvalConfig& e) {
  e.split = f.string("split", "test");
  if (e.split != "train" && e.split != "val" && e.split != "test")
    throw ConfigError(f.at("split"), "expected train, val or test");
  if (const auto* v = f.raw("threshold")) {
    if (v->is_number()) {
      e.threshold = EvalConfig::Threshold::fixed;
      e.threshold_value = v->get<double>();
      if (!(e.threshold_value > 0.0 && e.threshold_value < 1.0))
        throw ConfigError(f.at("threshold"), "must lie in (0, 1)");
    } else if (v->is_string() && v->get<std::string>() == "tune") {
      e.threshold = EvalConfig::Threshold::tune;
    } else if (v->is_string() && v->get<std::string>() == "none") {
      e.threshold = EvalConfig::Threshold::none;
    } else {
      throw ConfigError(f.at("threshold"), "expected \"none\", \"tune\" or a number");
    }
  }
  e.predictions_csv = f.boolean("predictions_csv", false);
  f.finish();
}

inline void read_gradcheck(Fields f, GradcheckConfig& c) {
  c.instances = f.count("instances", c.instances);
  c.tolerance = f.number("tolerance", c.tolerance);
  c.weight_scale = f.number("weight_scale", c.weight_scale);
  c.options.num_probes = f.count("num_probes", c.options.num_probes);
  c.options.step = f.number("step", c.options.step);
  c.options.kink_margin = f.number("kink_margin", c.options.kink_margin);
  c.options.analytic_scale = f.number("analytic_scale", c.options.analytic_scale);
  f.finish();
  if (c.instances < 1) throw ConfigError(f.at("instances"), "must be >= 1");
  if (!(c.tolerance > 0.0)) throw ConfigError(f.at("tolerance"), "must be > 0");
  if (!(c.options.step > 0.0)) throw ConfigError(f.at("step"), "must be > 0");
  if (!(c.weight_scale >= 0.0)) throw ConfigError(f.at("weight_scale"), "must be >= 0");
}

inline void read_oracle(Fields f, OracleConfig& c) {
  c.instances = f.count("instances", c.instances);
  c.structure = f.string("structure", c.structure);
  if (c.structure != "tree" && c.structure != "chain" && c.structure != "full_pairwise")
    throw ConfigError(f.at("structure"), "expected tree, chain or full_pairwise");
  c.max_variables = f.count("max_variables", c.max_variables);
  c.max_labels = static_cast<int>(f.count("max_labels", static_cast<std::size_t>(c.max_labels)));
  c.entropy = f.number("entropy", c.entropy);
  c.counting = f.choice("counting", "bethe", parse_counting);
  c.score_range = f.number("score_range", c.score_range);
  if (const auto* v = f.raw("tolerance")) {
    if (!v->is_number() || !(v->get<double>() >= 0.0)) throw ConfigError(f.at("tolerance"), "expected a number >= 0");
    c.tolerance = v->get<double>();
  }
  f.finish();
  if (c.max_variables < 2) throw ConfigError(f.at("max_variables"), "must be >= 2");
  if (c.max_labels < 2) throw ConfigError(f.at("max_labels"), "must be >= 2");
  if (!(c.entropy >= 0.0)) throw ConfigError(f.at("entropy"), "must be >= 0");
  if (!(c.score_range >= 0.0)) throw ConfigError(f.at("score_range"), "must be >= 0");
}

}  // namespace config_detail

/// Parses one effective (stage-merged) document.
inline RunConfig parse_run_config(const nlohmann::json& doc, const std::string& stage_name = "") {
  using config_detail::Fields;
  RunConfig rc;
  rc.resolved = doc;
  rc.stage_name = stage_name;
  Fields top(&doc, "");
  const std::string out = top.string("output_dir", "");
  if (out.empty()) throw ConfigError("output_dir", "required");
  rc.root_dir = out;
  rc.output_dir = stage_name.empty() ? rc.root_dir : rc.root_dir / stage_name;
  const long long seed = top.integer("seed", 0);
  if (seed < 0) throw ConfigError("seed", "must be >= 0");
  rc.seed = static_cast<std::uint64_t>(seed);
  top.raw("description");
  config_detail::read_task(top.sub("task"), rc.task, rc.seed);
  config_detail::read_model(top.sub("model"), rc.model);
  config_detail::read_inference(top.sub("inference"), rc.inference);
  config_detail::read_train(top.sub("train"), rc.train);
  rc.train.inference = rc.inference;
  rc.train.seed = rc.seed;
  config_detail::read_eval(top.sub("eval"), rc.eval);
  config_detail::read_gradcheck(top.sub("gradcheck"), rc.gradcheck);
  config_detail::read_oracle(top.sub("oracle"), rc.oracle);
  top.finish();
  return rc;
}

/// All stages of a config (one unnamed stage when there is no "stages" list),
/// each validated in full. Overrides apply to every stage's effective document.
inline std::vector<RunConfig> load_experiment(const nlohmann::json& document, const std::vector<std::string>& overrides) {
  nlohmann::json base = document;
  nlohmann::json stages = nlohmann::json::array();
  if (base.contains("stages")) {
    stages = base["stages"];
    base.erase("stages");
    if (!stages.is_array() || stages.empty()) throw ConfigError("stages", "expected a non-empty array");
  }
  auto effective = [&](nlohmann::json doc) {
    for (const auto& o : overrides) apply_override(doc, o);
    return doc;
  };
  std::vector<RunConfig> out;
  if (stages.empty()) {
    out.push_back(parse_run_config(effective(base)));
    return out;
  }
  std::set<std::string> seen;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const std::string where = "stages[" + std::to_string(i) + "]";
    const auto& st = stages[i];
    if (!st.is_object() || !st.contains("name") || !st["name"].is_string())
      throw ConfigError(where, "each stage needs a string \"name\"");
    const std::string name = st["name"].get<std::string>();
    if (name.empty() || name.find_first_not_of("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_-") !=
                            std::string::npos)
      throw ConfigError(where + ".name", "use letters, digits, '-' or '_'");
    if (!seen.insert(name).second) throw ConfigError(where + ".name", "duplicate stage '" + name + "'");
    nlohmann::json diff = st;
    diff.erase("name");
    nlohmann::json doc = base;
    doc.merge_patch(diff);
    RunConfig rc;
    try {
      rc = parse_run_config(effective(doc), name);
    } catch (const ConfigError& e) {
      throw ConfigError(where + " (" + name + ")", e.what());
    }
    if (!rc.model.source_stage.empty() && rc.model.source_checkpoint.empty() && !seen.contains(rc.model.source_stage))
      throw ConfigError(where + ".model.source_stage",
                        "stage '" + name + "' starts from '" + rc.model.source_stage + "', which is not an earlier stage");
    out.push_back(std::move(rc));
  }
  return out;
}

inline std::vector<RunConfig> load_experiment_file(const std::filesystem::path& path,
                                              const std::vector<std::string>& overrides = {}) {
  return load_experiment(load_config_document(path), overrides);
}

}  // namespace gspen
