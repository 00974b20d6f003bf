// gspen: data generation, staged training, evaluation, inference, gradient
// checks and oracle sweeps, all driven by one JSON config.
//
// Exit codes: 0 success, 1 unexpected error, 2 config or input error,
// 3 numeric failure, 4 gradcheck/oracle tolerance exceeded.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gspen/commands.hpp"

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<unsigned> threads;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> train_size;
  bool force = false;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "experiment config (JSON)")->required();
  cmd->add_option("--set", c.overrides, "override a config field: key.path=value (repeatable)");
  cmd->add_option("--threads", c.threads, "worker threads (default: available cores)")->check(CLI::PositiveNumber);
  cmd->add_option("--seed", c.seed, "seed for data, initialization and shuffling");
  cmd->add_option("--train-size", c.train_size, "synthetic training split size");
  cmd->add_flag("--force", c.force, "overwrite existing generated files");
  cmd->add_flag("-q,--quiet", c.quiet, "no progress output");
}

std::vector<gspen::RunConfig> load(const Common& c) {
  std::vector<std::string> overrides;
  if (c.seed) overrides.push_back("seed=" + std::to_string(*c.seed));
  if (c.train_size) overrides.push_back("task.synthetic.train_size=" + std::to_string(*c.train_size));
  overrides.insert(overrides.end(), c.overrides.begin(), c.overrides.end());
  return gspen::load_experiment_file(c.config, overrides);
}

gspen::CommandOptions options(const Common& c) {
  gspen::CommandOptions o;
  if (c.threads) o.threads = *c.threads;
  o.force = c.force;
  if (c.quiet) o.log = nullptr;
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Structured prediction energy networks over region graphs"};
  app.require_subcommand(1);
  Common common;
  std::string stage, split, checkpoint;
  std::optional<std::size_t> trace_example;

  auto* gen = app.add_subcommand("gen-data", "write the synthetic splits and a manifest under output_dir/data");
  add_common(gen, common);

  auto* train = app.add_subcommand("train", "train every stage in order, or only --stage");
  add_common(train, common);
  train->add_option("--stage", stage, "train only this stage");

  auto* eval = app.add_subcommand("eval", "metrics for a trained checkpoint");
  add_common(eval, common);
  eval->add_option("--stage", stage, "stage to evaluate (default: the last)");
  eval->add_option("--split", split, "train, val or test (default: eval.split)");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file (default: the stage's own)");

  auto* inf = app.add_subcommand("infer", "per-example inference with diagnostics");
  add_common(inf, common);
  inf->add_option("--stage", stage, "stage whose model to use (default: the last)");
  inf->add_option("--split", split, "train, val or test (default: eval.split)");
  inf->add_option("--checkpoint", checkpoint, "checkpoint file (default: the stage's own)");
  inf->add_option("--trace-example", trace_example, "also write this example's objective trace as CSV");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of the configured energy");
  add_common(grad, common);
  grad->add_option("--stage", stage, "stage whose model block to check (default: the last)");

  auto* oracle = app.add_subcommand("oracle", "inner solver vs brute-force enumeration on random instances");
  add_common(oracle, common);

  CLI11_PARSE(app, argc, argv);

  try {
    const auto stages = load(common);
    const auto opt = options(common);
    if (gen->parsed()) {
      gspen::cmd_gen_data(stages.front(), opt);
    } else if (train->parsed()) {
      gspen::cmd_train(stages, opt, stage);
    } else if (eval->parsed()) {
      gspen::cmd_eval(gspen::select_stage(stages, stage), opt, split, checkpoint);
    } else if (inf->parsed()) {
      gspen::cmd_infer(gspen::select_stage(stages, stage), opt, split, checkpoint, trace_example);
    } else if (grad->parsed()) {
      gspen::cmd_gradcheck(gspen::select_stage(stages, stage), opt);
    } else if (oracle->parsed()) {
      gspen::cmd_oracle(stages.front(), opt);
    }
    return 0;
  } catch (const gspen::ThresholdFailure& e) {
    std::cerr << "gspen: tolerance exceeded: " << e.what() << "\n";
    return 4;
  } catch (const gspen::NumericFailure& e) {
    std::cerr << "gspen: numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const gspen::InvalidArgument& e) {
    std::cerr << "gspen: config error: " << e.what() << "\n";
    return 2;
  } catch (const gspen::FormatError& e) {
    std::cerr << "gspen: input error: " << e.what() << "\n";
    return 2;
  } catch (const gspen::UnsupportedStructure& e) {
    std::cerr << "gspen: config error: " << e.what() << "\n";
    return 2;
  } catch (const gspen::UnsupportedOperation& e) {
    std::cerr << "gspen: config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "gspen: error: " << e.what() << "\n";
    return 1;
  }
}
