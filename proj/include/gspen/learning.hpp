#pragma once

// Structured-hinge (SSVM) training. Loss-augmented predictions are held
// fixed when differentiating, so the subgradient is ∇_w F(p̂) − ∇_w F(p^i).

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gspen/energy.hpp"
#include "gspen/errors.hpp"
#include "gspen/inference.hpp"
#include "gspen/metrics.hpp"
#include "gspen/parallel.hpp"

namespace gspen {

enum class OptimizerKind { sgd_momentum, adam };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd_momentum"; }
inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd_momentum") return OptimizerKind::sgd_momentum;
  throw InvalidArgument("unknown optimizer '" + s + "'");
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-4;
  double momentum = 0.9;
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;

  void validate() const {
    if (!(learning_rate >= 0.0)) throw InvalidArgument("train.learning_rate must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("train.momentum must be in [0, 1)");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
      throw InvalidArgument("train.beta1 and train.beta2 must be in [0, 1)");
    if (!(epsilon > 0.0)) throw InvalidArgument("train.adam_epsilon must be > 0");
  }
};

/// Minimizes: w ← w − lr · update(g). Entries with mask 0 never move.
class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, std::size_t n) : cfg_(cfg), m_(n, 0.0), v_(cfg.kind == OptimizerKind::adam ? n : 0, 0.0) {
    cfg_.validate();
  }

  void step(std::span<double> w, std::span<const double> grad, const std::vector<char>& mask) {
    if (w.size() != m_.size() || grad.size() != m_.size() || mask.size() != m_.size())
      throw InvalidArgument("optimizer: shape mismatch");
    ++t_;
    const double lr = cfg_.learning_rate;
    if (cfg_.kind == OptimizerKind::sgd_momentum) {
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (!mask[i]) continue;
        m_[i] = cfg_.momentum * m_[i] + grad[i];
        w[i] -= lr * m_[i];
      }
      return;
    }
    const double c1 = 1.0 - std::pow(cfg_.beta1, t_), c2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (!mask[i]) continue;
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
      w[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg_.epsilon);
    }
  }

  int steps() const { return t_; }

 private:
  OptimizerConfig cfg_;
  std::vector<double> m_, v_;
  int t_ = 0;
};

/// Rescales g to norm ≤ max_norm (no-op when max_norm ≤ 0). Returns the pre-clip norm.
inline double clip_gradient(std::span<double> g, double max_norm) {
  double s = 0.0;
  for (double v : g) s += v * v;
  const double norm = std::sqrt(s);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (double& v : g) v *= f;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Hinge loss

struct ExampleLoss {
  double hinge = 0.0;
  std::vector<double> gradient;
  BeliefVector prediction;  // loss-augmented inference result
};

/// Σ-form hinge for fixed p̂ and ground truth: F(p̂) + L(p̂) − F(p^i), clamped at 0.
inline double hinge_value(const BoundEnergy& e, const BeliefVector& pred, const BeliefVector& truth,
                          const ScoreVector& loss) {
  return std::max(0.0, e.value(pred) + dot(loss, pred) - e.value(truth));
}

inline ExampleLoss ssvm_example_loss(const EnergyModel& model, const Example& ex, const InferenceConfig& cfg) {
  const auto& g = model.graph();
  const BoundEnergy e = model.bind(ex.x);
  const ScoreVector loss = loss_augment(g, ex.y);
  const BeliefVector truth = one_hot_beliefs(g, ex.y);
  LossAugmented aug(e, loss);
  ExampleLoss out;
  out.prediction = infer(aug, g, cfg).beliefs;
  out.hinge = hinge_value(e, out.prediction, truth, loss);
  out.gradient.assign(model.num_weights(), 0.0);
  if (out.hinge > 0.0) {
    e.accumulate_grad_weights(out.prediction, 1.0, out.gradient);
    e.accumulate_grad_weights(truth, -1.0, out.gradient);
  }
  return out;
}

struct BatchLoss {
  double mean_hinge = 0.0;
  std::vector<double> hinges;
  std::vector<double> gradient;  // mean over the batch
};

/// Examples per gradient partial sum; fixed so reductions do not depend on the thread count.
inline constexpr std::size_t kReductionChunk = 8;

/// Lockstep loss-augmented inference over the batch, then the mean subgradient
/// reduced over fixed chunks in pairwise-tree order.
inline BatchLoss ssvm_batch_loss(const EnergyModel& model, const std::vector<const Example*>& batch,
                                 const InferenceConfig& cfg, unsigned threads = 1) {
  const auto& g = model.graph();
  const std::size_t B = batch.size();
  if (B == 0) throw InvalidArgument("empty mini-batch");
  std::vector<std::optional<BoundEnergy>> bound(B);
  std::vector<ScoreVector> losses(B);
  std::vector<std::optional<LossAugmented<BoundEnergy>>> aug(B);
  parallel_for(B, threads, [&](std::size_t i) {
    bound[i].emplace(model.bind(batch[i]->x));
    losses[i] = loss_augment(g, batch[i]->y);
    aug[i].emplace(*bound[i], losses[i]);
  });
  std::vector<const LossAugmented<BoundEnergy>*> items(B);
  for (std::size_t i = 0; i < B; ++i) items[i] = &*aug[i];
  const auto results = infer_batch(items, g, cfg, threads);

  BatchLoss out;
  out.hinges.resize(B);
  const std::size_t chunks = (B + kReductionChunk - 1) / kReductionChunk;
  std::vector<std::vector<double>> partial(chunks, std::vector<double>(model.num_weights(), 0.0));
  const double scale = 1.0 / static_cast<double>(B);
  parallel_for(chunks, threads, [&](std::size_t c) {
    for (std::size_t i = c * kReductionChunk; i < std::min(B, (c + 1) * kReductionChunk); ++i) {
      const BeliefVector truth = one_hot_beliefs(g, batch[i]->y);
      const auto& pred = results[i].beliefs;
      out.hinges[i] = hinge_value(*bound[i], pred, truth, losses[i]);
      if (out.hinges[i] > 0.0) {
        bound[i]->accumulate_grad_weights(pred, scale, partial[c]);
        bound[i]->accumulate_grad_weights(truth, -scale, partial[c]);
      }
    }
  });
  for (std::size_t stride = 1; stride < chunks; stride *= 2)
    for (std::size_t c = 0; c + stride < chunks; c += 2 * stride)
      for (std::size_t j = 0; j < partial[c].size(); ++j) partial[c][j] += partial[c + stride][j];
  out.gradient = std::move(partial[0]);
  double s = 0.0;
  for (double h : out.hinges) s += h;
  out.mean_hinge = s / static_cast<double>(B);
  return out;
}

// ---------------------------------------------------------------------------
// Prediction and evaluation

/// Inference without loss augmentation, lockstep in groups of `batch_size`.
inline std::vector<BeliefVector> predict_beliefs(const EnergyModel& model, const std::vector<Example>& data,
                                                 const InferenceConfig& cfg, unsigned threads = 1,
                                                 std::size_t batch_size = 128) {
  std::vector<BeliefVector> out;
  out.reserve(data.size());
  batch_size = std::max<std::size_t>(1, batch_size);
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, data.size() - start);
    std::vector<std::optional<BoundEnergy>> bound(n);
    parallel_for(n, threads, [&](std::size_t i) { bound[i].emplace(model.bind(data[start + i].x)); });
    std::vector<const BoundEnergy*> items(n);
    for (std::size_t i = 0; i < n; ++i) items[i] = &*bound[i];
    for (auto& r : infer_batch(items, model.graph(), cfg, threads)) out.push_back(std::move(r.beliefs));
  }
  return out;
}

struct Evaluation {
  double hamming_accuracy = 0.0;
  double sequence_accuracy = 0.0;
  double macro_f1 = 0.0;
  std::optional<double> threshold;  // set when binary predictions were thresholded
  Labelings predictions;

  double get(MetricKind k) const {
    switch (k) {
      case MetricKind::hamming_accuracy: return hamming_accuracy;
      case MetricKind::sequence_accuracy: return sequence_accuracy;
      case MetricKind::macro_f1: return macro_f1;
    }
    return 0.0;
  }
};

/// Per-variable probability of label 1 (binary variables only).
inline std::vector<std::vector<double>> positive_probabilities(const std::vector<BeliefVector>& beliefs,
                                                               const RegionGraph& g) {
  std::vector<std::vector<double>> out;
  out.reserve(beliefs.size());
  for (const auto& p : beliefs) {
    std::vector<double> q(g.num_variables());
    for (std::size_t k = 0; k < g.num_variables(); ++k) {
      if (g.domain_size(k) != 2) throw InvalidArgument("thresholding needs binary variables");
      q[k] = p[g.offset(g.unary_region(k)) + 1];
    }
    out.push_back(std::move(q));
  }
  return out;
}

/// Metrics from decoded beliefs, or from beliefs thresholded at `threshold`.
inline Evaluation evaluate_beliefs(const std::vector<BeliefVector>& beliefs, const std::vector<Example>& data,
                                   const RegionGraph& g, std::optional<double> threshold = {}) {
  if (beliefs.size() != data.size()) throw InvalidArgument("evaluate: prediction count mismatch");
  Evaluation ev;
  if (threshold) {
    ev.predictions = threshold_labelings(positive_probabilities(beliefs, g), *threshold);
    ev.threshold = threshold;
  } else {
    for (const auto& p : beliefs) ev.predictions.push_back(decode(p, g));
  }
  Labelings truth;
  truth.reserve(data.size());
  for (const auto& ex : data) truth.push_back(ex.y);
  ev.hamming_accuracy = hamming_accuracy(ev.predictions, truth);
  ev.sequence_accuracy = sequence_accuracy(ev.predictions, truth);
  ev.macro_f1 = macro_f1(ev.predictions, truth);
  return ev;
}

inline Evaluation evaluate(const EnergyModel& model, const std::vector<Example>& data, const InferenceConfig& cfg,
                           unsigned threads = 1, std::size_t batch_size = 128, std::optional<double> threshold = {}) {
  return evaluate_beliefs(predict_beliefs(model, data, cfg, threads, batch_size), data, model.graph(), threshold);
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  OptimizerConfig optimizer;
  std::size_t batch_size = 128;
  int epochs = 10;
  double gradient_clip_norm = 1.0;  // ≤ 0 disables clipping
  /// Stop after this many epochs without validation improvement; 0 disables.
  int patience = 0;
  InferenceConfig inference;
  std::set<std::string> frozen;
  MetricKind validation_metric = MetricKind::sequence_accuracy;
  std::uint64_t seed = 0;
  unsigned threads = 1;

  void validate() const {
    optimizer.validate();
    inference.validate();
    if (batch_size < 1) throw InvalidArgument("train.batch_size must be >= 1");
    if (epochs < 0) throw InvalidArgument("train.epochs must be >= 0");
    if (patience < 0) throw InvalidArgument("train.patience must be >= 0");
  }
};

struct EpochRecord {
  int epoch = 0;
  double mean_hinge = NAN;
  double min_hinge = NAN;
  double validation_metric = NAN;
  double max_clipped_norm = 0.0;  // largest post-clip batch gradient norm
  double seconds = 0.0;
};

struct TrainRecord {
  std::vector<EpochRecord> epochs;  // epoch 0 evaluates the initial weights
  int best_epoch = 0;
};

struct TrainResult {
  EnergyModel model;  // best-validation weights
  TrainRecord record;
};

using EpochSink = std::function<void(const EpochRecord&)>;

inline nlohmann::json to_json(const EpochRecord& r) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  return {{"epoch", r.epoch},
          {"mean_hinge", num(r.mean_hinge)},
          {"min_hinge", num(r.min_hinge)},
          {"validation_metric", num(r.validation_metric)},
          {"max_clipped_norm", r.max_clipped_norm},
          {"seconds", r.seconds}};
}

/// Seeded Fisher-Yates permutation, identical on every platform.
inline std::vector<std::size_t> seeded_permutation(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
  return idx;
}

/// Mini-batch SSVM training with best-validation checkpoint selection. With an
/// empty validation set the final weights are returned.
inline TrainResult train(EnergyModel model, const std::vector<Example>& train_set, const std::vector<Example>& val_set,
                         const TrainConfig& cfg, const EpochSink& sink = {}) {
  cfg.validate();
  if (train_set.empty()) throw InvalidArgument("training set is empty");
  auto frozen = model.frozen();
  frozen.insert(cfg.frozen.begin(), cfg.frozen.end());
  model.set_frozen(frozen);
  const auto mask = model.trainable_mask();

  using clock = std::chrono::steady_clock;
  auto validate_now = [&] {
    if (val_set.empty()) return std::numeric_limits<double>::quiet_NaN();
    return evaluate(model, val_set, cfg.inference, cfg.threads, cfg.batch_size).get(cfg.validation_metric);
  };

  TrainRecord record;
  const auto t0 = clock::now();
  EpochRecord first;
  first.validation_metric = validate_now();
  first.seconds = std::chrono::duration<double>(clock::now() - t0).count();
  record.epochs.push_back(first);
  if (sink) sink(first);
  std::vector<double> best(model.weights().begin(), model.weights().end());
  double best_metric = first.validation_metric;

  Optimizer opt(cfg.optimizer, model.num_weights());
  std::mt19937_64 rng(cfg.seed);
  int since_best = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = clock::now();
    const auto order = seeded_permutation(train_set.size(), rng);
    EpochRecord rec;
    rec.epoch = epoch;
    double hinge_sum = 0.0, hinge_min = INFINITY;
    for (std::size_t b = 0, batch_no = 0; b < order.size(); b += cfg.batch_size, ++batch_no) {
      std::vector<const Example*> batch;
      for (std::size_t i = b; i < std::min(order.size(), b + cfg.batch_size); ++i) batch.push_back(&train_set[order[i]]);
      BatchLoss loss;
      try {
        loss = ssvm_batch_loss(model, batch, cfg.inference, cfg.threads);
      } catch (const NumericFailure& e) {
        throw NumericFailure(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batch_no) + ")");
      }
      const bool finite = std::isfinite(loss.mean_hinge) &&
                          std::all_of(loss.gradient.begin(), loss.gradient.end(), [](double v) { return std::isfinite(v); });
      if (!finite)
        throw NumericFailure("non-finite loss or gradient at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batch_no));
      for (double h : loss.hinges) {
        hinge_sum += h;
        hinge_min = std::min(hinge_min, h);
      }
      clip_gradient(loss.gradient, cfg.gradient_clip_norm);
      double s = 0.0;
      for (double v : loss.gradient) s += v * v;
      rec.max_clipped_norm = std::max(rec.max_clipped_norm, std::sqrt(s));
      opt.step(model.weights(), loss.gradient, mask);
    }
    rec.mean_hinge = hinge_sum / static_cast<double>(train_set.size());
    rec.min_hinge = hinge_min;
    rec.validation_metric = validate_now();
    rec.seconds = std::chrono::duration<double>(clock::now() - start).count();
    record.epochs.push_back(rec);
    if (sink) sink(rec);
    if (val_set.empty() || rec.validation_metric > best_metric) {
      best_metric = rec.validation_metric;
      best.assign(model.weights().begin(), model.weights().end());
      record.best_epoch = epoch;
      since_best = 0;
    } else if (cfg.patience > 0 && ++since_best >= cfg.patience) {
      break;
    }
  }
  std::copy(best.begin(), best.end(), model.weights().begin());
  return {std::move(model), std::move(record)};
}

// ---------------------------------------------------------------------------
// Staged training presets

struct StagePlan {
  std::string name;
  std::optional<EnergyKind> required_kind;
  bool requires_pairwise = false;
  bool forbids_pairwise = false;
  std::string source_stage;                // empty: trains from scratch
  std::set<std::string> copy_from_source;  // slice-group patterns
  std::set<std::string> frozen;
};

inline const std::vector<StagePlan>& stage_presets() {
  static const std::vector<StagePlan> presets = {
      {"custom", std::nullopt, false, false, "", {}, {}},
      {"unary", EnergyKind::linear, false, true, "", {}, {}},
      {"struct-from-unary", EnergyKind::linear, true, false, "unary", {"unary"}, {"unary"}},
      {"spen-from-unary", EnergyKind::joint_mlp, false, true, "unary", {"unary"}, {"unary"}},
      {"gspen-from-struct", EnergyKind::gspen_sum, true, false, "struct", {"unary", "pairwise"}, {"unary", "pairwise"}},
      {"gspen-from-spen", EnergyKind::gspen_sum, true, false, "spen", {"unary", "T"}, {"unary", "T"}},
  };
  return presets;
}

inline const StagePlan& stage_plan(const std::string& name) {
  for (const auto& p : stage_presets())
    if (p.name == name) return p;
  throw InvalidArgument("unknown training stage '" + name + "'");
}

/// Fresh model for a stage: checks the spec against the preset, copies the
/// preset's slice groups from `source`, and freezes them.
inline EnergyModel build_stage_model(const StagePlan& plan, const ModelSpec& spec, const RegionGraph& g,
                                     const EnergyModel* source, std::uint64_t seed) {
  if (plan.required_kind && spec.kind != *plan.required_kind)
    throw InvalidArgument("stage '" + plan.name + "' needs a " + to_string(*plan.required_kind) + " model, got " +
                          to_string(spec.kind));
  if (plan.requires_pairwise && spec.pairwise.mode == PairwiseMode::none)
    throw InvalidArgument("stage '" + plan.name + "' needs pairwise potentials");
  if (plan.forbids_pairwise && spec.pairwise.mode != PairwiseMode::none)
    throw InvalidArgument("stage '" + plan.name + "' trains without pairwise potentials");
  if (!plan.source_stage.empty() && !source)
    throw InvalidArgument("stage '" + plan.name + "' needs a " + plan.source_stage + " checkpoint to start from");
  EnergyModel m(spec, g, seed);
  if (source && !plan.copy_from_source.empty()) {
    if (m.copy_slices_from(*source, plan.copy_from_source) == 0)
      throw InvalidArgument("stage '" + plan.name + "': source checkpoint shares no slices with the model");
  }
  m.set_frozen(plan.frozen);
  return m;
}

}  // namespace gspen
