#pragma once

// Outer inference over the local polytope: Frank-Wolfe and entropic mirror
// descent on F(p) + λ·H_c(p). Beliefs stay feasible after every iteration.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "gspen/errors.hpp"
#include "gspen/inner_solver.hpp"
#include "gspen/parallel.hpp"
#include "gspen/region_graph.hpp"

namespace gspen {

enum class Algorithm { frank_wolfe, mirror_descent };
enum class Termination { converged, max_iters };

inline std::string to_string(Algorithm a) { return a == Algorithm::frank_wolfe ? "frank_wolfe" : "mirror_descent"; }
inline std::string to_string(Termination t) { return t == Termination::converged ? "converged" : "max_iters"; }

inline Algorithm parse_algorithm(const std::string& s) {
  if (s == "frank_wolfe") return Algorithm::frank_wolfe;
  if (s == "mirror_descent") return Algorithm::mirror_descent;
  throw InvalidArgument("unknown inference algorithm '" + s + "'");
}

struct InferenceConfig {
  Algorithm algorithm = Algorithm::frank_wolfe;
  int max_iters = 100;
  double objective_entropy = 0.0;
  /// Stop once |objective change| over one iteration drops below this.
  double convergence_epsilon = 1e-4;
  /// The entropy field is overridden per algorithm (0 for Frank-Wolfe, 1 for mirror descent).
  InnerConfig inner;
  bool record_trace = false;
  /// Mirror-descent step multiplier on g/√t.
  double step_scale = 1.0;

  void validate() const {
    if (max_iters < 1) throw InvalidArgument("inference.max_iters must be >= 1");
    if (!(objective_entropy >= 0.0)) throw InvalidArgument("inference.objective_entropy must be >= 0");
    if (!(convergence_epsilon >= 0.0)) throw InvalidArgument("inference.convergence_epsilon must be >= 0");
    if (!(step_scale > 0.0)) throw InvalidArgument("inference.step_scale must be > 0");
    inner.validate();
  }
};

struct InferenceTraceRow {
  int iteration = 0;
  double objective = 0.0;
  double violation = 0.0;
  /// Frank-Wolfe gap surrogate <g, p̂ − p>; NaN for mirror descent.
  double gap = NAN;
};

struct InferenceResult {
  BeliefVector beliefs;
  double objective = 0.0;
  int iterations_used = 0;
  Termination termination = Termination::max_iters;
  std::vector<InferenceTraceRow> trace;
};

/// Anything scoring a belief vector with a gradient.
template <class E>
concept BeliefObjective = requires(const E& e, const BeliefVector& p) {
  { e.value(p) } -> std::convertible_to<double>;
  { e.grad_beliefs(p) } -> std::convertible_to<ScoreVector>;
};

/// F(p) = <scores, p>.
struct LinearScores {
  ScoreVector scores;
  double value(const BeliefVector& p) const { return dot(scores, p); }
  ScoreVector grad_beliefs(const BeliefVector&) const { return scores; }
};

/// F(p) = −scale·‖p − q‖²; concave with maximum 0 at q.
struct QuadraticEnergy {
  BeliefVector target;
  double scale = 1.0;

  double value(const BeliefVector& p) const {
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] - target[i]) * (p[i] - target[i]);
    return -scale * s;
  }
  ScoreVector grad_beliefs(const BeliefVector& p) const {
    ScoreVector g(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) g[i] = -2.0 * scale * (p[i] - target[i]);
    return g;
  }
};

/// Unary ScoreVector with entry 1[y ≠ truth_k] for each variable and label; 0 elsewhere.
inline ScoreVector loss_augment(const RegionGraph& g, std::span<const int> truth) {
  check_labeling(g, truth);
  ScoreVector s(g.flat_size());
  for (std::size_t k = 0; k < g.num_variables(); ++k) {
    const std::size_t off = g.offset(g.unary_region(k));
    for (int y = 0; y < g.domain_size(k); ++y) s[off + static_cast<std::size_t>(y)] = y == truth[k] ? 0.0 : 1.0;
  }
  return s;
}

/// F(p) + <loss, p>. Keeps a reference to `base`.
template <BeliefObjective E>
class LossAugmented {
 public:
  LossAugmented(const E& base, ScoreVector loss) : base_(&base), loss_(std::move(loss)) {}
  double value(const BeliefVector& p) const { return base_->value(p) + dot(loss_, p); }
  ScoreVector grad_beliefs(const BeliefVector& p) const {
    ScoreVector g = base_->grad_beliefs(p);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += loss_[i];
    return g;
  }

 private:
  const E* base_;
  ScoreVector loss_;
};

/// Per-variable argmax of the unary beliefs; ties go to the smallest label.
inline std::vector<int> decode(const BeliefVector& p, const RegionGraph& g) {
  if (p.size() != g.flat_size()) throw InvalidArgument("decode: belief layout mismatch");
  std::vector<int> y(g.num_variables());
  for (std::size_t k = 0; k < g.num_variables(); ++k) {
    const std::size_t off = g.offset(g.unary_region(k));
    int best = 0;
    for (int l = 1; l < g.domain_size(k); ++l)
      if (p[off + static_cast<std::size_t>(l)] > p[off + static_cast<std::size_t>(best)]) best = l;
    y[k] = best;
  }
  return y;
}

/// One inference run, advanced an iteration at a time. Holds references to
/// the energy and graph.
template <BeliefObjective E>
class InferenceRun {
 public:
  InferenceRun(const E& energy, const RegionGraph& g, InferenceConfig cfg, std::optional<BeliefVector> init = {})
      : e_(&energy), g_(&g), cfg_(std::move(cfg)) {
    cfg_.validate();
    counting_ = make_counting(g, cfg_.inner.counting);
    p_ = init ? std::move(*init) : uniform_beliefs(g);
    if (p_.size() != g.flat_size()) throw InvalidArgument("initial beliefs have the wrong layout");
    if (!check_local_polytope(p_, g).feasible(1e-6)) throw InvalidArgument("initial beliefs are not in the local polytope");
    inner_ = cfg_.inner;
    inner_.entropy = cfg_.algorithm == Algorithm::frank_wolfe ? 0.0 : 1.0;
    objective_ = objective(p_);
    check_finite(objective_);
  }

  void step() {
    ++t_;
    ScoreVector grad = e_->grad_beliefs(p_);
    if (grad.size() != p_.size()) throw InvalidArgument("energy gradient has the wrong layout");
    if (cfg_.objective_entropy > 0.0) {
      const ScoreVector h = entropy_gradient(p_, *g_, counting_);
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += cfg_.objective_entropy * h[i];
    }
    double gap = NAN;
    if (cfg_.algorithm == Algorithm::frank_wolfe) {
      const BeliefVector vertex = solve_inner(*g_, grad, inner_);
      gap = 0.0;
      for (std::size_t i = 0; i < p_.size(); ++i) gap += grad[i] * (vertex[i] - p_[i]);
      const double step = 1.0 / t_;
      for (std::size_t i = 0; i < p_.size(); ++i) p_[i] = (1.0 - step) * p_[i] + step * vertex[i];
    } else {
      // Bregman link of H_c: a_r = c_r (1 + ln p_r), so g = 0 is a fixed point.
      ScoreVector a(p_.size());
      const double step = cfg_.step_scale / std::sqrt(static_cast<double>(t_));
      for (std::size_t r = 0; r < g_->num_regions(); ++r) {
        const double c = counting_.values[r];
        for (std::size_t j = g_->offset(r); j < g_->offset(r) + g_->table_size(r); ++j)
          a[j] = c * (1.0 + std::log(std::max(p_[j], kLogClamp))) + step * grad[j];
      }
      p_ = solve_inner(*g_, a, inner_);
    }
    const double obj = objective(p_);
    check_finite(obj);
    change_ = std::abs(obj - objective_);
    objective_ = obj;
    if (cfg_.record_trace) trace_.push_back({t_, obj, check_local_polytope(p_, *g_).max(), gap});
  }

  int iteration() const { return t_; }
  bool converged() const { return t_ > 0 && change_ < cfg_.convergence_epsilon; }
  double objective() const { return objective_; }
  const BeliefVector& beliefs() const { return p_; }
  const InferenceConfig& config() const { return cfg_; }

  InferenceResult take_result(Termination why) {
    return {std::move(p_), objective_, t_, why, std::move(trace_)};
  }

 private:
  double objective(const BeliefVector& p) const {
    double v = e_->value(p);
    if (cfg_.objective_entropy > 0.0) v += cfg_.objective_entropy * fractional_entropy(p, *g_, counting_);
    return v;
  }
  static void check_finite(double v) {
    if (!std::isfinite(v)) throw NumericFailure("inference objective became non-finite");
  }

  const E* e_;
  const RegionGraph* g_;
  InferenceConfig cfg_;
  InnerConfig inner_;
  CountingNumbers counting_;
  BeliefVector p_;
  double objective_ = 0.0, change_ = INFINITY;
  int t_ = 0;
  std::vector<InferenceTraceRow> trace_;
};

/// Runs until the objective changes by less than convergence_epsilon or max_iters.
template <BeliefObjective E>
InferenceResult infer(const E& energy, const RegionGraph& g, const InferenceConfig& cfg,
                      std::optional<BeliefVector> init = {}) {
  InferenceRun<E> run(energy, g, cfg, std::move(init));
  while (run.iteration() < cfg.max_iters) {
    run.step();
    if (run.converged()) return run.take_result(Termination::converged);
  }
  return run.take_result(Termination::max_iters);
}

template <BeliefObjective E>
InferenceResult frank_wolfe_infer(const E& energy, const RegionGraph& g, InferenceConfig cfg,
                                  std::optional<BeliefVector> init = {}) {
  cfg.algorithm = Algorithm::frank_wolfe;
  return infer(energy, g, cfg, std::move(init));
}

template <BeliefObjective E>
InferenceResult mirror_descent_infer(const E& energy, const RegionGraph& g, InferenceConfig cfg,
                                     std::optional<BeliefVector> init = {}) {
  cfg.algorithm = Algorithm::mirror_descent;
  return infer(energy, g, cfg, std::move(init));
}

/// Lockstep batch: every item advances each iteration until all items'
/// objective changes are below convergence_epsilon in the same iteration.
template <BeliefObjective E>
std::vector<InferenceResult> infer_batch(const std::vector<const E*>& energies, const RegionGraph& g,
                                         const InferenceConfig& cfg, unsigned threads = 1,
                                         const std::vector<BeliefVector>* inits = nullptr) {
  if (inits && inits->size() != energies.size()) throw InvalidArgument("infer_batch: one init per item required");
  std::vector<std::optional<InferenceRun<E>>> runs(energies.size());
  parallel_for(energies.size(), threads, [&](std::size_t i) {
    runs[i].emplace(*energies[i], g, cfg, inits ? std::optional((*inits)[i]) : std::nullopt);
  });
  Termination why = Termination::max_iters;
  for (int t = 0; t < cfg.max_iters && !energies.empty(); ++t) {
    parallel_for(runs.size(), threads, [&](std::size_t i) { runs[i]->step(); });
    if (std::all_of(runs.begin(), runs.end(), [](const auto& r) { return r->converged(); })) {
      why = Termination::converged;
      break;
    }
  }
  std::vector<InferenceResult> out;
  out.reserve(runs.size());
  for (auto& r : runs) out.push_back(r->take_result(why));
  return out;
}

inline void write_trace_csv(std::ostream& os, const std::vector<InferenceTraceRow>& trace) {
  os << "iteration,objective,violation\n";
  os.precision(17);
  for (const auto& row : trace) os << row.iteration << ',' << row.objective << ',' << row.violation << '\n';
}

}  // namespace gspen
