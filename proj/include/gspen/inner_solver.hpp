#pragma once

// Solvers for the classical structured subproblem
//
//   max_{p in M_L}  <a, p> + eps * H_c(p)
//
// which is the inner step of both outer inference algorithms.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "gspen/errors.hpp"
#include "gspen/region_graph.hpp"

namespace gspen {

struct InnerConfig {
  double entropy = 1.0;
  CountingPreset counting = CountingPreset::paper;
  int max_passes = 10;
  // Stop when the dual objective changes by less than this over a pass,
  // measured in units of the temperature.
  double objective_tolerance = 1e-10;
  double damping = 0.0;

  void validate() const {
    if (!(entropy >= 0.0)) throw InvalidArgument("inner.entropy must be >= 0");
    if (max_passes < 1) throw InvalidArgument("inner.max_passes must be >= 1");
    if (!(objective_tolerance >= 0.0)) throw InvalidArgument("inner.objective_tolerance must be >= 0");
    if (!(damping >= 0.0 && damping < 1.0)) throw InvalidArgument("inner.damping must be in [0, 1)");
  }
};

/// Temperature used on loopy graphs when the caller asks for eps = 0.
inline constexpr double kLoopyTemperature = 1e-3;

struct InnerTraceRow {
  int pass = 0;
  double dual_objective = 0.0;
  double max_belief_delta = 0.0;
};
using InnerTraceSink = std::function<void(const InnerTraceRow&)>;

struct MapResult {
  std::vector<int> labeling;
  double value = 0.0;
};

/// <a, p> + eps * H_c(p).
inline double inner_objective(const RegionGraph& g, const ScoreVector& a, const BeliefVector& p, double eps,
                              const CountingNumbers& c) {
  double v = dot(a, p);
  if (eps != 0.0) v += eps * fractional_entropy(p, g, c);
  return v;
}

/// Energy of a discrete labeling under region scores.
inline double labeling_score(const RegionGraph& g, const ScoreVector& a, std::span<const int> labeling) {
  double v = 0.0;
  for (std::size_t r = 0; r < g.num_regions(); ++r) v += a[g.offset(r) + g.assignment_index(r, labeling)];
  return v;
}

namespace detail {

inline double log_sum_exp(std::span<const double> v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

/// out = softmax(in / temperature).
inline void softmax(std::span<const double> in, double temperature, std::span<double> out) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : in) m = std::max(m, x / temperature);
  double s = 0.0;
  for (std::size_t i = 0; i < in.size(); ++i) s += (out[i] = std::exp(in[i] / temperature - m));
  for (auto& x : out) x /= s;
}

inline void one_hot_argmax(std::span<const double> in, std::span<double> out) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < in.size(); ++i)
    if (in[i] > in[best]) best = i;
  std::fill(out.begin(), out.end(), 0.0);
  out[best] = 1.0;
}

inline void check_scores(const RegionGraph& g, const ScoreVector& a) {
  if (a.size() != g.flat_size()) throw InvalidArgument("scores do not match graph layout");
  for (double x : a.values)
    if (!std::isfinite(x)) throw InvalidArgument("scores contain non-finite entries");
}

/// Bipartite variable/factor traversal of an acyclic region graph.
class FactorTree {
 public:
  struct Step {
    bool is_factor = false;
    std::size_t id = 0;
    bool root = false;
    std::size_t parent_factor = 0;  // var steps: factor we were reached from
    std::size_t pos = 0;            // var steps: position in parent factor; factor steps: position of parent var
  };

  explicit FactorTree(const RegionGraph& g) : g_(g) {
    if (!g.is_acyclic()) throw UnsupportedStructure("exact tree solver requires an acyclic region graph");
    const std::size_t R = g.num_regions();
    vars_.assign(R, {});
    index_.assign(R, {});
    var_factors_.assign(g.num_variables(), {});
    for (std::size_t f = 0; f < R; ++f) {
      if (g.is_unary(f)) continue;
      for (int v : g.region_vars(f)) {
        const std::size_t u = g.unary_region(static_cast<std::size_t>(v));
        for (std::size_t e : g.edges_out_of(f))
          if (g.containment_edges()[e].child == u) index_[f].push_back(&g.containment_edges()[e].child_index);
        var_factors_[v].push_back({f, vars_[f].size()});
        vars_[f].push_back(static_cast<std::size_t>(v));
      }
    }
    std::vector<bool> seen_var(g.num_variables(), false), seen_factor(R, false);
    for (std::size_t k = 0; k < g.num_variables(); ++k) {
      if (seen_var[k]) continue;
      seen_var[k] = true;
      std::size_t head = order_.size();
      order_.push_back({false, k, true, 0, 0});
      while (head < order_.size()) {
        const Step s = order_[head++];
        if (!s.is_factor) {
          for (auto [f, pos] : var_factors_[s.id]) {
            if (seen_factor[f]) continue;
            seen_factor[f] = true;
            order_.push_back({true, f, false, 0, pos});
          }
        } else {
          for (std::size_t i = 0; i < vars_[s.id].size(); ++i) {
            if (i == s.pos) continue;
            seen_var[vars_[s.id][i]] = true;
            order_.push_back({false, vars_[s.id][i], false, s.id, i});
          }
        }
      }
    }
  }

  /// Two-pass message passing. `psi` holds log-potentials in the flat layout.
  /// MaxMode selects max-sum instead of sum-product.
  template <bool MaxMode>
  void run(std::span<const double> psi, bool downward) {
    init_messages();
    for (std::size_t s = order_.size(); s-- > 0;) {
      const Step& st = order_[s];
      if (st.root) continue;
      if (st.is_factor) {
        factor_to_var<MaxMode>(psi, st.id, st.pos, to_var_[st.id][st.pos]);
      } else {
        var_to_factor(psi, st.id, st.parent_factor, st.pos, to_factor_[st.parent_factor][st.pos]);
      }
    }
    if (!downward) return;
    for (const Step& st : order_) {
      if (st.is_factor) {
        for (std::size_t i = 0; i < vars_[st.id].size(); ++i)
          if (i != st.pos) factor_to_var<MaxMode>(psi, st.id, i, to_var_[st.id][i]);
      } else {
        for (auto [f, pos] : var_factors_[st.id])
          if (st.root || f != st.parent_factor) var_to_factor(psi, st.id, f, pos, to_factor_[f][pos]);
      }
    }
  }

  /// Sum of log-potential and incoming messages for a variable.
  std::vector<double> var_total(std::span<const double> psi, std::size_t v) const {
    const std::size_t u = g_.unary_region(v);
    std::vector<double> t(psi.begin() + static_cast<std::ptrdiff_t>(g_.offset(u)),
                          psi.begin() + static_cast<std::ptrdiff_t>(g_.offset(u) + g_.table_size(u)));
    for (auto [f, pos] : var_factors_[v])
      for (std::size_t y = 0; y < t.size(); ++y) t[y] += to_var_[f][pos][y];
    return t;
  }

  /// Log-potential plus incoming variable messages, optionally skipping one position.
  std::vector<double> factor_total(std::span<const double> psi, std::size_t f,
                                   std::size_t skip = static_cast<std::size_t>(-1)) const {
    std::vector<double> t(psi.begin() + static_cast<std::ptrdiff_t>(g_.offset(f)),
                          psi.begin() + static_cast<std::ptrdiff_t>(g_.offset(f) + g_.table_size(f)));
    for (std::size_t i = 0; i < vars_[f].size(); ++i) {
      if (i == skip) continue;
      const auto& idx = *index_[f][i];
      const auto& m = to_factor_[f][i];
      for (std::size_t j = 0; j < t.size(); ++j) t[j] += m[idx[j]];
    }
    return t;
  }

  const std::vector<Step>& order() const { return order_; }
  const std::vector<std::size_t>& factor_vars(std::size_t f) const { return vars_[f]; }
  const std::vector<std::size_t>& var_index(std::size_t f, std::size_t i) const { return *index_[f][i]; }

 private:
  void init_messages() {
    to_var_.assign(g_.num_regions(), {});
    to_factor_.assign(g_.num_regions(), {});
    for (std::size_t f = 0; f < g_.num_regions(); ++f)
      for (std::size_t v : vars_[f]) {
        to_var_[f].emplace_back(static_cast<std::size_t>(g_.domain_size(v)), 0.0);
        to_factor_[f].emplace_back(static_cast<std::size_t>(g_.domain_size(v)), 0.0);
      }
  }

  template <bool MaxMode>
  void factor_to_var(std::span<const double> psi, std::size_t f, std::size_t i, std::vector<double>& out) const {
    const auto t = factor_total(psi, f, i);
    const auto& idx = *index_[f][i];
    std::fill(out.begin(), out.end(), -std::numeric_limits<double>::infinity());
    for (std::size_t j = 0; j < t.size(); ++j) out[idx[j]] = std::max(out[idx[j]], t[j]);
    if constexpr (!MaxMode) {
      std::vector<double> s(out.size(), 0.0);
      for (std::size_t j = 0; j < t.size(); ++j) s[idx[j]] += std::exp(t[j] - out[idx[j]]);
      for (std::size_t y = 0; y < out.size(); ++y) out[y] += std::log(s[y]);
    }
  }

  void var_to_factor(std::span<const double> psi, std::size_t v, std::size_t f, std::size_t pos,
                     std::vector<double>& out) const {
    const std::size_t u = g_.unary_region(v);
    for (std::size_t y = 0; y < out.size(); ++y) out[y] = psi[g_.offset(u) + y];
    for (auto [f2, pos2] : var_factors_[v]) {
      if (f2 == f && pos2 == pos) continue;
      for (std::size_t y = 0; y < out.size(); ++y) out[y] += to_var_[f2][pos2][y];
    }
  }

  const RegionGraph& g_;
  std::vector<std::vector<std::size_t>> vars_;
  std::vector<std::vector<const std::vector<std::size_t>*>> index_;
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> var_factors_;
  std::vector<Step> order_;
  std::vector<std::vector<std::vector<double>>> to_var_, to_factor_;
};

}  // namespace detail

/// Exact marginals of q(y) ∝ exp(score(y) / eps) on an acyclic graph
/// (log-space sum-product). Equals the Bethe-entropy inner maximizer on trees.
inline BeliefVector tree_exact_marginals(const RegionGraph& g, const ScoreVector& a, double eps) {
  detail::check_scores(g, a);
  if (!(eps > 0.0)) throw InvalidArgument("tree_exact_marginals: eps must be > 0");
  detail::FactorTree tree(g);
  std::vector<double> psi(a.values);
  for (auto& x : psi) x /= eps;
  tree.run<false>(psi, true);
  BeliefVector p(g.flat_size());
  for (std::size_t r = 0; r < g.num_regions(); ++r) {
    const auto t = g.is_unary(r) ? tree.var_total(psi, static_cast<std::size_t>(g.region_vars(r)[0]))
                                 : tree.factor_total(psi, r);
    detail::softmax(t, 1.0, std::span<double>(p.values).subspan(g.offset(r), g.table_size(r)));
  }
  return p;
}

/// Exact MAP labeling on an acyclic graph (max-sum with backtracking).
/// Ties go to the smallest within-table index.
inline MapResult tree_exact_map(const RegionGraph& g, const ScoreVector& a) {
  detail::check_scores(g, a);
  detail::FactorTree tree(g);
  tree.run<true>(a.values, false);
  std::vector<int> labels(g.num_variables(), -1);
  for (const auto& st : tree.order()) {
    if (st.is_factor) {
      const auto t = tree.factor_total(a.values, st.id);
      const auto& pidx = tree.var_index(st.id, st.pos);
      const auto parent_label = static_cast<std::size_t>(labels[tree.factor_vars(st.id)[st.pos]]);
      std::size_t best = static_cast<std::size_t>(-1);
      for (std::size_t j = 0; j < t.size(); ++j) {
        if (pidx[j] != parent_label) continue;
        if (best == static_cast<std::size_t>(-1) || t[j] > t[best]) best = j;
      }
      const auto& vars = tree.factor_vars(st.id);
      for (std::size_t i = 0; i < vars.size(); ++i)
        labels[vars[i]] = static_cast<int>(tree.var_index(st.id, i)[best]);
    } else if (st.root) {
      const auto t = tree.var_total(a.values, st.id);
      labels[st.id] = static_cast<int>(std::max_element(t.begin(), t.end()) - t.begin());
    }
  }
  return {labels, labeling_score(g, a, labels)};
}

namespace detail {

/// Block coordinate descent in the dual of the entropy-regularized LP over
/// the local polytope. One block per region with parents: all messages from
/// its parents are updated jointly in closed form.
class DualMessagePassing {
 public:
  DualMessagePassing(const RegionGraph& g, const ScoreVector& a, double eps, const CountingNumbers& c)
      : g_(g), eps_(eps), c_(c), theta_(a.values), lambda_(g.containment_edges().size()) {
    if (c.values.size() != g.num_regions()) throw InvalidArgument("counting numbers do not match graph");
    for (std::size_t e = 0; e < lambda_.size(); ++e)
      lambda_[e].assign(g.table_size(g.containment_edges()[e].child), 0.0);
    for (std::size_t r = 0; r < g.num_regions(); ++r) {
      if (!g.edges_out_of(r).empty() && !(c.values[r] > 0.0))
        throw UnsupportedStructure("message passing needs positive counting numbers on parent regions");
      if (!g.edges_into(r).empty() && !(block_weight(r) > 0.0))
        throw UnsupportedStructure("message passing needs a positive block counting weight");
    }
  }

  void pass(double damping) {
    for (std::size_t r = 0; r < g_.num_regions(); ++r)
      if (!g_.edges_into(r).empty()) update_block(r, damping);
  }

  double dual_objective() const {
    double d = 0.0;
    for (std::size_t r = 0; r < g_.num_regions(); ++r) {
      const auto t = table(theta_, r);
      const double w = eps_ * c_.values[r];
      if (w == 0.0) {
        d += *std::max_element(t.begin(), t.end());
      } else {
        std::vector<double> s(t.begin(), t.end());
        for (auto& x : s) x /= w;
        d += w * log_sum_exp(s);
      }
    }
    return d;
  }

  /// Beliefs implied by the current messages (not yet repaired).
  BeliefVector beliefs() const {
    BeliefVector p(g_.flat_size());
    for (std::size_t r = 0; r < g_.num_regions(); ++r) {
      auto out = std::span<double>(p.values).subspan(g_.offset(r), g_.table_size(r));
      if (!g_.edges_into(r).empty()) {
        std::vector<std::vector<double>> mu;
        const auto s = block_sum(r, mu);
        softmax(s, eps_ * block_weight(r), out);
      } else if (c_.values[r] > 0.0) {
        softmax(table(theta_, r), eps_ * c_.values[r], out);
      } else {
        one_hot_argmax(table(theta_, r), out);
      }
    }
    return p;
  }

 private:
  std::span<const double> table(const std::vector<double>& v, std::size_t r) const {
    return std::span<const double>(v).subspan(g_.offset(r), g_.table_size(r));
  }

  double block_weight(std::size_t r) const {
    double w = c_.values[r];
    for (std::size_t e : g_.edges_into(r)) w += c_.values[g_.containment_edges()[e].parent];
    return w;
  }

  /// Parent-side message mu_e(y_c): reduce (theta_hat_p + lambda_e) over
  /// parent assignments consistent with y_c.
  std::vector<double> parent_message(std::size_t e) const {
    const auto& edge = g_.containment_edges()[e];
    const auto tp = table(theta_, edge.parent);
    const double w = eps_ * c_.values[edge.parent];
    const auto& lam = lambda_[e];
    std::vector<double> out(lam.size(), -std::numeric_limits<double>::infinity());
    std::vector<double> vals(tp.size());
    for (std::size_t j = 0; j < tp.size(); ++j) {
      vals[j] = tp[j] + lam[edge.child_index[j]];
      out[edge.child_index[j]] = std::max(out[edge.child_index[j]], vals[j]);
    }
    if (w > 0.0) {
      std::vector<double> s(out.size(), 0.0);
      for (std::size_t j = 0; j < tp.size(); ++j) s[edge.child_index[j]] += std::exp((vals[j] - out[edge.child_index[j]]) / w);
      for (std::size_t y = 0; y < out.size(); ++y) out[y] += w * std::log(s[y]);
    }
    return out;
  }

  std::vector<double> block_sum(std::size_t r, std::vector<std::vector<double>>& mu) const {
    const auto t = table(theta_, r);
    std::vector<double> s(t.begin(), t.end());
    mu.clear();
    for (std::size_t e : g_.edges_into(r)) {
      mu.push_back(parent_message(e));
      for (std::size_t y = 0; y < s.size(); ++y) s[y] += mu.back()[y] - lambda_[e][y];
    }
    return s;
  }

  void update_block(std::size_t r, double damping) {
    std::vector<std::vector<double>> mu;
    const auto s = block_sum(r, mu);
    const double chat = block_weight(r);
    const auto& into = g_.edges_into(r);
    for (std::size_t k = 0; k < into.size(); ++k) {
      const std::size_t e = into[k];
      const auto& edge = g_.containment_edges()[e];
      const double share = c_.values[edge.parent] / chat;
      auto& lam = lambda_[e];
      std::vector<double> delta(lam.size());
      for (std::size_t y = 0; y < lam.size(); ++y) {
        const double target = mu[k][y] - share * s[y];
        const double updated = (1.0 - damping) * target + damping * lam[y];
        delta[y] = updated - lam[y];
        lam[y] = updated;
      }
      for (std::size_t y = 0; y < delta.size(); ++y) theta_[g_.offset(r) + y] += delta[y];
      const std::size_t po = g_.offset(edge.parent);
      for (std::size_t j = 0; j < edge.child_index.size(); ++j) theta_[po + j] -= delta[edge.child_index[j]];
    }
  }

  const RegionGraph& g_;
  double eps_;
  const CountingNumbers& c_;
  std::vector<double> theta_;  // reparameterized scores
  std::vector<std::vector<double>> lambda_;
};

}  // namespace detail

/// Makes beliefs locally consistent, fixing children before parents (regions
/// processed by increasing size). A parent whose children are all unary gets
/// the closed-form correction b + prod(u) - prod(m), where m are its current
/// marginals and u the children's beliefs, then the smallest mix toward
/// prod(u) that restores non-negativity. Other parents are rescaled by
/// iterative proportional fitting.
inline void repair_local_consistency(const RegionGraph& g, BeliefVector& p, int max_sweeps = 5000,
                                     double tol = 1e-13) {
  std::vector<std::size_t> order(g.num_regions());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return g.region_vars(a).size() < g.region_vars(b).size();
  });
  for (std::size_t r : order) {
    const auto& out = g.edges_out_of(r);
    if (out.empty()) continue;
    auto table = std::span<double>(p.values).subspan(g.offset(r), g.table_size(r));
    const bool unary_children =
        std::all_of(out.begin(), out.end(), [&](std::size_t e) { return g.is_unary(g.containment_edges()[e].child); });
    if (unary_children) {
      std::vector<std::vector<double>> marg;
      for (std::size_t e : out) {
        const auto& edge = g.containment_edges()[e];
        marg.emplace_back(g.table_size(edge.child), 0.0);
        for (std::size_t j = 0; j < table.size(); ++j) marg.back()[edge.child_index[j]] += table[j];
      }
      std::vector<double> prod_u(table.size(), 1.0);
      double theta = 0.0;
      for (std::size_t j = 0; j < table.size(); ++j) {
        double prod_m = 1.0;
        for (std::size_t i = 0; i < out.size(); ++i) {
          const auto& edge = g.containment_edges()[out[i]];
          prod_u[j] *= p[g.offset(edge.child) + edge.child_index[j]];
          prod_m *= marg[i][edge.child_index[j]];
        }
        table[j] += prod_u[j] - prod_m;
        if (table[j] < 0.0) theta = std::max(theta, -table[j] / (prod_u[j] - table[j]));
      }
      for (std::size_t j = 0; j < table.size(); ++j)
        table[j] = std::max(0.0, (1.0 - theta) * table[j] + theta * prod_u[j]);
      continue;
    }
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
      double worst = 0.0;
      for (std::size_t e : out) {
        const auto& edge = g.containment_edges()[e];
        std::vector<double> marg(g.table_size(edge.child), 0.0);
        for (std::size_t j = 0; j < table.size(); ++j) marg[edge.child_index[j]] += table[j];
        for (std::size_t y = 0; y < marg.size(); ++y)
          worst = std::max(worst, std::abs(marg[y] - p[g.offset(edge.child) + y]));
        for (std::size_t j = 0; j < table.size(); ++j) {
          const double m = marg[edge.child_index[j]];
          if (m > 0.0) table[j] *= p[g.offset(edge.child) + edge.child_index[j]] / m;
        }
      }
      if (worst < tol) break;
    }
  }
}

/// Entropy-regularized inner solve by dual block coordinate descent, followed
/// by the consistency repair. `eps` must be > 0.
inline BeliefVector message_passing_marginals(const RegionGraph& g, const ScoreVector& a, double eps,
                                              const CountingNumbers& c, const InnerConfig& cfg,
                                              const InnerTraceSink& sink = {}) {
  detail::DualMessagePassing mp(g, a, eps, c);
  if (!g.containment_edges().empty()) {
    double prev = mp.dual_objective();
    BeliefVector prev_p;
    if (sink) prev_p = mp.beliefs();
    for (int pass = 1; pass <= cfg.max_passes; ++pass) {
      mp.pass(cfg.damping);
      const double d = mp.dual_objective();
      if (sink) {
        auto cur = mp.beliefs();
        double delta = 0.0;
        for (std::size_t i = 0; i < cur.size(); ++i) delta = std::max(delta, std::abs(cur[i] - prev_p[i]));
        sink({pass, d, delta});
        prev_p = std::move(cur);
      }
      const bool done = std::abs(prev - d) / eps < cfg.objective_tolerance;
      prev = d;
      if (done) break;
    }
  }
  auto p = mp.beliefs();
  repair_local_consistency(g, p);
  return p;
}

/// Dispatching inner solver: exact paths on acyclic graphs (Bethe counting
/// with eps > 0, or eps = 0), message passing otherwise.
inline BeliefVector solve_inner(const RegionGraph& g, const ScoreVector& a, const InnerConfig& cfg,
                                const InnerTraceSink& sink = {}) {
  cfg.validate();
  detail::check_scores(g, a);
  if (g.is_acyclic()) {
    if (cfg.entropy == 0.0) return one_hot_beliefs(g, tree_exact_map(g, a).labeling);
    if (cfg.counting == CountingPreset::bethe) return tree_exact_marginals(g, a, cfg.entropy);
  }
  const double eps = cfg.entropy > 0.0 ? cfg.entropy : kLoopyTemperature;
  return message_passing_marginals(g, a, eps, make_counting(g, cfg.counting), cfg, sink);
}

// ---------------------------------------------------------------------------
// Exhaustive oracle

struct OracleOptions {
  double tolerance = 1e-10;
  long max_iterations = 1'000'000;
  std::size_t max_joint_states = 100'000;
};

/// Maximizes <a, p> + eps * H_c(p) over the exact marginal polytope by
/// exponentiated-gradient ascent on an explicit joint distribution.
inline BeliefVector brute_force_oracle(const RegionGraph& g, const ScoreVector& a, double eps,
                                       const CountingNumbers& c, const OracleOptions& opt = {}) {
  detail::check_scores(g, a);
  double total = 1.0;
  for (int d : g.domains()) total *= d;
  if (total > static_cast<double>(opt.max_joint_states))
    throw ResourceLimit("brute_force_oracle: joint space has " + std::to_string(total) + " states");
  const auto N = static_cast<std::size_t>(total);
  const std::size_t K = g.num_variables(), R = g.num_regions();

  // Flat belief index of each (joint state, region).
  std::vector<std::size_t> flat(N * R);
  std::vector<int> y(K, 0);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t r = 0; r < R; ++r) flat[n * R + r] = g.offset(r) + g.assignment_index(r, y);
    for (std::size_t k = K; k-- > 0;) {
      if (++y[k] < g.domain_size(k)) break;
      y[k] = 0;
    }
  }
  std::vector<double> joint_score(N, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t r = 0; r < R; ++r) joint_score[n] += a[flat[n * R + r]];

  BeliefVector p(g.flat_size());
  if (eps == 0.0) {
    const auto best = static_cast<std::size_t>(std::max_element(joint_score.begin(), joint_score.end()) - joint_score.begin());
    for (std::size_t r = 0; r < R; ++r) p[flat[best * R + r]] = 1.0;
    return p;
  }

  std::vector<double> logq(N, -std::log(static_cast<double>(N)));
  auto marginals = [&](const std::vector<double>& lq, BeliefVector& out) {
    std::fill(out.values.begin(), out.values.end(), 0.0);
    for (std::size_t n = 0; n < N; ++n) {
      const double q = std::exp(lq[n]);
      for (std::size_t r = 0; r < R; ++r) out[flat[n * R + r]] += q;
    }
  };
  marginals(logq, p);
  double obj = inner_objective(g, a, p, eps, c);
  double step = 1.0 / eps;
  std::vector<double> grad(N), cand(N);
  BeliefVector pc(g.flat_size());
  for (long it = 0; it < opt.max_iterations; ++it) {
    const auto eg = entropy_gradient(p, g, c);
    for (std::size_t n = 0; n < N; ++n) {
      double s = joint_score[n];
      for (std::size_t r = 0; r < R; ++r) s += eps * eg[flat[n * R + r]];
      grad[n] = s;
    }
    bool accepted = false;
    double cand_obj = obj;
    while (step > 1e-12) {
      for (std::size_t n = 0; n < N; ++n) cand[n] = logq[n] + step * grad[n];
      const double z = detail::log_sum_exp(cand);
      for (auto& v : cand) v -= z;
      marginals(cand, pc);
      cand_obj = inner_objective(g, a, pc, eps, c);
      if (cand_obj >= obj) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    const double change = cand_obj - obj;
    logq.swap(cand);
    std::swap(p, pc);
    obj = cand_obj;
    step = std::min(step * 1.5, 1e3 / eps);
    if (change < opt.tolerance) break;
  }
  return p;
}

}  // namespace gspen
