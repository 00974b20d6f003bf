#pragma once

// Scoring functions F(x, p; w) over a region graph.
//
// Weight vector layout: unary generator, pairwise generator, then T. Every
// weight belongs to exactly one named slice ("unary.L.W", "pairwise.table",
// "T.L.b", ...).
//
// T input layouts (fixed):
//   gspen-sum, joint-mlp : [B(x) if include_potentials] ++ beliefs
//                          (beliefs = full flat vector, or unary block only)
//   hadamard             : f(x) ∘ p, flat layout
// B(x) is the unary potential block, variables in order, labels ascending.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gspen/errors.hpp"
#include "gspen/mlp.hpp"
#include "gspen/region_graph.hpp"

namespace gspen {

enum class EnergyKind { linear, joint_mlp, gspen_sum, hadamard };
enum class UnaryMode { none, per_variable, global };
enum class PairwiseMode { none, table, conditioned };
enum class TBeliefs { all, unary };

inline std::string to_string(EnergyKind k) {
  switch (k) {
    case EnergyKind::linear: return "linear";
    case EnergyKind::joint_mlp: return "joint-mlp";
    case EnergyKind::gspen_sum: return "gspen-sum";
    case EnergyKind::hadamard: return "hadamard";
  }
  return "?";
}

inline EnergyKind parse_energy_kind(const std::string& s) {
  for (auto k : {EnergyKind::linear, EnergyKind::joint_mlp, EnergyKind::gspen_sum, EnergyKind::hadamard})
    if (to_string(k) == s) return k;
  throw InvalidArgument("unknown energy kind '" + s + "'");
}

struct UnarySpec {
  UnaryMode mode = UnaryMode::per_variable;
  MlpSpec net;
  /// Global mode on binary domains only: label 0 scores fixed at 0, one output per variable.
  bool zero_label_fixed = false;
};

struct PairwiseSpec {
  PairwiseMode mode = PairwiseMode::table;
  MlpSpec net;  // conditioned mode only
};

struct TSpec {
  MlpSpec net;
  bool include_potentials = true;
  TBeliefs beliefs = TBeliefs::all;
};

struct ModelSpec {
  EnergyKind kind = EnergyKind::linear;
  std::size_t feature_dim = 0;
  UnarySpec unary;
  PairwiseSpec pairwise;
  TSpec t;
};

struct WeightSlice {
  std::string name;
  std::size_t offset = 0;
  std::size_t size = 0;
  bool operator==(const WeightSlice&) const = default;
};

/// True when `pattern` names `slice` or one of its dot-separated prefixes.
inline bool slice_matches(const std::string& pattern, const std::string& slice) {
  return slice == pattern || (slice.size() > pattern.size() && slice.compare(0, pattern.size(), pattern) == 0 &&
                              slice[pattern.size()] == '.');
}

class BoundEnergy;

class EnergyModel {
 public:
  EnergyModel(ModelSpec spec, RegionGraph graph, std::uint64_t seed = 0)
      : spec_(std::move(spec)), graph_(std::move(graph)) {
    layout();
    initialize(seed);
  }

  const ModelSpec& spec() const { return spec_; }
  const RegionGraph& graph() const { return graph_; }
  EnergyKind kind() const { return spec_.kind; }

  std::span<const double> weights() const { return w_; }
  std::span<double> weights() { return w_; }
  std::size_t num_weights() const { return w_.size(); }

  const std::vector<WeightSlice>& slices() const { return slices_; }
  const WeightSlice& slice(const std::string& name) const {
    for (const auto& s : slices_)
      if (s.name == name) return s;
    throw InvalidArgument("no weight slice named '" + name + "'");
  }
  std::span<double> slice_values(const std::string& name) { return std::span(w_).subspan(slice(name).offset, slice(name).size); }
  std::span<const double> slice_values(const std::string& name) const {
    return std::span(w_).subspan(slice(name).offset, slice(name).size);
  }

  /// Patterns are slice names or group prefixes ("T", "unary", "pairwise").
  void set_frozen(std::set<std::string> patterns) {
    for (const auto& p : patterns) {
      const bool any = std::any_of(slices_.begin(), slices_.end(), [&](const auto& s) { return slice_matches(p, s.name); });
      if (!any) throw InvalidArgument("frozen pattern '" + p + "' matches no weight slice");
    }
    frozen_ = std::move(patterns);
  }
  const std::set<std::string>& frozen() const { return frozen_; }
  bool is_frozen(const WeightSlice& s) const {
    return std::any_of(frozen_.begin(), frozen_.end(), [&](const auto& p) { return slice_matches(p, s.name); });
  }
  /// 1 for trainable weights, 0 for frozen ones.
  std::vector<char> trainable_mask() const {
    std::vector<char> m(w_.size(), 1);
    for (const auto& s : slices_)
      if (is_frozen(s)) std::fill_n(m.begin() + static_cast<std::ptrdiff_t>(s.offset), s.size, char{0});
    return m;
  }

  bool has_linear_part() const { return spec_.unary.mode != UnaryMode::none || spec_.pairwise.mode != PairwiseMode::none; }
  bool has_t() const { return spec_.kind != EnergyKind::linear; }
  std::size_t unary_block_size() const { return unary_block_; }
  std::size_t t_input_size() const { return has_t() ? t_.input_size() : 0; }

  /// Copies every slice of `src` matching one of `patterns` into the same-named slice here.
  std::size_t copy_slices_from(const EnergyModel& src, const std::set<std::string>& patterns) {
    std::size_t copied = 0;
    for (const auto& s : src.slices_) {
      if (std::none_of(patterns.begin(), patterns.end(), [&](const auto& p) { return slice_matches(p, s.name); }))
        continue;
      const WeightSlice& d = slice(s.name);
      if (d.size != s.size) throw InvalidArgument("slice '" + s.name + "' has different sizes in source and target");
      std::copy_n(src.w_.begin() + static_cast<std::ptrdiff_t>(s.offset), s.size,
                  w_.begin() + static_cast<std::ptrdiff_t>(d.offset));
      ++copied;
    }
    return copied;
  }

  BoundEnergy bind(std::span<const double> x) const;

  ScoreVector potentials(std::span<const double> x) const;
  double energy_value(std::span<const double> x, const BeliefVector& p) const;
  ScoreVector grad_beliefs(std::span<const double> x, const BeliefVector& p) const;
  std::vector<double> grad_weights(std::span<const double> x, const BeliefVector& p) const;

 private:
  friend class BoundEnergy;

  void add_mlp_slices(const std::string& prefix, const Mlp& m) {
    for (std::size_t i = 0; i < m.layers().size(); ++i) {
      const auto& l = m.layers()[i];
      slices_.push_back({prefix + "." + std::to_string(i) + ".W", l.weight_offset, l.in * l.out});
      slices_.push_back({prefix + "." + std::to_string(i) + ".b", l.bias_offset, l.out});
    }
  }

  void layout() {
    const auto& g = graph_;
    const std::size_t K = g.num_variables();
    if (spec_.kind != EnergyKind::joint_mlp && spec_.kind != EnergyKind::gspen_sum && spec_.t.beliefs == TBeliefs::unary)
      throw InvalidArgument("unary-only T beliefs apply to gspen-sum and joint-mlp only");
    if (spec_.kind == EnergyKind::joint_mlp) {
      if (spec_.pairwise.mode != PairwiseMode::none) throw InvalidArgument("joint-mlp energies have no pairwise potentials");
      spec_.t.beliefs = TBeliefs::unary;
    }
    if ((spec_.kind == EnergyKind::linear || spec_.kind == EnergyKind::hadamard) && !has_linear_part())
      throw InvalidArgument(to_string(spec_.kind) + " energy needs unary or pairwise potentials");

    unary_block_ = 0;
    for (std::size_t k = 0; k < K; ++k) unary_block_ += static_cast<std::size_t>(g.domain_size(k));
    pair_block_ = g.flat_size() - unary_block_;

    std::size_t offset = 0;
    switch (spec_.unary.mode) {
      case UnaryMode::none: break;
      case UnaryMode::per_variable: {
        const int L = g.domain_size(0);
        for (std::size_t k = 0; k < K; ++k)
          if (g.domain_size(k) != L) throw InvalidArgument("per-variable unary generator needs equal domain sizes");
        if (K == 0 || spec_.feature_dim % K != 0)
          throw InvalidArgument("per-variable unary generator: feature_dim must be a multiple of the variable count");
        if (spec_.unary.zero_label_fixed) throw InvalidArgument("zero_label_fixed applies to the global unary generator");
        unary_ = Mlp(spec_.feature_dim / K, spec_.unary.net, static_cast<std::size_t>(L), offset);
        break;
      }
      case UnaryMode::global: {
        std::size_t out = unary_block_;
        if (spec_.unary.zero_label_fixed) {
          for (std::size_t k = 0; k < K; ++k)
            if (g.domain_size(k) != 2) throw InvalidArgument("zero_label_fixed needs binary domains");
          out = K;
        }
        if (spec_.feature_dim == 0) throw InvalidArgument("global unary generator needs feature_dim > 0");
        unary_ = Mlp(spec_.feature_dim, spec_.unary.net, out, offset);
        break;
      }
    }
    if (spec_.unary.mode != UnaryMode::none) {
      add_mlp_slices("unary", unary_);
      offset += unary_.num_weights();
    }

    switch (spec_.pairwise.mode) {
      case PairwiseMode::none: break;
      case PairwiseMode::table:
        if (pair_block_ == 0) throw InvalidArgument("pairwise table needs non-unary regions");
        slices_.push_back({"pairwise.table", offset, pair_block_});
        offset += pair_block_;
        break;
      case PairwiseMode::conditioned:
        if (pair_block_ == 0) throw InvalidArgument("pairwise generator needs non-unary regions");
        if (spec_.feature_dim == 0) throw InvalidArgument("conditioned pairwise generator needs feature_dim > 0");
        pairwise_ = Mlp(spec_.feature_dim, spec_.pairwise.net, pair_block_, offset);
        add_mlp_slices("pairwise", pairwise_);
        offset += pairwise_.num_weights();
        break;
    }

    if (has_t()) {
      std::size_t in = 0;
      if (spec_.kind == EnergyKind::hadamard) {
        in = g.flat_size();
      } else {
        if (uses_b_block()) in += unary_block_;
        in += spec_.t.beliefs == TBeliefs::all ? g.flat_size() : unary_block_;
      }
      t_ = Mlp(in, spec_.t.net, 1, offset);
      add_mlp_slices("T", t_);
      offset += t_.num_weights();
    }
    w_.assign(offset, 0.0);
  }

  bool uses_b_block() const {
    return spec_.kind != EnergyKind::hadamard && spec_.t.include_potentials && spec_.unary.mode != UnaryMode::none;
  }

  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    if (spec_.unary.mode != UnaryMode::none) unary_.initialize(w_, rng, false);
    if (spec_.pairwise.mode == PairwiseMode::conditioned) pairwise_.initialize(w_, rng, true);
    // Zero final layer: T starts at 0, so a fresh composite scores like its linear part.
    if (has_t()) t_.initialize(w_, rng, true);
  }

  ModelSpec spec_;
  RegionGraph graph_;
  std::vector<double> w_;
  std::vector<WeightSlice> slices_;
  std::set<std::string> frozen_;
  Mlp unary_, pairwise_, t_;
  std::size_t unary_block_ = 0, pair_block_ = 0;
};

/// Model evaluated at a fixed input x; potentials are computed once.
/// Holds a reference to the model, which must outlive it.
class BoundEnergy {
 public:
  BoundEnergy(const EnergyModel& model, std::span<const double> x) : m_(&model) {
    const auto& spec = model.spec_;
    if (spec.unary.mode != UnaryMode::none || spec.pairwise.mode == PairwiseMode::conditioned) {
      if (x.size() != spec.feature_dim)
        throw InvalidArgument("feature vector has " + std::to_string(x.size()) + " entries, expected " +
                              std::to_string(spec.feature_dim));
    }
    for (double v : x)
      if (!std::isfinite(v)) throw InvalidArgument("feature vector has non-finite entries");
    const auto& g = model.graph_;
    f_ = ScoreVector(g.flat_size());
    const std::size_t K = g.num_variables();
    switch (spec.unary.mode) {
      case UnaryMode::none: break;
      case UnaryMode::per_variable: {
        const std::size_t d = spec.feature_dim / K;
        unary_tapes_.resize(K);
        for (std::size_t k = 0; k < K; ++k) {
          model.unary_.forward(model.w_, x.subspan(k * d, d), unary_tapes_[k]);
          const auto& out = unary_tapes_[k].act.back();
          std::copy(out.begin(), out.end(), f_.values.begin() + static_cast<std::ptrdiff_t>(g.offset(g.unary_region(k))));
        }
        break;
      }
      case UnaryMode::global: {
        unary_tapes_.resize(1);
        model.unary_.forward(model.w_, x, unary_tapes_[0]);
        const auto& out = unary_tapes_[0].act.back();
        for (std::size_t k = 0, j = 0; k < K; ++k) {
          const std::size_t off = g.offset(g.unary_region(k));
          if (spec.unary.zero_label_fixed) {
            f_[off + 1] = out[k];
          } else {
            for (int y = 0; y < g.domain_size(k); ++y) f_[off + static_cast<std::size_t>(y)] = out[j++];
          }
        }
        break;
      }
    }
    std::span<const double> pair;
    if (spec.pairwise.mode == PairwiseMode::table) {
      pair = std::span<const double>(model.w_).subspan(model.slice("pairwise.table").offset, model.pair_block_);
    } else if (spec.pairwise.mode == PairwiseMode::conditioned) {
      model.pairwise_.forward(model.w_, x, pair_tape_);
      pair = pair_tape_.act.back();
    }
    if (!pair.empty()) scatter_pairs(pair, f_.values);
  }

  const EnergyModel& model() const { return *m_; }
  const ScoreVector& potentials() const {
    if (!m_->has_linear_part()) throw UnsupportedOperation("energy model has no linear part");
    return f_;
  }

  double value(const BeliefVector& p) const {
    check(p);
    double v = m_->kind() == EnergyKind::hadamard ? 0.0 : dot(f_, p);
    if (m_->has_t()) {
      Mlp::Tape tape;
      m_->t_.forward(m_->w_, t_input(p), tape);
      v += tape.act.back()[0];
    }
    return v;
  }

  ScoreVector grad_beliefs(const BeliefVector& p) const {
    check(p);
    ScoreVector g(f_.size());
    if (m_->kind() != EnergyKind::hadamard) g = f_;
    if (m_->has_t()) {
      const auto din = t_input_grad(p, {});
      scatter_t_input_grad(din, p, g.values, {});
    }
    return g;
  }

  /// out += scale · ∂F/∂w at beliefs p. Frozen slices are left untouched.
  void accumulate_grad_weights(const BeliefVector& p, double scale, std::span<double> out) const {
    check(p);
    if (out.size() != m_->w_.size()) throw InvalidArgument("weight-gradient buffer has the wrong size");
    const auto& spec = m_->spec_;
    const auto& g = m_->graph_;
    const auto mask = m_->trainable_mask();
    std::vector<double> scratch(out.size(), 0.0);

    // dF/df over the flat layout and dF/dB over the unary block.
    std::vector<double> df(f_.size(), 0.0);
    std::vector<double> dB(m_->unary_block_, 0.0);
    if (m_->kind() != EnergyKind::hadamard) df = p.values;
    if (m_->has_t()) {
      std::vector<double> ignored(f_.size());
      const auto din = t_input_grad(p, scratch);
      scatter_t_input_grad(din, p, ignored, df);
      if (m_->uses_b_block())
        for (std::size_t i = 0; i < m_->unary_block_; ++i) dB[i] += din[i];
    }
    for (std::size_t k = 0, j = 0; k < g.num_variables(); ++k) {
      const std::size_t off = g.offset(g.unary_region(k));
      for (int y = 0; y < g.domain_size(k); ++y, ++j) dB[j] += df[off + static_cast<std::size_t>(y)];
    }

    const std::size_t K = g.num_variables();
    switch (spec.unary.mode) {
      case UnaryMode::none: break;
      case UnaryMode::per_variable:
        for (std::size_t k = 0; k < K; ++k) {
          const std::size_t L = static_cast<std::size_t>(g.domain_size(k));
          m_->unary_.backward(m_->w_, unary_tapes_[k], std::span<const double>(dB).subspan(k * L, L), {}, scratch);
        }
        break;
      case UnaryMode::global:
        if (spec.unary.zero_label_fixed) {
          std::vector<double> d(K);
          for (std::size_t k = 0; k < K; ++k) d[k] = dB[2 * k + 1];
          m_->unary_.backward(m_->w_, unary_tapes_[0], d, {}, scratch);
        } else {
          m_->unary_.backward(m_->w_, unary_tapes_[0], dB, {}, scratch);
        }
        break;
    }
    if (spec.pairwise.mode != PairwiseMode::none) {
      std::vector<double> dpair(m_->pair_block_);
      gather_pairs(df, dpair);
      if (spec.pairwise.mode == PairwiseMode::table) {
        const std::size_t off = m_->slice("pairwise.table").offset;
        for (std::size_t i = 0; i < dpair.size(); ++i) scratch[off + i] += dpair[i];
      } else {
        m_->pairwise_.backward(m_->w_, pair_tape_, dpair, {}, scratch);
      }
    }
    for (std::size_t i = 0; i < out.size(); ++i)
      if (mask[i]) out[i] += scale * scratch[i];
  }

  std::vector<double> grad_weights(const BeliefVector& p) const {
    std::vector<double> out(m_->w_.size(), 0.0);
    accumulate_grad_weights(p, 1.0, out);
    return out;
  }

  /// Smallest |relu preactivation| across generators and T at p.
  double min_relu_margin(const BeliefVector& p) const {
    double m = INFINITY;
    for (const auto& t : unary_tapes_) m = std::min(m, m_->unary_.min_relu_margin(t));
    if (m_->spec_.pairwise.mode == PairwiseMode::conditioned) m = std::min(m, m_->pairwise_.min_relu_margin(pair_tape_));
    if (m_->has_t()) {
      Mlp::Tape tape;
      m_->t_.forward(m_->w_, t_input(p), tape);
      m = std::min(m, m_->t_.min_relu_margin(tape));
    }
    return m;
  }

 private:
  void check(const BeliefVector& p) const {
    if (p.size() != f_.size())
      throw InvalidArgument("belief vector has " + std::to_string(p.size()) + " entries, expected " +
                            std::to_string(f_.size()));
  }

  // Pairwise block (non-unary regions in region order) <-> flat layout.
  void scatter_pairs(std::span<const double> pair, std::vector<double>& flat) const {
    const auto& g = m_->graph_;
    std::size_t j = 0;
    for (std::size_t r = 0; r < g.num_regions(); ++r) {
      if (g.is_unary(r)) continue;
      for (std::size_t i = 0; i < g.table_size(r); ++i) flat[g.offset(r) + i] = pair[j++];
    }
  }
  void gather_pairs(std::span<const double> flat, std::span<double> pair) const {
    const auto& g = m_->graph_;
    std::size_t j = 0;
    for (std::size_t r = 0; r < g.num_regions(); ++r) {
      if (g.is_unary(r)) continue;
      for (std::size_t i = 0; i < g.table_size(r); ++i) pair[j++] = flat[g.offset(r) + i];
    }
  }

  std::vector<double> t_input(const BeliefVector& p) const {
    const auto& g = m_->graph_;
    std::vector<double> in;
    in.reserve(m_->t_.input_size());
    if (m_->kind() == EnergyKind::hadamard) {
      for (std::size_t i = 0; i < p.size(); ++i) in.push_back(f_[i] * p[i]);
      return in;
    }
    if (m_->uses_b_block())
      for (std::size_t k = 0; k < g.num_variables(); ++k) {
        const std::size_t off = g.offset(g.unary_region(k));
        for (int y = 0; y < g.domain_size(k); ++y) in.push_back(f_[off + static_cast<std::size_t>(y)]);
      }
    if (m_->spec_.t.beliefs == TBeliefs::all) {
      in.insert(in.end(), p.values.begin(), p.values.end());
    } else {
      for (std::size_t k = 0; k < g.num_variables(); ++k) {
        const std::size_t off = g.offset(g.unary_region(k));
        for (int y = 0; y < g.domain_size(k); ++y) in.push_back(p[off + static_cast<std::size_t>(y)]);
      }
    }
    return in;
  }

  /// dT/d(input); accumulates T weight gradients into grad_w when non-empty.
  std::vector<double> t_input_grad(const BeliefVector& p, std::span<double> grad_w) const {
    Mlp::Tape tape;
    m_->t_.forward(m_->w_, t_input(p), tape);
    std::vector<double> din(m_->t_.input_size());
    const double one = 1.0;
    m_->t_.backward(m_->w_, tape, std::span<const double>(&one, 1), din, grad_w);
    return din;
  }

  /// Routes dT/d(input) to dF/dp (added to gp) and, for hadamard, to dF/df (added to gf when non-empty).
  void scatter_t_input_grad(const std::vector<double>& din, const BeliefVector& p, std::span<double> gp,
                            std::span<double> gf) const {
    const auto& g = m_->graph_;
    if (m_->kind() == EnergyKind::hadamard) {
      for (std::size_t i = 0; i < p.size(); ++i) {
        gp[i] += din[i] * f_[i];
        if (!gf.empty()) gf[i] += din[i] * p[i];
      }
      return;
    }
    const std::size_t base = m_->uses_b_block() ? m_->unary_block_ : 0;
    if (m_->spec_.t.beliefs == TBeliefs::all) {
      for (std::size_t i = 0; i < p.size(); ++i) gp[i] += din[base + i];
    } else {
      for (std::size_t k = 0, j = base; k < g.num_variables(); ++k) {
        const std::size_t off = g.offset(g.unary_region(k));
        for (int y = 0; y < g.domain_size(k); ++y, ++j) gp[off + static_cast<std::size_t>(y)] += din[j];
      }
    }
  }

  const EnergyModel* m_;
  ScoreVector f_;
  std::vector<Mlp::Tape> unary_tapes_;
  Mlp::Tape pair_tape_;
};

inline BoundEnergy EnergyModel::bind(std::span<const double> x) const { return BoundEnergy(*this, x); }
inline ScoreVector EnergyModel::potentials(std::span<const double> x) const { return bind(x).potentials(); }
inline double EnergyModel::energy_value(std::span<const double> x, const BeliefVector& p) const { return bind(x).value(p); }
inline ScoreVector EnergyModel::grad_beliefs(std::span<const double> x, const BeliefVector& p) const {
  return bind(x).grad_beliefs(p);
}
inline std::vector<double> EnergyModel::grad_weights(std::span<const double> x, const BeliefVector& p) const {
  return bind(x).grad_weights(p);
}

// ---------------------------------------------------------------------------
// Finite-difference check

struct GradCheckReport {
  double beliefs_max_error = 0.0;
  double weights_max_error = 0.0;
  std::size_t belief_probes = 0;
  std::size_t weight_probes = 0;
  std::size_t rejected_probes = 0;  // discarded near relu kinks
};

struct GradCheckOptions {
  std::size_t num_probes = 20;
  std::uint64_t seed = 0;
  double step = 1e-5;
  double kink_margin = 1e-3;
  /// Multiplier on the analytic gradients before comparison. Anything but 1
  /// deliberately breaks them; used to check that the checker itself fails.
  double analytic_scale = 1.0;
};

/// |a − b| / max(|a|, |b|, 1): relative above unit magnitude, absolute below.
inline double scaled_error(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1.0}); }

/// Central-difference probes on seeded random coordinates of p and of the
/// trainable weights. Requires interior beliefs (entries ≥ 1e-6).
inline GradCheckReport finite_difference_report(const EnergyModel& model, std::span<const double> x,
                                                const BeliefVector& p, const GradCheckOptions& opt = {}) {
  for (double v : p.values)
    if (v < 1e-6) throw InvalidArgument("finite-difference check needs interior beliefs (entries >= 1e-6)");
  GradCheckReport rep;
  std::mt19937_64 rng(opt.seed);
  const double h = opt.step;
  const std::size_t max_attempts = 50 * opt.num_probes + 100;

  const BoundEnergy bound = model.bind(x);
  ScoreVector gb = bound.grad_beliefs(p);
  for (double& v : gb.values) v *= opt.analytic_scale;
  std::uniform_int_distribution<std::size_t> pick_b(0, p.size() - 1);
  for (std::size_t attempt = 0; rep.belief_probes < opt.num_probes && attempt < max_attempts; ++attempt) {
    const std::size_t i = pick_b(rng);
    BeliefVector pp = p, pm = p;
    pp[i] += h;
    pm[i] -= h;
    if (std::min(bound.min_relu_margin(pp), bound.min_relu_margin(pm)) < opt.kink_margin) {
      ++rep.rejected_probes;
      continue;
    }
    const double fd = (bound.value(pp) - bound.value(pm)) / (2 * h);
    rep.beliefs_max_error = std::max(rep.beliefs_max_error, scaled_error(fd, gb[i]));
    ++rep.belief_probes;
  }

  std::vector<std::size_t> trainable;
  const auto mask = model.trainable_mask();
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) trainable.push_back(i);
  if (trainable.empty()) return rep;
  auto gw = bound.grad_weights(p);
  for (double& v : gw) v *= opt.analytic_scale;
  EnergyModel probe = model;
  std::uniform_int_distribution<std::size_t> pick_w(0, trainable.size() - 1);
  for (std::size_t attempt = 0; rep.weight_probes < opt.num_probes && attempt < max_attempts; ++attempt) {
    const std::size_t i = trainable[pick_w(rng)];
    const double w0 = probe.weights()[i];
    probe.weights()[i] = w0 + h;
    const BoundEnergy bp = probe.bind(x);
    const double vp = bp.value(p), mp = bp.min_relu_margin(p);
    probe.weights()[i] = w0 - h;
    const BoundEnergy bm = probe.bind(x);
    const double vm = bm.value(p), mm = bm.min_relu_margin(p);
    probe.weights()[i] = w0;
    if (std::min(mp, mm) < opt.kink_margin) {
      ++rep.rejected_probes;
      continue;
    }
    rep.weights_max_error = std::max(rep.weights_max_error, scaled_error((vp - vm) / (2 * h), gw[i]));
    ++rep.weight_probes;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json mlp_spec_to_json(const MlpSpec& s) {
  nlohmann::json acts = nlohmann::json::array();
  for (auto a : s.activations) acts.push_back(to_string(a));
  return {{"hidden", s.hidden}, {"activations", acts}};
}

inline MlpSpec mlp_spec_from_json(const nlohmann::json& j, const std::string& where) {
  MlpSpec s;
  try {
    if (j.contains("hidden")) s.hidden = j.at("hidden").get<std::vector<std::size_t>>();
    if (j.contains("activations"))
      for (const auto& a : j.at("activations")) s.activations.push_back(parse_activation(a.get<std::string>()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where, e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(where, e.what());
  }
  return s;
}

inline nlohmann::json model_spec_to_json(const ModelSpec& s) {
  const char* umode[] = {"none", "per-variable", "global"};
  const char* pmode[] = {"none", "table", "conditioned"};
  nlohmann::json t = mlp_spec_to_json(s.t.net);
  t["include_potentials"] = s.t.include_potentials;
  t["beliefs"] = s.t.beliefs == TBeliefs::all ? "all" : "unary";
  nlohmann::json u = mlp_spec_to_json(s.unary.net);
  u["mode"] = umode[static_cast<int>(s.unary.mode)];
  u["zero_label_fixed"] = s.unary.zero_label_fixed;
  nlohmann::json p = mlp_spec_to_json(s.pairwise.net);
  p["mode"] = pmode[static_cast<int>(s.pairwise.mode)];
  return {{"kind", to_string(s.kind)}, {"feature_dim", s.feature_dim}, {"unary", u}, {"pairwise", p}, {"T", t}};
}

/// Missing keys keep their defaults.
inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  try {
    if (!j.is_object()) throw FormatError("model", "expected an object");
    if (j.contains("kind")) s.kind = parse_energy_kind(j.at("kind").get<std::string>());
    if (j.contains("feature_dim")) s.feature_dim = j.at("feature_dim").get<std::size_t>();
    if (j.contains("unary")) {
      const auto& u = j.at("unary");
      s.unary.net = mlp_spec_from_json(u, "model.unary");
      if (u.contains("mode")) {
        const auto m = u.at("mode").get<std::string>();
        if (m == "none") s.unary.mode = UnaryMode::none;
        else if (m == "per-variable") s.unary.mode = UnaryMode::per_variable;
        else if (m == "global") s.unary.mode = UnaryMode::global;
        else throw FormatError("model.unary.mode", "unknown mode '" + m + "'");
      }
      if (u.contains("zero_label_fixed")) s.unary.zero_label_fixed = u.at("zero_label_fixed").get<bool>();
    }
    if (j.contains("pairwise")) {
      const auto& p = j.at("pairwise");
      s.pairwise.net = mlp_spec_from_json(p, "model.pairwise");
      if (p.contains("mode")) {
        const auto m = p.at("mode").get<std::string>();
        if (m == "none") s.pairwise.mode = PairwiseMode::none;
        else if (m == "table") s.pairwise.mode = PairwiseMode::table;
        else if (m == "conditioned") s.pairwise.mode = PairwiseMode::conditioned;
        else throw FormatError("model.pairwise.mode", "unknown mode '" + m + "'");
      }
    }
    if (j.contains("T")) {
      const auto& t = j.at("T");
      s.t.net = mlp_spec_from_json(t, "model.T");
      if (t.contains("include_potentials")) s.t.include_potentials = t.at("include_potentials").get<bool>();
      if (t.contains("beliefs")) {
        const auto b = t.at("beliefs").get<std::string>();
        if (b == "all") s.t.beliefs = TBeliefs::all;
        else if (b == "unary") s.t.beliefs = TBeliefs::unary;
        else throw FormatError("model.T.beliefs", "expected 'all' or 'unary'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("model", e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError("model", e.what());
  }
  return s;
}

inline nlohmann::json checkpoint_to_json(const EnergyModel& m) {
  nlohmann::json slices = nlohmann::json::array();
  for (const auto& s : m.slices()) slices.push_back({{"name", s.name}, {"offset", s.offset}, {"size", s.size}});
  return {{"version", 1},
          {"model", model_spec_to_json(m.spec())},
          {"graph", graph_to_json(m.graph())},
          {"slices", slices},
          {"frozen", m.frozen()},
          {"weights", std::vector<double>(m.weights().begin(), m.weights().end())}};
}

/// Rebuilds a model and checks it against `expected` (when given).
inline EnergyModel checkpoint_from_json(const nlohmann::json& j, const RegionGraph* expected = nullptr) {
  try {
    if (j.at("version").get<int>() != 1) throw FormatError("checkpoint", "unsupported version");
    const RegionGraph g = graph_from_json(j.at("graph"));
    if (expected && !(g == *expected)) throw FormatError("checkpoint", "region graph does not match the task");
    EnergyModel m(model_spec_from_json(j.at("model")), g);
    const auto w = j.at("weights").get<std::vector<double>>();
    if (w.size() != m.num_weights())
      throw FormatError("checkpoint", "weight vector has " + std::to_string(w.size()) + " entries, expected " +
                                          std::to_string(m.num_weights()));
    const auto& js = j.at("slices");
    if (js.size() != m.slices().size()) throw FormatError("checkpoint", "slice registry mismatch");
    for (std::size_t i = 0; i < js.size(); ++i) {
      const WeightSlice s{js[i].at("name").get<std::string>(), js[i].at("offset").get<std::size_t>(),
                          js[i].at("size").get<std::size_t>()};
      if (!(s == m.slices()[i])) throw FormatError("checkpoint", "slice '" + s.name + "' does not match the model layout");
    }
    for (double v : w)
      if (!std::isfinite(v)) throw FormatError("checkpoint", "non-finite weight");
    std::copy(w.begin(), w.end(), m.weights().begin());
    m.set_frozen(j.value("frozen", std::set<std::string>{}));
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint", e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError("checkpoint", e.what());
  }
}

}  // namespace gspen
