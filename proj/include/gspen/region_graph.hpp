#pragma once

// Region graphs over discrete variables, the flat belief/score layout shared by
// every module, local-polytope checks and fractional entropies.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gspen/errors.hpp"

namespace gspen {

/// Flat per-region table vector. The tag keeps beliefs and scores from being
/// mixed up by accident; both share the RegionGraph layout.
template <class Tag>
struct FlatVector {
  std::vector<double> values;

  FlatVector() = default;
  explicit FlatVector(std::size_t n, double fill = 0.0) : values(n, fill) {}
  explicit FlatVector(std::vector<double> v) : values(std::move(v)) {}

  std::size_t size() const { return values.size(); }
  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }
  std::span<double> span() { return values; }
  std::span<const double> span() const { return values; }

  bool operator==(const FlatVector&) const = default;
};

struct BeliefTag {};
struct ScoreTag {};
using BeliefVector = FlatVector<BeliefTag>;
using ScoreVector = FlatVector<ScoreTag>;

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InvalidArgument("dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double dot(const ScoreVector& s, const BeliefVector& p) {
  return dot(s.span(), p.span());
}

/// A (parent, child) pair with child ⊂ parent. `child_index[j]` is the child
/// assignment index that parent assignment j restricts to.
struct ContainmentEdge {
  std::size_t parent = 0;
  std::size_t child = 0;
  std::vector<std::size_t> child_index;
};

class RegionGraph {
 public:
  RegionGraph() = default;

  RegionGraph(std::vector<int> domains, std::vector<std::vector<int>> regions)
      : domains_(std::move(domains)), regions_(std::move(regions)) {
    validate_and_index();
  }

  std::size_t num_variables() const { return domains_.size(); }
  const std::vector<int>& domains() const { return domains_; }
  int domain_size(std::size_t k) const { return domains_.at(k); }

  std::size_t num_regions() const { return regions_.size(); }
  const std::vector<std::vector<int>>& regions() const { return regions_; }
  const std::vector<int>& region_vars(std::size_t r) const { return regions_.at(r); }
  bool is_unary(std::size_t r) const { return regions_[r].size() == 1; }

  std::size_t table_size(std::size_t r) const { return table_sizes_[r]; }
  std::size_t offset(std::size_t r) const { return offsets_[r]; }
  std::size_t flat_size() const { return flat_size_; }

  /// Index of the single-variable region {k}.
  std::size_t unary_region(std::size_t k) const { return unary_of_.at(k); }

  const std::vector<ContainmentEdge>& containment_edges() const { return edges_; }
  /// Edge indices where region r is the child / the parent.
  const std::vector<std::size_t>& edges_into(std::size_t r) const { return edges_into_[r]; }
  const std::vector<std::size_t>& edges_out_of(std::size_t r) const { return edges_out_[r]; }

  /// Number of regions of size >= 2 that contain variable k.
  std::size_t factor_degree(std::size_t k) const { return degree_[k]; }

  /// True iff the factor graph formed by regions of size >= 2 has no cycle.
  bool is_acyclic() const { return acyclic_; }

  /// Labels of region r's variables for within-region assignment `index`.
  std::vector<int> assignment_labels(std::size_t r, std::size_t index) const {
    const auto& vars = regions_[r];
    std::vector<int> labels(vars.size());
    for (std::size_t i = vars.size(); i-- > 0;) {
      const auto d = static_cast<std::size_t>(domains_[vars[i]]);
      labels[i] = static_cast<int>(index % d);
      index /= d;
    }
    return labels;
  }

  /// Within-region assignment index of a full labeling restricted to region r.
  std::size_t assignment_index(std::size_t r, std::span<const int> labeling) const {
    std::size_t index = 0;
    for (int v : regions_[r]) index = index * domains_[v] + static_cast<std::size_t>(labeling[v]);
    return index;
  }

  bool operator==(const RegionGraph& o) const {
    return domains_ == o.domains_ && regions_ == o.regions_;
  }

 private:
  void validate_and_index();

  std::vector<int> domains_;
  std::vector<std::vector<int>> regions_;
  std::vector<std::size_t> table_sizes_;
  std::vector<std::size_t> offsets_;
  std::size_t flat_size_ = 0;
  std::vector<std::size_t> unary_of_;
  std::vector<ContainmentEdge> edges_;
  std::vector<std::vector<std::size_t>> edges_into_;
  std::vector<std::vector<std::size_t>> edges_out_;
  std::vector<std::size_t> degree_;
  bool acyclic_ = true;
};

inline void RegionGraph::validate_and_index() {
  const std::size_t K = domains_.size();
  if (K == 0) throw InvalidArgument("region graph: no variables");
  for (int d : domains_)
    if (d < 1) throw InvalidArgument("region graph: domain size must be >= 1");

  const std::size_t none = static_cast<std::size_t>(-1);
  unary_of_.assign(K, none);
  degree_.assign(K, 0);
  table_sizes_.clear();
  offsets_.clear();
  flat_size_ = 0;
  for (std::size_t r = 0; r < regions_.size(); ++r) {
    const auto& vars = regions_[r];
    if (vars.empty()) throw InvalidArgument("region " + std::to_string(r) + " is empty");
    for (std::size_t i = 0; i < vars.size(); ++i) {
      if (vars[i] < 0 || static_cast<std::size_t>(vars[i]) >= K)
        throw InvalidArgument("region " + std::to_string(r) + ": variable out of range");
      if (i > 0 && vars[i] <= vars[i - 1])
        throw InvalidArgument("region " + std::to_string(r) + ": variables must be sorted and unique");
    }
    if (vars.size() == 1) {
      if (unary_of_[vars[0]] != none)
        throw InvalidArgument("variable " + std::to_string(vars[0]) + " has more than one unary region");
      unary_of_[vars[0]] = r;
    } else {
      for (int v : vars) ++degree_[v];
    }
    std::size_t size = 1;
    for (int v : vars) size *= static_cast<std::size_t>(domains_[v]);
    offsets_.push_back(flat_size_);
    table_sizes_.push_back(size);
    flat_size_ += size;
  }
  for (std::size_t k = 0; k < K; ++k)
    if (unary_of_[k] == none)
      throw InvalidArgument("variable " + std::to_string(k) + " has no unary region");

  edges_.clear();
  edges_into_.assign(regions_.size(), {});
  edges_out_.assign(regions_.size(), {});
  for (std::size_t p = 0; p < regions_.size(); ++p) {
    for (std::size_t c = 0; c < regions_.size(); ++c) {
      const auto& pv = regions_[p];
      const auto& cv = regions_[c];
      if (p == c || cv.size() >= pv.size()) continue;
      if (!std::includes(pv.begin(), pv.end(), cv.begin(), cv.end())) continue;
      ContainmentEdge e{p, c, std::vector<std::size_t>(table_sizes_[p])};
      // Position of each child variable inside the parent.
      std::vector<std::size_t> pos;
      for (int v : cv) pos.push_back(static_cast<std::size_t>(std::find(pv.begin(), pv.end(), v) - pv.begin()));
      for (std::size_t j = 0; j < table_sizes_[p]; ++j) {
        const auto labels = assignment_labels(p, j);
        std::size_t idx = 0;
        for (std::size_t i = 0; i < cv.size(); ++i) idx = idx * domains_[cv[i]] + labels[pos[i]];
        e.child_index[j] = idx;
      }
      edges_into_[c].push_back(edges_.size());
      edges_out_[p].push_back(edges_.size());
      edges_.push_back(std::move(e));
    }
  }

  // Union-find over variable nodes and factor nodes.
  std::vector<std::size_t> parent(K + regions_.size());
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  acyclic_ = true;
  for (std::size_t r = 0; r < regions_.size() && acyclic_; ++r) {
    if (regions_[r].size() < 2) continue;
    for (int v : regions_[r]) {
      auto a = find(K + r), b = find(static_cast<std::size_t>(v));
      if (a == b) {
        acyclic_ = false;
        break;
      }
      parent[a] = b;
    }
  }
}

namespace detail {
inline void check_domains(std::size_t K, const std::vector<int>& domain_sizes) {
  if (K == 0) throw InvalidArgument("graph builder: K must be >= 1");
  if (domain_sizes.size() != K) throw InvalidArgument("graph builder: need one domain size per variable");
  for (int d : domain_sizes)
    if (d < 1) throw InvalidArgument("graph builder: empty domain");
}

inline std::vector<std::vector<int>> unary_regions(std::size_t K) {
  std::vector<std::vector<int>> regions;
  for (std::size_t k = 0; k < K; ++k) regions.push_back({static_cast<int>(k)});
  return regions;
}
}  // namespace detail

/// Unary regions only (the SPEN / independent-variable layout).
inline RegionGraph build_unary_graph(std::size_t K, const std::vector<int>& domain_sizes) {
  detail::check_domains(K, domain_sizes);
  return RegionGraph(domain_sizes, detail::unary_regions(K));
}

inline RegionGraph build_chain_graph(std::size_t K, const std::vector<int>& domain_sizes) {
  detail::check_domains(K, domain_sizes);
  auto regions = detail::unary_regions(K);
  for (std::size_t k = 0; k + 1 < K; ++k) regions.push_back({static_cast<int>(k), static_cast<int>(k + 1)});
  return RegionGraph(domain_sizes, std::move(regions));
}

inline RegionGraph build_star_graph(std::size_t K, std::size_t hub, const std::vector<int>& domain_sizes) {
  detail::check_domains(K, domain_sizes);
  if (hub >= K) throw InvalidArgument("star graph: hub out of range");
  auto regions = detail::unary_regions(K);
  for (std::size_t k = 0; k < K; ++k) {
    if (k == hub) continue;
    regions.push_back({static_cast<int>(std::min(k, hub)), static_cast<int>(std::max(k, hub))});
  }
  return RegionGraph(domain_sizes, std::move(regions));
}

inline RegionGraph build_full_pairwise_graph(std::size_t K, const std::vector<int>& domain_sizes) {
  if (K < 2) throw InvalidArgument("full pairwise graph: K must be >= 2");
  detail::check_domains(K, domain_sizes);
  auto regions = detail::unary_regions(K);
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = i + 1; j < K; ++j) regions.push_back({static_cast<int>(i), static_cast<int>(j)});
  return RegionGraph(domain_sizes, std::move(regions));
}

// ---------------------------------------------------------------------------
// Beliefs

inline BeliefVector uniform_beliefs(const RegionGraph& g) {
  BeliefVector p(g.flat_size());
  for (std::size_t r = 0; r < g.num_regions(); ++r) {
    const double v = 1.0 / static_cast<double>(g.table_size(r));
    std::fill_n(p.values.begin() + static_cast<std::ptrdiff_t>(g.offset(r)), g.table_size(r), v);
  }
  return p;
}

inline void check_labeling(const RegionGraph& g, std::span<const int> labeling) {
  if (labeling.size() != g.num_variables()) throw InvalidArgument("labeling length must equal number of variables");
  for (std::size_t k = 0; k < labeling.size(); ++k)
    if (labeling[k] < 0 || labeling[k] >= g.domain_size(k))
      throw InvalidArgument("label out of domain at variable " + std::to_string(k));
}

inline BeliefVector one_hot_beliefs(const RegionGraph& g, std::span<const int> labeling) {
  check_labeling(g, labeling);
  BeliefVector p(g.flat_size());
  for (std::size_t r = 0; r < g.num_regions(); ++r) p[g.offset(r) + g.assignment_index(r, labeling)] = 1.0;
  return p;
}

struct ViolationReport {
  double normalization = 0.0;
  double nonnegativity = 0.0;
  double marginalization = 0.0;

  double max() const { return std::max({normalization, nonnegativity, marginalization}); }
  bool feasible(double tol = 1e-6) const { return max() <= tol; }
};

inline ViolationReport check_local_polytope(const BeliefVector& p, const RegionGraph& g) {
  if (p.size() != g.flat_size()) throw InvalidArgument("check_local_polytope: layout mismatch");
  ViolationReport rep;
  for (std::size_t r = 0; r < g.num_regions(); ++r) {
    double sum = 0.0;
    for (std::size_t j = 0; j < g.table_size(r); ++j) {
      const double v = p[g.offset(r) + j];
      sum += v;
      rep.nonnegativity = std::max(rep.nonnegativity, -v);
    }
    rep.normalization = std::max(rep.normalization, std::abs(sum - 1.0));
  }
  for (const auto& e : g.containment_edges()) {
    std::vector<double> marg(g.table_size(e.child), 0.0);
    for (std::size_t j = 0; j < e.child_index.size(); ++j) marg[e.child_index[j]] += p[g.offset(e.parent) + j];
    for (std::size_t i = 0; i < marg.size(); ++i)
      rep.marginalization = std::max(rep.marginalization, std::abs(marg[i] - p[g.offset(e.child) + i]));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Fractional entropy

enum class CountingPreset { paper, bethe };

struct CountingNumbers {
  std::vector<double> values;
};

/// "paper": every region weighted 1. "bethe": c_r = 1 - sum of c over strict
/// super-regions, which gives 1 for pairs and 1 - degree for unaries.
/// Bethe unary coefficients may be negative.
inline CountingNumbers make_counting(const RegionGraph& g, CountingPreset preset) {
  CountingNumbers c{std::vector<double>(g.num_regions(), 1.0)};
  if (preset == CountingPreset::paper) return c;
  std::vector<std::size_t> order(g.num_regions());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return g.region_vars(a).size() > g.region_vars(b).size();
  });
  for (std::size_t r : order) {
    double s = 0.0;
    for (std::size_t e : g.edges_into(r)) s += c.values[g.containment_edges()[e].parent];
    c.values[r] = 1.0 - s;
  }
  return c;
}

inline constexpr double kLogClamp = 1e-30;

inline double fractional_entropy(const BeliefVector& p, const RegionGraph& g, const CountingNumbers& c) {
  if (p.size() != g.flat_size() || c.values.size() != g.num_regions())
    throw InvalidArgument("fractional_entropy: layout mismatch");
  double h = 0.0;
  for (std::size_t r = 0; r < g.num_regions(); ++r) {
    double hr = 0.0;
    for (std::size_t j = 0; j < g.table_size(r); ++j) {
      const double v = p[g.offset(r) + j];
      if (v < 0.0) throw InvalidArgument("fractional_entropy: negative belief entry");
      if (v > 0.0) hr -= v * std::log(v);
    }
    h += c.values[r] * hr;
  }
  return h;
}

/// Entry (r, y_r) = c_r * (-ln b_r(y_r) - 1), beliefs clamped at kLogClamp.
inline ScoreVector entropy_gradient(const BeliefVector& p, const RegionGraph& g, const CountingNumbers& c) {
  if (p.size() != g.flat_size() || c.values.size() != g.num_regions())
    throw InvalidArgument("entropy_gradient: layout mismatch");
  ScoreVector out(g.flat_size());
  for (std::size_t r = 0; r < g.num_regions(); ++r)
    for (std::size_t j = 0; j < g.table_size(r); ++j) {
      const std::size_t i = g.offset(r) + j;
      out[i] = c.values[r] * (-std::log(std::max(p[i], kLogClamp)) - 1.0);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization: {"version":1, "domains":[...], "regions":[[...],...]}

inline nlohmann::json graph_to_json(const RegionGraph& g) {
  return {{"version", 1}, {"domains", g.domains()}, {"regions", g.regions()}};
}

inline RegionGraph graph_from_json(const nlohmann::json& j) {
  if (!j.is_object() || j.value("version", 0) != 1) throw FormatError("graph", "expected version 1 graph document");
  try {
    return RegionGraph(j.at("domains").get<std::vector<int>>(), j.at("regions").get<std::vector<std::vector<int>>>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("graph", e.what());
  }
}

}  // namespace gspen
