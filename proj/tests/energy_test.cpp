#include <gtest/gtest.h>

#include <random>

#include "gspen/energy.hpp"
#include "oracles.hpp"

namespace gspen {
namespace {

using testing::random_interior;

std::vector<double> random_features(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> x(n);
  for (auto& v : x) v = nd(rng);
  return x;
}

void randomize(EnergyModel& m, std::mt19937_64& rng, double scale = 0.5) {
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& w : m.weights()) w = u(rng);
}

ModelSpec chain_spec(EnergyKind kind, std::size_t d) {
  ModelSpec s;
  s.kind = kind;
  s.feature_dim = 3 * d;
  s.unary.mode = UnaryMode::per_variable;
  s.pairwise.mode = PairwiseMode::table;
  s.t.net.hidden = {6, 4};
  s.t.net.activations = {Activation::softplus};
  return s;
}

TEST(Mlp, LayoutIsContiguous) {
  MlpSpec s{{4, 3}, {Activation::relu}};
  Mlp m(5, s, 2, 7);
  EXPECT_EQ(m.num_weights(), 5u * 4 + 4 + 4 * 3 + 3 + 3 * 2 + 2);
  EXPECT_EQ(m.layers()[0].weight_offset, 7u);
  EXPECT_EQ(m.layers()[2].bias_offset + 2, 7 + m.num_weights());
}

TEST(Mlp, SoftplusIsStable) {
  EXPECT_DOUBLE_EQ(softplus(800.0), 800.0);
  EXPECT_GT(softplus(-800.0), -1e-300);
  EXPECT_NEAR(softplus(0.0), std::log(2.0), 1e-15);
}

TEST(Mlp, HandEvaluatedForward) {
  // One hidden relu unit: y = 2 * relu(x0 - x1 + 0.5) - 1.
  Mlp m(2, MlpSpec{{1}, {Activation::relu}}, 1, 0);
  std::vector<double> w = {1.0, -1.0, 0.5, 2.0, -1.0};
  EXPECT_DOUBLE_EQ(m.forward(w, std::vector<double>{1.0, 0.0})[0], 2.0);
  EXPECT_DOUBLE_EQ(m.forward(w, std::vector<double>{0.0, 1.0})[0], -1.0);
}

TEST(Energy, SliceRegistryPartitionsWeights) {
  const auto g = build_chain_graph(3, {3, 3, 3});
  for (auto kind : {EnergyKind::linear, EnergyKind::gspen_sum, EnergyKind::hadamard}) {
    EnergyModel m(chain_spec(kind, 4), g);
    std::size_t next = 0;
    for (const auto& s : m.slices()) {
      EXPECT_EQ(s.offset, next) << s.name;
      next += s.size;
    }
    EXPECT_EQ(next, m.num_weights());
  }
}

TEST(Energy, ZeroWeightsGiveZeroPotentials) {
  const auto g = build_chain_graph(3, {3, 3, 3});
  EnergyModel m(chain_spec(EnergyKind::linear, 4), g);
  std::fill(m.weights().begin(), m.weights().end(), 0.0);
  std::mt19937_64 rng(1);
  const auto f = m.potentials(random_features(12, rng));
  for (double v : f.values) EXPECT_EQ(v, 0.0);
}

TEST(Energy, TablePotentialEqualsStoredWeight) {
  const auto g = build_chain_graph(3, {2, 3, 4});
  ModelSpec s;
  s.kind = EnergyKind::linear;
  s.unary.mode = UnaryMode::none;
  EnergyModel m(s, g);
  auto table = m.slice_values("pairwise.table");
  for (std::size_t i = 0; i < table.size(); ++i) table[i] = 0.25 * static_cast<double>(i) - 1.0;
  const auto f = m.potentials({});
  // Region 4 is (1,2); assignment (a=2, b=3) is entry 2*4+3 of its table, after the 6 entries of (0,1).
  EXPECT_EQ(f[g.offset(4) + 2 * 4 + 3], table[6 + 11]);
  for (std::size_t k = 0; k < 3; ++k)
    for (int y = 0; y < g.domain_size(k); ++y) EXPECT_EQ(f[g.offset(k) + static_cast<std::size_t>(y)], 0.0);
}

TEST(Energy, FreshTablesStartAtZero) {
  const auto g = build_chain_graph(3, {3, 3, 3});
  EnergyModel m(chain_spec(EnergyKind::gspen_sum, 2), g, 17);
  for (double v : m.slice_values("pairwise.table")) EXPECT_EQ(v, 0.0);
  for (double v : m.slice_values("T.2.W")) EXPECT_EQ(v, 0.0);
  bool any = false;
  for (double v : m.slice_values("unary.0.W")) any |= v != 0.0;
  EXPECT_TRUE(any);
}

TEST(Energy, LinearOneHotIsSumOfSelectedPotentials) {
  const auto g = build_chain_graph(3, {3, 3, 3});
  EnergyModel m(chain_spec(EnergyKind::linear, 4), g);
  std::mt19937_64 rng(2);
  randomize(m, rng);
  const auto x = random_features(12, rng);
  const std::vector<int> y = {2, 0, 1};
  const auto f = m.potentials(x);
  const double expect = testing::enumerate_score(g, f, y);
  EXPECT_NEAR(m.energy_value(x, one_hot_beliefs(g, y)), expect, 1e-12);
}

TEST(Energy, LinearBeliefGradientIsPotentials) {
  const auto g = build_chain_graph(3, {3, 3, 3});
  EnergyModel m(chain_spec(EnergyKind::linear, 4), g);
  std::mt19937_64 rng(3);
  randomize(m, rng);
  const auto x = random_features(12, rng);
  const auto f = m.potentials(x);
  EXPECT_EQ(m.grad_beliefs(x, random_interior(g, rng)), f);
  EXPECT_EQ(m.grad_beliefs(x, uniform_beliefs(g)), f);
}

TEST(Energy, LinearWeightGradientOnTwoVariableChain) {
  // Unary: linear generator per variable on d = 1 features, F = Σ_k W[y_k] x_k + b[y_k] + table[y_0, y_1].
  const auto g = build_chain_graph(2, {2, 2});
  ModelSpec s;
  s.kind = EnergyKind::linear;
  s.feature_dim = 2;
  EnergyModel m(s, g);
  const std::vector<double> x = {1.5, -2.0};
  const auto gw = m.grad_weights(x, one_hot_beliefs(g, std::vector<int>{1, 0}));
  // Layout: unary.0.W [label][input], unary.0.b [label], pairwise.table [y0][y1].
  // The generator is shared: W[0] sees x_1 (variable 1 at label 0), W[1] sees x_0.
  const std::vector<double> expect = {-2.0, 1.5, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0};
  EXPECT_EQ(gw, expect);
}

TEST(Energy, GspenSumWithZeroMlpReducesToLinear) {
  const auto g = build_chain_graph(3, {3, 3, 3});
  EnergyModel lin(chain_spec(EnergyKind::linear, 4), g);
  EnergyModel gs(chain_spec(EnergyKind::gspen_sum, 4), g);
  std::mt19937_64 rng(4);
  randomize(lin, rng);
  gs.copy_slices_from(lin, {"unary", "pairwise"});
  for (auto& w : gs.weights().subspan(lin.num_weights())) w = 0.0;
  const auto x = random_features(12, rng);
  for (int trial = 0; trial < 5; ++trial) {
    const auto p = random_interior(g, rng);
    EXPECT_EQ(gs.energy_value(x, p), lin.energy_value(x, p));
    EXPECT_EQ(gs.grad_beliefs(x, p), lin.grad_beliefs(x, p));
    const auto a = gs.grad_weights(x, p), b = lin.grad_weights(x, p);
    for (std::size_t i = 0; i < b.size(); ++i) EXPECT_EQ(a[i], b[i]);
  }
}

TEST(Energy, HadamardWithSumNetworkEqualsLinearAtVertices) {
  const auto g = build_chain_graph(3, {3, 3, 3});
  ModelSpec hs = chain_spec(EnergyKind::hadamard, 4);
  hs.t.net.hidden.clear();
  EnergyModel had(hs, g);
  EnergyModel lin(chain_spec(EnergyKind::linear, 4), g);
  std::mt19937_64 rng(5);
  randomize(lin, rng);
  had.copy_slices_from(lin, {"unary", "pairwise"});
  for (auto& w : had.slice_values("T.0.W")) w = 1.0;
  const auto x = random_features(12, rng);
  testing::for_each_labeling(g.domains(), [&](const std::vector<int>& y) {
    const auto p = one_hot_beliefs(g, y);
    EXPECT_NEAR(had.energy_value(x, p), lin.energy_value(x, p), 1e-12);
  });
}

TEST(Energy, AllFrozenGivesZeroGradient) {
  const auto g = build_chain_graph(3, {3, 3, 3});
  EnergyModel m(chain_spec(EnergyKind::gspen_sum, 4), g);
  std::mt19937_64 rng(6);
  randomize(m, rng);
  m.set_frozen({"unary", "pairwise", "T"});
  const auto gw = m.grad_weights(random_features(12, rng), random_interior(g, rng));
  for (double v : gw) EXPECT_EQ(v, 0.0);
}

TEST(Energy, PartialFreezeZeroesOnlyMatchingSlices) {
  const auto g = build_chain_graph(3, {3, 3, 3});
  EnergyModel m(chain_spec(EnergyKind::gspen_sum, 4), g);
  std::mt19937_64 rng(7);
  randomize(m, rng);
  const auto x = random_features(12, rng);
  const auto p = random_interior(g, rng);
  const auto full = m.grad_weights(x, p);
  m.set_frozen({"T"});
  const auto part = m.grad_weights(x, p);
  for (const auto& s : m.slices())
    for (std::size_t i = s.offset; i < s.offset + s.size; ++i) EXPECT_EQ(part[i], s.name[0] == 'T' ? 0.0 : full[i]);
  EXPECT_THROW(m.set_frozen({"Tx"}), InvalidArgument);
}

TEST(Energy, DimensionMismatchThrows) {
  const auto g = build_chain_graph(3, {3, 3, 3});
  EnergyModel m(chain_spec(EnergyKind::gspen_sum, 4), g);
  std::mt19937_64 rng(8);
  EXPECT_THROW(m.bind(random_features(11, rng)), InvalidArgument);
  const auto b = m.bind(random_features(12, rng));
  EXPECT_THROW(b.value(BeliefVector(5)), InvalidArgument);
  EXPECT_THROW(b.grad_beliefs(BeliefVector(5)), InvalidArgument);
}

TEST(Energy, NoLinearPartRejectsPotentials) {
  const auto g = build_unary_graph(3, {2, 2, 2});
  ModelSpec s;
  s.kind = EnergyKind::joint_mlp;
  s.unary.mode = UnaryMode::none;
  s.pairwise.mode = PairwiseMode::none;
  s.t.net.hidden = {4};
  EnergyModel m(s, g);
  EXPECT_THROW(m.potentials({}), UnsupportedOperation);
  s.kind = EnergyKind::linear;
  EXPECT_THROW(EnergyModel(s, g), InvalidArgument);
}

TEST(Energy, InvalidSpecsAreRejected) {
  const auto g = build_chain_graph(3, {3, 3, 3});
  ModelSpec s = chain_spec(EnergyKind::linear, 4);
  s.feature_dim = 13;
  EXPECT_THROW(EnergyModel(s, g), InvalidArgument);
  s = chain_spec(EnergyKind::joint_mlp, 4);
  EXPECT_THROW(EnergyModel(s, g), InvalidArgument);  // pairwise not allowed
  s.unary.mode = UnaryMode::global;
  s.unary.zero_label_fixed = true;
  s.pairwise.mode = PairwiseMode::none;
  EXPECT_THROW(EnergyModel(s, g), InvalidArgument);  // needs binary domains
}

struct KindCase {
  const char* name;
  ModelSpec spec;
  RegionGraph graph;
};

std::vector<KindCase> gradient_cases() {
  std::vector<KindCase> cases;
  const auto chain = build_chain_graph(3, {3, 3, 3});
  cases.push_back({"linear", chain_spec(EnergyKind::linear, 4), chain});
  cases.push_back({"gspen-sum", chain_spec(EnergyKind::gspen_sum, 4), chain});
  auto beliefs_only = chain_spec(EnergyKind::gspen_sum, 4);
  beliefs_only.t.include_potentials = false;
  cases.push_back({"gspen-sum-beliefs-only", beliefs_only, chain});
  cases.push_back({"hadamard", chain_spec(EnergyKind::hadamard, 4), chain});
  auto spen = chain_spec(EnergyKind::joint_mlp, 4);
  spen.pairwise.mode = PairwiseMode::none;
  cases.push_back({"joint-mlp", spen, build_unary_graph(3, {3, 3, 3})});

  ModelSpec ml;
  ml.kind = EnergyKind::gspen_sum;
  ml.feature_dim = 6;
  ml.unary.mode = UnaryMode::global;
  ml.unary.zero_label_fixed = true;
  ml.unary.net.hidden = {5};
  ml.pairwise.mode = PairwiseMode::conditioned;
  ml.pairwise.net.hidden = {4};
  ml.t.net.hidden = {5};
  cases.push_back({"multilabel-conditioned", ml, build_full_pairwise_graph(4, {2, 2, 2, 2})});

  auto relu = chain_spec(EnergyKind::gspen_sum, 4);
  relu.unary.net.hidden = {5};
  relu.unary.net.activations = {Activation::relu};
  relu.t.net.activations = {Activation::relu};
  cases.push_back({"relu-gspen-sum", relu, chain});
  return cases;
}

TEST(Energy, FiniteDifferencesMatchForEveryKind) {
  std::mt19937_64 rng(9);
  for (auto& c : gradient_cases()) {
    EnergyModel m(c.spec, c.graph);
    randomize(m, rng, 0.7);
    const auto x = random_features(c.spec.feature_dim, rng);
    const auto p = random_interior(c.graph, rng, 1e-3);
    const auto rep = finite_difference_report(m, x, p, {.num_probes = 100, .seed = 3});
    EXPECT_EQ(rep.belief_probes, 100u) << c.name;
    EXPECT_EQ(rep.weight_probes, 100u) << c.name;
    EXPECT_LE(rep.beliefs_max_error, 1e-6) << c.name;
    EXPECT_LE(rep.weights_max_error, 1e-6) << c.name;
  }
}

TEST(Energy, LinearFiniteDifferencesAreExact) {
  const auto g = build_chain_graph(3, {3, 3, 3});
  EnergyModel m(chain_spec(EnergyKind::linear, 4), g);
  std::mt19937_64 rng(10);
  randomize(m, rng);
  const auto rep = finite_difference_report(m, random_features(12, rng), random_interior(g, rng));
  EXPECT_LE(rep.beliefs_max_error, 1e-10);
  EXPECT_LE(rep.weights_max_error, 1e-10);
}

TEST(Energy, ReportIsDeterministicAndRequiresInteriorBeliefs) {
  const auto g = build_chain_graph(3, {3, 3, 3});
  EnergyModel m(chain_spec(EnergyKind::gspen_sum, 4), g);
  std::mt19937_64 rng(11);
  randomize(m, rng);
  const auto x = random_features(12, rng);
  const auto p = random_interior(g, rng);
  const auto a = finite_difference_report(m, x, p, {.seed = 5});
  const auto b = finite_difference_report(m, x, p, {.seed = 5});
  EXPECT_EQ(a.beliefs_max_error, b.beliefs_max_error);
  EXPECT_EQ(a.weights_max_error, b.weights_max_error);
  EXPECT_THROW(finite_difference_report(m, x, one_hot_beliefs(g, std::vector<int>{0, 0, 0})), InvalidArgument);
}

TEST(Energy, GradientIntegratesToValueDifference) {
  // Trapezoid rule along a segment: ∫ ⟨∇F(p(t)), q − p⟩ dt = F(q) − F(p).
  const auto g = build_chain_graph(3, {3, 3, 3});
  EnergyModel m(chain_spec(EnergyKind::gspen_sum, 4), g);
  std::mt19937_64 rng(12);
  randomize(m, rng, 1.0);
  const auto x = random_features(12, rng);
  const auto b = m.bind(x);
  const auto p = random_interior(g, rng), q = random_interior(g, rng);
  const int steps = 10000;
  double integral = 0.0;
  for (int s = 0; s <= steps; ++s) {
    const double t = static_cast<double>(s) / steps;
    BeliefVector pt(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) pt[i] = (1 - t) * p[i] + t * q[i];
    const auto gr = b.grad_beliefs(pt);
    double d = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) d += gr[i] * (q[i] - p[i]);
    integral += (s == 0 || s == steps ? 0.5 : 1.0) * d / steps;
  }
  EXPECT_NEAR(integral, b.value(q) - b.value(p), 1e-5);
}

TEST(Energy, CheckpointRoundTripPreservesValues) {
  std::mt19937_64 rng(13);
  for (auto& c : gradient_cases()) {
    EnergyModel m(c.spec, c.graph);
    randomize(m, rng);
    m.set_frozen({"unary"});
    const auto text = checkpoint_to_json(m).dump();
    const EnergyModel back = checkpoint_from_json(nlohmann::json::parse(text), &c.graph);
    EXPECT_EQ(back.slices(), m.slices()) << c.name;
    EXPECT_EQ(back.frozen(), m.frozen()) << c.name;
    const auto x = random_features(c.spec.feature_dim, rng);
    const auto p = random_interior(c.graph, rng);
    EXPECT_EQ(back.energy_value(x, p), m.energy_value(x, p)) << c.name;
  }
}

TEST(Energy, CheckpointRejectsMismatchedGraph) {
  const auto g = build_chain_graph(3, {3, 3, 3});
  EnergyModel m(chain_spec(EnergyKind::linear, 4), g);
  auto j = checkpoint_to_json(m);
  const auto other = build_chain_graph(3, {3, 3, 4});
  EXPECT_THROW(checkpoint_from_json(j, &other), FormatError);
  j["weights"].erase(0);
  EXPECT_THROW(checkpoint_from_json(j), FormatError);
}

TEST(Energy, ValueInvariantUnderBeliefSerialization) {
  const auto g = build_chain_graph(3, {3, 3, 3});
  EnergyModel m(chain_spec(EnergyKind::hadamard, 4), g);
  std::mt19937_64 rng(14);
  randomize(m, rng);
  const auto x = random_features(12, rng);
  const auto p = random_interior(g, rng);
  const nlohmann::json j = p.values;
  const BeliefVector back{nlohmann::json::parse(j.dump()).get<std::vector<double>>()};
  EXPECT_EQ(m.energy_value(x, back), m.energy_value(x, p));
}

TEST(Energy, SpecJsonRoundTrip) {
  for (auto& c : gradient_cases()) {
    const auto j = model_spec_to_json(c.spec);
    EXPECT_EQ(model_spec_to_json(model_spec_from_json(j)), j) << c.name;
  }
  EXPECT_THROW(model_spec_from_json(nlohmann::json{{"kind", "quadratic"}}), FormatError);
}

}  // namespace
}  // namespace gspen
