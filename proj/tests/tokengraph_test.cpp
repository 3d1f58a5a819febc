#include "batrfst/tokengraph.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

using batr::graph_partition;
using batr::token_graph;
using td = batr::tensor<double>;

namespace {

batr::token_set<double> single_token_set(std::vector<double> v, std::size_t image_id) {
  batr::token_set<double> ts;
  std::size_t n = v.size();
  ts.tokens = td::from({1, n}, std::move(v));
  ts.image_id = image_id;
  return ts;
}

token_graph<double> graph_with_adjacency(std::size_t n, const std::vector<double>& adj) {
  token_graph<double> g;
  g.dim = 0;
  g.meta.resize(n);
  g.affinity.assign(n * n, 0.0);
  g.adjacency = adj;
  return g;
}

// Symmetric weights w become the graph's symmetrized adjacency by storing
// w/2 in both directions.
token_graph<double> graph_with_weights(std::size_t n, const std::vector<double>& w) {
  std::vector<double> adj(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) adj[i * n + j] = w[i * n + j] / 2.0;
  return graph_with_adjacency(n, adj);
}

// Oracle: exhaustive minimum cut over balanced bipartitions (sizes differ by
// at most one; node 0 pinned to one side to kill the mirror symmetry).
double exhaustive_balanced_min_cut(std::size_t n, const std::vector<double>& w) {
  std::size_t half = (n + 1) / 2;
  double best = std::numeric_limits<double>::infinity();
  for (std::uint32_t bits = 0; bits < (1u << n); ++bits) {
    if (bits & 1u) continue;  // node 0 stays on side 0
    std::size_t ones = static_cast<std::size_t>(__builtin_popcount(bits));
    if (ones != n / 2 && ones != half) continue;
    double cut = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        if (((bits >> i) & 1u) != ((bits >> j) & 1u)) cut += w[i * n + j];
    best = std::min(best, cut);
  }
  return best;
}

}  // namespace

TEST(BuildGraph, TwoIdenticalVectorsForcedNormalization) {
  auto a = single_token_set({1.0, 0.0}, 0);
  auto b = single_token_set({1.0, 0.0}, 1);
  std::vector<batr::graph_source<double>> src = {{&a, true, 0}, {&b, true, 1}};
  auto g = batr::build_graph(src);
  EXPECT_NEAR(g.adjacency_at(0, 1), 1.0, 1e-12);
  EXPECT_NEAR(g.adjacency_at(0, 0), 0.0, 1e-12);
  EXPECT_NEAR(g.adjacency_at(1, 0), 1.0, 1e-12);
}

TEST(BuildGraph, OrthogonalTriple) {
  auto a = single_token_set({1, 0, 0}, 0);
  auto b = single_token_set({0, 1, 0}, 1);
  auto c = single_token_set({0, 0, 1}, 2);
  std::vector<batr::graph_source<double>> src = {{&a, true, 0}, {&b, true, 1}, {&c, true, 2}};
  auto g = batr::build_graph(src);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      EXPECT_NEAR(g.adjacency_at(i, j), i == j ? 0.0 : 0.5, 1e-12);
}

TEST(BuildGraph, RowSumsOnRandomGraph) {
  batr::rng_stream rng(3, 1);
  std::vector<batr::token_set<double>> sets;
  for (int i = 0; i < 50; ++i) {
    batr::token_set<double> ts;
    ts.tokens = td::randn({1, 8}, rng, 2.0);
    ts.image_id = i;
    sets.push_back(std::move(ts));
  }
  std::vector<batr::graph_source<double>> src;
  for (auto& ts : sets) src.push_back({&ts, false, -1});
  auto g = batr::build_graph(src);
  for (std::size_t i = 0; i < g.size(); ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < g.size(); ++j) sum += g.adjacency_at(i, j);
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(BuildGraph, CosineScaleInvariance) {
  batr::rng_stream rng(5, 2);
  std::vector<batr::token_set<double>> sets, scaled;
  for (int i = 0; i < 10; ++i) {
    auto vals = td::randn({3, 6}, rng, 1.0);
    batr::token_set<double> ts;
    ts.tokens = vals;
    ts.image_id = i;
    sets.push_back(ts);
    std::vector<double> v = vals.values();
    for (auto& x : v) x *= 37.5;
    batr::token_set<double> ts2;
    ts2.tokens = td::from({3, 6}, std::move(v));
    ts2.image_id = i;
    scaled.push_back(std::move(ts2));
  }
  std::vector<batr::graph_source<double>> s1, s2;
  for (auto& ts : sets) s1.push_back({&ts, false, -1});
  for (auto& ts : scaled) s2.push_back({&ts, false, -1});
  auto g1 = batr::build_graph(s1);
  auto g2 = batr::build_graph(s2);
  for (std::size_t i = 0; i < g1.adjacency.size(); ++i)
    EXPECT_NEAR(g1.adjacency[i], g2.adjacency[i], 1e-6);
}

TEST(BuildGraph, EmptyNodeSetRejected) {
  std::vector<batr::graph_source<double>> src;
  EXPECT_THROW(batr::build_graph(src), batr::error);
}

TEST(BuildGraph, SameImageMaskBlindsSiblingViews) {
  auto v1 = single_token_set({1.0, 0.0}, 7);
  v1.view_id = 0;
  auto v2 = single_token_set({1.0, 0.0}, 7);
  v2.view_id = 1;
  auto other = single_token_set({0.0, 1.0}, 8);
  std::vector<batr::graph_source<double>> src = {{&v1, true, 0}, {&v2, true, 0}, {&other, true, 1}};
  batr::graph_options opt;
  opt.mask_mode = batr::pair_mask_mode::same_image;
  auto g = batr::build_graph(src, opt);
  // Sibling views get zero adjacency despite perfect cosine similarity.
  EXPECT_NEAR(g.adjacency_at(0, 1), 0.0, 1e-12);
  EXPECT_NEAR(g.adjacency_at(0, 2), 1.0, 1e-12);
}

TEST(Sparsify, KeepAllIsIdentity) {
  batr::rng_stream rng(7, 3);
  std::vector<double> adj(25);
  auto g = graph_with_adjacency(5, std::vector<double>(25, 0.0));
  for (std::size_t i = 0; i < 5; ++i) {
    double sum = 0;
    for (std::size_t j = 0; j < 5; ++j)
      if (i != j) {
        g.adjacency[i * 5 + j] = rng.uniform();
        sum += g.adjacency[i * 5 + j];
      }
    for (std::size_t j = 0; j < 5; ++j) g.adjacency[i * 5 + j] /= sum;
  }
  auto s = batr::sparsify(g, 1.0);
  EXPECT_EQ(s.adjacency, g.adjacency);
}

TEST(Sparsify, ClosedFormRenormalization) {
  auto g = graph_with_adjacency(4, {0.0, 0.5, 0.3, 0.2,  //
                                    0.5, 0.0, 0.3, 0.2,  //
                                    0.3, 0.2, 0.0, 0.5,  //
                                    0.2, 0.3, 0.5, 0.0});
  auto s = batr::sparsify(g, 0.5);  // ceil(0.5 * 3) = 2 kept per row
  EXPECT_NEAR(s.adjacency_at(0, 1), 0.625, 1e-12);
  EXPECT_NEAR(s.adjacency_at(0, 2), 0.375, 1e-12);
  EXPECT_NEAR(s.adjacency_at(0, 3), 0.0, 1e-12);
}

TEST(Sparsify, ExactNonzeroCountAndRowSums) {
  batr::rng_stream rng(11, 4);
  std::size_t n = 17;
  std::vector<batr::token_set<double>> sets;
  for (std::size_t i = 0; i < n; ++i) {
    batr::token_set<double> ts;
    ts.tokens = td::randn({1, 5}, rng, 1.0);
    ts.image_id = i;
    sets.push_back(std::move(ts));
  }
  std::vector<batr::graph_source<double>> src;
  for (auto& ts : sets) src.push_back({&ts, false, -1});
  auto g = batr::build_graph(src);
  auto s = batr::sparsify(g, 0.5);
  std::size_t want = static_cast<std::size_t>(std::ceil(0.5 * (n - 1)));
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t nnz = 0;
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (s.adjacency_at(i, j) != 0.0) ++nnz;
      sum += s.adjacency_at(i, j);
    }
    EXPECT_EQ(nnz, want);
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(Sparsify, InvalidFractionRejected) {
  auto g = graph_with_adjacency(2, {0, 1, 1, 0});
  EXPECT_THROW(batr::sparsify(g, 0.0), batr::error);
  EXPECT_THROW(batr::sparsify(g, 1.5), batr::error);
}

TEST(Partition, SingletonClustersWhenKEqualsN) {
  batr::rng_stream rng(13, 5);
  std::vector<double> w(36, 0.0);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = i + 1; j < 6; ++j) w[i * 6 + j] = w[j * 6 + i] = rng.uniform();
  auto g = graph_with_weights(6, w);
  auto p = batr::partition(g, 6);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(p.assignment[i], i);
}

TEST(Partition, InvalidKRejected) {
  auto g = graph_with_adjacency(2, {0, 1, 1, 0});
  EXPECT_THROW(batr::partition(g, 0), batr::error);
  EXPECT_THROW(batr::partition(g, 3), batr::error);
}

// Oracle: exhaustive search over all 3 balanced bipartitions of 4 nodes
// confirms {0,1}{2,3} is the minimum cut.
TEST(Partition, TwoPairsGraph) {
  std::vector<double> w(16, 0.1);
  for (std::size_t i = 0; i < 4; ++i) w[i * 4 + i] = 0.0;
  w[0 * 4 + 1] = w[1 * 4 + 0] = 10.0;
  w[2 * 4 + 3] = w[3 * 4 + 2] = 10.0;
  auto g = graph_with_weights(4, w);
  auto p = batr::partition(g, 2);
  EXPECT_EQ(p.assignment[0], p.assignment[1]);
  EXPECT_EQ(p.assignment[2], p.assignment[3]);
  EXPECT_NE(p.assignment[0], p.assignment[2]);
  EXPECT_NEAR(batr::cut_weight(g, p), exhaustive_balanced_min_cut(4, w), 1e-9);
}

// Oracle: exhaustive search over balanced bipartitions of the 6-node
// two-triangle barbell; the bridge is the only cut edge.
TEST(Partition, BarbellSplitsAtBridge) {
  std::vector<double> w(36, 0.0);
  auto link = [&](std::size_t a, std::size_t b, double v) { w[a * 6 + b] = w[b * 6 + a] = v; };
  link(0, 1, 1.0);
  link(0, 2, 1.0);
  link(1, 2, 1.0);
  link(3, 4, 1.0);
  link(3, 5, 1.0);
  link(4, 5, 1.0);
  link(2, 3, 0.1);  // bridge
  auto g = graph_with_weights(6, w);
  auto p = batr::partition(g, 2);
  EXPECT_EQ(p.assignment[0], p.assignment[1]);
  EXPECT_EQ(p.assignment[0], p.assignment[2]);
  EXPECT_EQ(p.assignment[3], p.assignment[4]);
  EXPECT_EQ(p.assignment[3], p.assignment[5]);
  EXPECT_NE(p.assignment[0], p.assignment[3]);
  double cut = batr::cut_weight(g, p);
  EXPECT_NEAR(cut, 0.1, 1e-9);  // the bridge weight
  EXPECT_NEAR(cut, exhaustive_balanced_min_cut(6, w), 1e-9);
}

TEST(Partition, DeterministicAcrossRuns) {
  batr::rng_stream rng(17, 6);
  std::vector<double> w(144, 0.0);
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t j = i + 1; j < 12; ++j) w[i * 12 + j] = w[j * 12 + i] = rng.uniform();
  auto g = graph_with_weights(12, w);
  auto p1 = batr::partition(g, 3);
  auto p2 = batr::partition(g, 3);
  EXPECT_EQ(p1.assignment, p2.assignment);
}

TEST(Partition, BalanceBoundsHold) {
  batr::rng_stream rng(19, 7);
  for (int iter = 0; iter < 10; ++iter) {
    std::size_t n = 20 + rng.below(40);
    std::size_t k = 2 + rng.below(8);
    std::vector<double> w(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) w[i * n + j] = w[j * n + i] = rng.uniform();
    auto g = graph_with_weights(n, w);
    auto p = batr::partition(g, k, 1.3);
    std::vector<std::size_t> sizes(k, 0);
    for (auto c : p.assignment) ++sizes[c];
    std::size_t cap = static_cast<std::size_t>(std::floor(((n + k - 1) / k) * 1.3));
    cap = std::max<std::size_t>(cap, (n + k - 1) / k);
    for (auto s : sizes) {
      EXPECT_GE(s, 1u);
      EXPECT_LE(s, cap);
    }
  }
}

TEST(Partition, NearOptimalOnSmallRandomGraphs) {
  std::size_t optimal = 0, total = 0;
  for (std::uint64_t seedi = 0; seedi < 30; ++seedi) {
    batr::rng_stream rng(100 + seedi, 8);
    std::size_t n = 4 + rng.below(5);  // 4..8
    std::vector<double> w(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) w[i * n + j] = w[j * n + i] = rng.uniform();
    auto g = graph_with_weights(n, w);
    auto p = batr::partition(g, 2);
    double cut = batr::cut_weight(g, p);
    double best = exhaustive_balanced_min_cut(n, w);
    EXPECT_LE(cut, best * 1.5 + 1e-9);
    if (cut <= best + 1e-9) ++optimal;
    ++total;
  }
  EXPECT_GE(static_cast<double>(optimal) / total, 0.9);
}

TEST(CutWeight, SingletonsCutEqualsTotalEdgeWeight) {
  auto g = graph_with_adjacency(2, {0.0, 1.0, 1.0, 0.0});
  graph_partition p;
  p.cluster_count = 2;
  p.assignment = {0, 1};
  EXPECT_NEAR(batr::cut_weight(g, p), 2.0, 1e-12);  // A01 + A10
}

TEST(CutWeight, OneClusterCutIsZero) {
  auto g = graph_with_adjacency(3, std::vector<double>(9, 0.3));
  graph_partition p;
  p.cluster_count = 1;
  p.assignment = {0, 0, 0};
  EXPECT_EQ(batr::cut_weight(g, p), 0.0);
}

TEST(CutWeight, MismatchedSizesRejected) {
  auto g = graph_with_adjacency(3, std::vector<double>(9, 0.0));
  graph_partition p;
  p.cluster_count = 2;
  p.assignment = {0, 1};
  EXPECT_THROW(batr::cut_weight(g, p), batr::error);
}

TEST(SingleNodeGraph, AdjacencyIsSelfLoop) {
  auto ts = single_token_set({1.0, 2.0}, 0);
  std::vector<batr::graph_source<double>> src = {{&ts, true, 0}};
  auto g = batr::build_graph(src);
  EXPECT_EQ(g.size(), 1u);
  EXPECT_NEAR(g.adjacency_at(0, 0), 1.0, 1e-12);
}
