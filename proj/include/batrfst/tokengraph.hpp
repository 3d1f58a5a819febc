// Token graph over an episode's support+query embeddings: cosine/dot
// affinities row-normalized into attention, top-k sparsification, and a
// deterministic balanced K-way partition (recursive bisection refined by
// Kernighan-Lin pair swaps).

#ifndef BATRFST_TOKENGRAPH_HPP_
#define BATRFST_TOKENGRAPH_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "batrfst/error.hpp"
#include "batrfst/rng.hpp"
#include "batrfst/tensor.hpp"
#include "batrfst/tokens.hpp"

namespace batr {

enum class similarity_kind { cosine, dot };

// Which pre-softmax affinity entries are forced to the -inf sentinel besides
// the diagonal. same_image blinds sibling augmented views of one support
// image to each other.
enum class pair_mask_mode { none, diagonal, same_image };

// Finite stand-in for -inf: exp() underflows to exactly zero after the
// row-max shift, and the affinity matrix stays NaN/Inf-free.
inline constexpr double kNegAffinity = -1e9;

struct graph_node_meta {
  std::size_t image_id = 0;
  std::size_t view_id = 0;
  std::size_t token_index = 0;  // 0 = class token
  bool is_support = false;
  int class_label = -1;  // episode-local label; -1 for query nodes
};

template <typename S>
struct graph_source {
  const token_set<S>* set = nullptr;
  bool is_support = false;
  int class_label = -1;
};

template <typename S>
struct token_graph {
  std::size_t dim = 0;
  std::vector<graph_node_meta> meta;
  std::vector<S> embeddings;  // Nn x dim, detached values
  std::vector<S> affinity;    // E, Nn x Nn
  std::vector<S> adjacency;   // A, row-stochastic Nn x Nn

  std::size_t size() const { return meta.size(); }
  S affinity_at(std::size_t i, std::size_t j) const { return affinity[i * size() + j]; }
  S adjacency_at(std::size_t i, std::size_t j) const { return adjacency[i * size() + j]; }
};

struct graph_options {
  similarity_kind similarity = similarity_kind::cosine;
  pair_mask_mode mask_mode = pair_mask_mode::diagonal;
};

struct graph_partition {
  std::vector<std::size_t> assignment;  // node -> cluster id in [0, cluster_count)
  std::size_t cluster_count = 0;

  std::vector<std::vector<std::size_t>> members() const {
    std::vector<std::vector<std::size_t>> out(cluster_count);
    for (std::size_t i = 0; i < assignment.size(); ++i) out[assignment[i]].push_back(i);
    return out;
  }
};

namespace detail {

// Row-stochastic softmax of the (sentinel-masked) affinity matrix, with
// double accumulation so row sums land within 1e-6 even at float storage.
template <typename S>
void normalize_adjacency(token_graph<S>& g) {
  std::size_t n = g.size();
  g.adjacency.assign(n * n, S(0));
  if (n == 1) {
    g.adjacency[0] = S(1);  // degenerate single-node graph keeps a valid row
    return;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const S* row = g.affinity.data() + i * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
    S* arow = g.adjacency.data() + i * n;
    for (std::size_t j = 0; j < n; ++j)
      arow[j] = static_cast<S>(std::exp(static_cast<double>(row[j]) - mx) / denom);
  }
}

}  // namespace detail

template <typename S>
token_graph<S> build_graph(const std::vector<graph_source<S>>& sources,
                           const graph_options& opt = {}) {
  if (sources.empty()) throw parameter_error("build_graph: empty node set");
  std::size_t dim = sources[0].set->embed_dim();
  std::size_t n = 0;
  for (const auto& src : sources) {
    if (src.set->embed_dim() != dim)
      throw dimension_error("build_graph: token sets disagree on embedding dim");
    n += src.set->tokens.dim(0);
  }

  token_graph<S> g;
  g.dim = dim;
  g.meta.reserve(n);
  g.embeddings.reserve(n * dim);
  for (const auto& src : sources) {
    const auto& vals = src.set->tokens.values();
    std::size_t rows = src.set->tokens.dim(0);
    for (std::size_t t = 0; t < rows; ++t) {
      graph_node_meta m;
      m.image_id = src.set->image_id;
      m.view_id = src.set->view_id;
      m.token_index = t;
      m.is_support = src.is_support;
      m.class_label = src.is_support ? src.class_label : -1;
      g.meta.push_back(m);
    }
    g.embeddings.insert(g.embeddings.end(), vals.begin(), vals.end());
  }

  // Affinity: cosine or raw dot, computed in double.
  std::vector<double> norms(n, 1.0);
  if (opt.similarity == similarity_kind::cosine) {
    for (std::size_t i = 0; i < n; ++i) {
      const S* e = g.embeddings.data() + i * dim;
      double acc = 0.0;
      for (std::size_t d = 0; d < dim; ++d) acc += static_cast<double>(e[d]) * e[d];
      norms[i] = std::max(std::sqrt(acc), 1e-12);
    }
  }
  g.affinity.assign(n * n, S(0));
  for (std::size_t i = 0; i < n; ++i) {
    const S* ei = g.embeddings.data() + i * dim;
    for (std::size_t j = i; j < n; ++j) {
      const S* ej = g.embeddings.data() + j * dim;
      double acc = 0.0;
      for (std::size_t d = 0; d < dim; ++d) acc += static_cast<double>(ei[d]) * ej[d];
      if (opt.similarity == similarity_kind::cosine) acc /= norms[i] * norms[j];
      g.affinity[i * n + j] = static_cast<S>(acc);
      g.affinity[j * n + i] = static_cast<S>(acc);
    }
  }

  for (std::size_t i = 0; i < n; ++i) g.affinity[i * n + i] = static_cast<S>(kNegAffinity);
  if (opt.mask_mode == pair_mask_mode::same_image) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        const auto& a = g.meta[i];
        const auto& b = g.meta[j];
        if (a.is_support && b.is_support && a.image_id == b.image_id && a.view_id != b.view_id)
          g.affinity[i * n + j] = static_cast<S>(kNegAffinity);
      }
  }

  detail::normalize_adjacency(g);
  return g;
}

// Test/inspection path: build a graph directly from a raw affinity matrix.
template <typename S>
token_graph<S> graph_from_affinity(std::size_t n, std::vector<S> affinity) {
  if (n == 0) throw parameter_error("graph_from_affinity: empty node set");
  if (affinity.size() != n * n) throw dimension_error("graph_from_affinity: size mismatch");
  token_graph<S> g;
  g.dim = 0;
  g.meta.resize(n);
  for (std::size_t i = 0; i < n; ++i) g.meta[i].token_index = i;
  g.affinity = std::move(affinity);
  detail::normalize_adjacency(g);
  return g;
}

// Keep the top ceil(keep_fraction * (Nn-1)) adjacency entries per row, zero
// the rest, renormalize. Ties break toward the lower column index.
template <typename S>
token_graph<S> sparsify(const token_graph<S>& g, double keep_fraction) {
  if (!(keep_fraction > 0.0) || keep_fraction > 1.0)
    throw parameter_error("sparsify: keep_fraction must be in (0,1]");
  std::size_t n = g.size();
  if (n <= 1) return g;
  std::size_t keep = static_cast<std::size_t>(
      std::ceil(keep_fraction * static_cast<double>(n - 1)));
  if (keep >= n - 1) return g;

  token_graph<S> out = g;
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) {
    const S* row = g.adjacency.data() + i * n;
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [row](std::size_t a, std::size_t b) {
      if (row[a] != row[b]) return row[a] > row[b];
      return a < b;
    });
    S* orow = out.adjacency.data() + i * n;
    std::fill(orow, orow + n, S(0));
    double sum = 0.0;
    for (std::size_t k = 0; k < keep; ++k) sum += static_cast<double>(row[idx[k]]);
    for (std::size_t k = 0; k < keep; ++k)
      orow[idx[k]] = static_cast<S>(static_cast<double>(row[idx[k]]) / sum);
  }
  return out;
}

namespace detail {

// One Kernighan-Lin bisection over a symmetric nonnegative weight matrix
// with fixed side sizes. Returns the assignment (0 = left, 1 = right).
template <typename S>
struct kl_bisector {
  std::size_t n;
  const S* w;  // n x n symmetric, zero diagonal

  double cut(const std::vector<char>& side) const {
    double c = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        if (side[i] != side[j]) c += static_cast<double>(w[i * n + j]);
    return c;
  }

  void refine(std::vector<char>& side, int max_passes = 10) const {
    std::vector<double> d(n);
    std::vector<char> locked(n);
    struct swap_rec {
      std::size_t a, b;
      double cum;
    };
    std::vector<swap_rec> seq;
    std::vector<std::size_t> order(n);

    for (int pass = 0; pass < max_passes; ++pass) {
      for (std::size_t i = 0; i < n; ++i) {
        double ext = 0.0, inte = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          if (j == i) continue;
          double wij = static_cast<double>(w[i * n + j]);
          if (side[j] != side[i])
            ext += wij;
          else
            inte += wij;
        }
        d[i] = ext - inte;
      }
      std::fill(locked.begin(), locked.end(), char(0));
      seq.clear();
      double cum = 0.0;
      std::size_t na = 0;
      for (char s : side) na += (s == 0);
      std::size_t steps = std::min(na, n - na);

      for (std::size_t step = 0; step < steps; ++step) {
        // Candidates sorted by (D desc, index asc); gain <= D_a + D_b lets
        // the scan stop early since weights are nonnegative.
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
          if (d[x] != d[y]) return d[x] > d[y];
          return x < y;
        });
        bool found = false;
        double best_gain = -std::numeric_limits<double>::infinity();
        std::size_t best_a = 0, best_b = 0;
        for (std::size_t oi = 0; oi < n; ++oi) {
          std::size_t a = order[oi];
          if (locked[a] || side[a] != 0) continue;
          if (found && d[a] + d[order[0]] <= best_gain) break;
          for (std::size_t oj = 0; oj < n; ++oj) {
            std::size_t b = order[oj];
            if (locked[b] || side[b] != 1) continue;
            if (found && d[a] + d[b] <= best_gain) break;
            double gain = d[a] + d[b] - 2.0 * static_cast<double>(w[a * n + b]);
            if (!found || gain > best_gain) {
              found = true;
              best_gain = gain;
              best_a = a;
              best_b = b;
            }
          }
        }
        if (!found) break;
        locked[best_a] = locked[best_b] = 1;
        side[best_a] = 1;
        side[best_b] = 0;
        cum += best_gain;
        seq.push_back({best_a, best_b, cum});
        for (std::size_t i = 0; i < n; ++i) {
          if (locked[i]) continue;
          double wa = static_cast<double>(w[i * n + best_a]);
          double wb = static_cast<double>(w[i * n + best_b]);
          // best_a moved 0->1, best_b moved 1->0.
          if (side[i] == 0)
            d[i] += 2.0 * wa - 2.0 * wb;
          else
            d[i] += 2.0 * wb - 2.0 * wa;
        }
      }

      // Keep the best prefix of the tentative swap sequence.
      std::size_t best_prefix = 0;
      double best_cum = 0.0;
      for (std::size_t q = 0; q < seq.size(); ++q)
        if (seq[q].cum > best_cum + 1e-12) {
          best_cum = seq[q].cum;
          best_prefix = q + 1;
        }
      for (std::size_t q = seq.size(); q > best_prefix; --q) {
        side[seq[q - 1].a] = 0;
        side[seq[q - 1].b] = 1;
      }
      if (best_prefix == 0) break;
    }
  }
};

template <typename S>
void bisect_indices(const std::vector<S>& weights, std::size_t stride,
                    const std::vector<std::size_t>& nodes, std::size_t left_size,
                    std::vector<char>& side_out) {
  std::size_t n = nodes.size();
  std::vector<S> sub(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) sub[i * n + j] = weights[nodes[i] * stride + nodes[j]];
  kl_bisector<S> kl{n, sub.data()};

  std::vector<std::vector<char>> starts;
  // Index split.
  {
    std::vector<char> s(n, 1);
    for (std::size_t i = 0; i < left_size; ++i) s[i] = 0;
    starts.push_back(std::move(s));
  }
  // Alternating split.
  {
    std::vector<char> s(n, 1);
    std::size_t placed = 0;
    for (std::size_t i = 0; i < n && placed < left_size; i += 2) {
      s[i] = 0;
      ++placed;
    }
    for (std::size_t i = 1; i < n && placed < left_size; i += 2) {
      s[i] = 0;
      ++placed;
    }
    starts.push_back(std::move(s));
  }
  // Greedy growth from node 0 by affinity mass to the growing side.
  {
    std::vector<char> s(n, 1);
    std::vector<double> attach(n, 0.0);
    std::vector<char> taken(n, 0);
    s[0] = 0;
    taken[0] = 1;
    for (std::size_t j = 0; j < n; ++j) attach[j] = static_cast<double>(sub[j * n]);
    for (std::size_t placed = 1; placed < left_size; ++placed) {
      std::size_t best = n;
      for (std::size_t j = 0; j < n; ++j) {
        if (taken[j]) continue;
        if (best == n || attach[j] > attach[best]) best = j;
      }
      s[best] = 0;
      taken[best] = 1;
      for (std::size_t j = 0; j < n; ++j)
        if (!taken[j]) attach[j] += static_cast<double>(sub[j * n + best]);
    }
    starts.push_back(std::move(s));
  }
  // Seeded shuffles; more restarts at small n where the oracle suite runs.
  std::size_t extra = n <= 64 ? 5 : 1;
  for (std::size_t r = 0; r < extra; ++r) {
    rng_stream rng = make_stream(0xBA7E, rng_purpose::partition, r, n);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm);
    std::vector<char> s(n, 1);
    for (std::size_t i = 0; i < left_size; ++i) s[perm[i]] = 0;
    starts.push_back(std::move(s));
  }

  double best_cut = std::numeric_limits<double>::infinity();
  for (auto& s : starts) {
    kl.refine(s);
    double c = kl.cut(s);
    if (c < best_cut - 1e-12) {
      best_cut = c;
      side_out = s;
    }
  }
}

template <typename S>
void partition_recurse(const std::vector<S>& weights, std::size_t stride,
                       const std::vector<std::size_t>& nodes, std::size_t k,
                       std::size_t max_cluster, std::size_t base_id,
                       std::vector<std::size_t>& assignment) {
  std::size_t n = nodes.size();
  if (k == 1) {
    for (std::size_t v : nodes) assignment[v] = base_id;
    return;
  }
  if (k == n) {
    for (std::size_t i = 0; i < n; ++i) assignment[nodes[i]] = base_id + i;
    return;
  }
  std::size_t k1 = k / 2, k2 = k - k1;
  double target = static_cast<double>(n) * static_cast<double>(k1) / static_cast<double>(k);
  std::size_t left = static_cast<std::size_t>(std::llround(target));
  // Keep both sides feasible: at least one node per cluster, at most
  // max_cluster nodes per cluster.
  std::size_t lo = std::max<std::size_t>(k1, n >= k2 * max_cluster ? n - k2 * max_cluster : 0);
  std::size_t hi = std::min<std::size_t>(n - k2, k1 * max_cluster);
  if (lo > hi) throw internal_error("partition: infeasible split sizes");
  left = std::clamp(left, lo, hi);

  std::vector<char> side;
  bisect_indices(weights, stride, nodes, left, side);

  std::vector<std::size_t> lnodes, rnodes;
  lnodes.reserve(left);
  rnodes.reserve(n - left);
  for (std::size_t i = 0; i < n; ++i)
    (side[i] == 0 ? lnodes : rnodes).push_back(nodes[i]);
  partition_recurse(weights, stride, lnodes, k1, max_cluster, base_id, assignment);
  partition_recurse(weights, stride, rnodes, k2, max_cluster, base_id + k1, assignment);
}

}  // namespace detail

// Balanced K-way partition minimizing (heuristically) the symmetrized cut.
// Deterministic: fixed restarts, index tie-breaks, no global RNG.
template <typename S>
graph_partition partition(const token_graph<S>& g, std::size_t k, double balance_factor = 1.3) {
  std::size_t n = g.size();
  if (k == 0) throw parameter_error("partition: K must be positive");
  if (k > n)
    throw parameter_error("partition: K=" + std::to_string(k) + " exceeds node count " +
                          std::to_string(n));
  if (balance_factor < 1.0) throw parameter_error("partition: balance_factor must be >= 1");

  std::vector<S> weights(n * n, S(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) weights[i * n + j] = g.adjacency[i * n + j] + g.adjacency[j * n + i];

  std::size_t ceil_share = (n + k - 1) / k;
  std::size_t max_cluster = std::max<std::size_t>(
      ceil_share, static_cast<std::size_t>(std::floor(static_cast<double>(ceil_share) *
                                                      balance_factor)));

  graph_partition p;
  p.cluster_count = k;
  p.assignment.assign(n, 0);
  std::vector<std::size_t> nodes(n);
  std::iota(nodes.begin(), nodes.end(), std::size_t{0});
  detail::partition_recurse(weights, n, nodes, k, max_cluster, 0, p.assignment);

  // Partition invariants: full cover, nonempty balance-bounded clusters.
  std::vector<std::size_t> sizes(k, 0);
  for (std::size_t c : p.assignment) {
    if (c >= k) throw internal_error("partition: cluster id out of range");
    ++sizes[c];
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (sizes[c] == 0) throw internal_error("partition: empty cluster");
    if (sizes[c] > max_cluster) throw internal_error("partition: balance bound violated");
  }
  return p;
}

// Sum of symmetrized adjacency over cross-cluster pairs (i < j).
template <typename S>
double cut_weight(const token_graph<S>& g, const graph_partition& p) {
  std::size_t n = g.size();
  if (p.assignment.size() != n) throw usage_error("cut_weight: partition does not cover graph");
  double c = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (p.assignment[i] != p.assignment[j])
        c += static_cast<double>(g.adjacency[i * n + j]) + g.adjacency[j * n + i];
  return c;
}

}  // namespace batr

#endif  // BATRFST_TOKENGRAPH_HPP_
