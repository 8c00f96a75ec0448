#pragma once

// Random fixtures and brute-force oracles shared by the test binaries. None of
// the oracles here call into the code they check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "kgqa/kg.hpp"
#include "kgqa/model.hpp"

namespace kgqa::testing {

inline std::vector<KnowledgeGraph::LabeledTriple> random_labeled(std::size_t entities,
                                                                 std::size_t triples,
                                                                 std::size_t relations,
                                                                 std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> ent(0, entities - 1);
  std::uniform_int_distribution<std::size_t> rel(0, relations - 1);
  std::vector<KnowledgeGraph::LabeledTriple> out;
  for (std::size_t i = 0; i < triples; ++i) {
    out.push_back({"e" + std::to_string(ent(rng)), "rel.r" + std::to_string(rel(rng)),
                   "e" + std::to_string(ent(rng))});
  }
  return out;
}

inline KnowledgeGraph random_graph(std::size_t entities, std::size_t triples, std::size_t relations,
                                   std::uint64_t seed) {
  return KnowledgeGraph::from_labeled(random_labeled(entities, triples, relations, seed));
}

inline KnowledgeGraph graph_of(std::initializer_list<KnowledgeGraph::LabeledTriple> triples) {
  std::vector<KnowledgeGraph::LabeledTriple> v(triples);
  return KnowledgeGraph::from_labeled(v);
}

inline EntityId ent(const KnowledgeGraph& g, const std::string& label) { return *g.find_entity(label); }
inline RelationId rel(const KnowledgeGraph& g, const std::string& label) { return *g.find_relation(label); }

/// Entities within `k` hops by repeated relaxation over the full triple list.
inline std::set<EntityId> relaxation_khop(const KnowledgeGraph& g, const std::vector<EntityId>& seeds, int k) {
  std::set<EntityId> reached(seeds.begin(), seeds.end());
  for (int i = 0; i < k; ++i) {
    std::set<EntityId> next = reached;
    for (const auto& t : g.triples()) {
      if (reached.count(t.head)) next.insert(t.tail);
      if (reached.count(t.tail)) next.insert(t.head);
    }
    reached.swap(next);
  }
  return reached;
}

/// Relations on every simple path of minimal length from `s` to `a`, found by
/// exhaustive depth-limited enumeration.
inline std::set<RelationId> enumerate_shortest_path_relations(const KnowledgeGraph& g, EntityId s, EntityId a,
                                                              bool allow_inverse, int max_len) {
  std::set<RelationId> found;
  std::vector<RelationId> path;
  std::vector<EntityId> visited{s};
  std::function<bool(EntityId, int)> dfs = [&](EntityId u, int remaining) -> bool {
    if (u == a) {
      if (remaining == 0) {
        found.insert(path.begin(), path.end());
        return true;
      }
      return false;
    }
    if (remaining == 0) return false;
    bool any = false;
    for (const auto& t : g.triples()) {
      if (t.head != u) continue;
      if (!allow_inverse && is_inverse(t.relation)) continue;
      if (std::find(visited.begin(), visited.end(), t.tail) != visited.end()) continue;
      visited.push_back(t.tail);
      path.push_back(t.relation);
      any = dfs(t.tail, remaining - 1) || any;
      path.pop_back();
      visited.pop_back();
    }
    return any;
  };
  if (s == a) return found;
  for (int len = 1; len <= max_len; ++len) {
    if (dfs(s, len)) break;
  }
  return found;
}

/// Random propagation graph with 2..max_nodes nodes, up to 4 relation slots and
/// one or two topics.
inline PropagationGraph random_propagation_graph(std::mt19937_64& rng, std::size_t max_nodes) {
  PropagationGraph g;
  g.num_nodes = 2 + rng() % (max_nodes - 1);
  const std::size_t slots = 1 + rng() % 4;
  for (std::size_t i = 0; i < slots; ++i) g.relations.push_back(RelationId{static_cast<std::uint32_t>(i)});
  const std::size_t edges = rng() % (3 * g.num_nodes);
  for (std::size_t i = 0; i < edges; ++i) {
    g.edges.push_back({static_cast<std::uint32_t>(rng() % g.num_nodes), static_cast<std::uint32_t>(rng() % slots),
                       static_cast<std::uint32_t>(rng() % g.num_nodes)});
  }
  std::sort(g.edges.begin(), g.edges.end(),
            [](const Edge& a, const Edge& b) { return std::tie(a.target, a.source) < std::tie(b.target, b.source); });
  g.topics.push_back(static_cast<std::uint32_t>(rng() % g.num_nodes));
  if (rng() % 2 == 0) {
    const auto other = static_cast<std::uint32_t>(rng() % g.num_nodes);
    if (other != g.topics[0]) g.topics.push_back(other);
  }
  std::sort(g.topics.begin(), g.topics.end());
  return g;
}

inline Matrix random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Scores after every step, evaluated with plain loops over a dense edge
/// count tensor A[source][slot][target].
inline std::vector<std::vector<double>> dense_reason(const PropagationGraph& g, const Embedding& q,
                                                     const Matrix& rel, const ModelParams& p) {
  const std::size_t n = g.num_nodes, slots = g.relations.size();
  const std::size_t h = p.dims.text_dim, d = p.dims.feature_dim;
  std::vector<double> count(n * slots * n, 0.0);
  for (const auto& e : g.edges) count[(e.source * slots + e.relation) * n + e.target] += 1.0;
  auto A = [&](std::size_t s, std::size_t r, std::size_t t) { return count[(s * slots + r) * n + t]; };

  std::vector<std::vector<double>> E(n, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) {
      double pre = 0.0;
      for (std::size_t src = 0; src < n; ++src) {
        for (std::size_t r = 0; r < slots; ++r) {
          if (A(src, r, i) == 0.0) continue;
          double proj = 0.0;
          for (std::size_t j = 0; j < h; ++j) proj += rel(r, j) * p.init_proj(j, k);
          pre += A(src, r, i) * proj;
        }
      }
      E[i][k] = sigmoid(pre);
    }
  }
  std::vector<double> s(n, 0.0);
  for (const auto t : g.topics) s[t] = 1.0 / static_cast<double>(g.topics.size());
  std::vector<std::vector<double>> all{s};

  for (std::size_t step = 2; step <= p.dims.steps; ++step) {
    const auto& sp = p.steps[step - 2];
    std::vector<std::vector<double>> m(slots, std::vector<double>(d));
    for (std::size_t r = 0; r < slots; ++r) {
      for (std::size_t k = 0; k < d; ++k) {
        double a = 0.0, b = 0.0;
        for (std::size_t j = 0; j < h; ++j) {
          a += q[j] * sp.query_proj(j, k);
          b += rel(r, j) * sp.relation_proj(j, k);
        }
        m[r][k] = sigmoid(a * b);
      }
    }
    std::vector<std::vector<double>> next(n, std::vector<double>(d, 0.0));
    std::vector<double> logits(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> agg(d, 0.0);
      for (std::size_t src = 0; src < n; ++src) {
        for (std::size_t r = 0; r < slots; ++r) {
          for (std::size_t k = 0; k < d; ++k) agg[k] += A(src, r, i) * s[src] * m[r][k];
        }
      }
      for (std::size_t k = 0; k < d; ++k) {
        double x = 0.0;
        for (std::size_t j = 0; j < d; ++j) x += E[i][j] * sp.entity_proj(j, k) + agg[j] * sp.entity_proj(d + j, k);
        next[i][k] = x;
      }
      for (std::size_t k = 0; k < d; ++k) logits[i] += next[i][k] * p.score_vec[k];
    }
    const double top = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += std::exp(logits[i] - top);
    for (std::size_t i = 0; i < n; ++i) s[i] = std::exp(logits[i] - top) / z;
    E = std::move(next);
    all.push_back(s);
  }
  return all;
}

/// |a - b| / max(|a|, |b|, floor): relative error with an absolute floor for
/// gradients that are numerically zero.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Five-point central difference of f with respect to x, restoring x.
template <typename F>
double central_difference(F&& f, double& x, double eps = 1e-4) {
  const double saved = x;
  auto at = [&](double offset) {
    x = saved + offset;
    return f();
  };
  const double d = (-at(2 * eps) + 8 * at(eps) - 8 * at(-eps) + at(-2 * eps)) / (12 * eps);
  x = saved;
  return d;
}

}  // namespace kgqa::testing
