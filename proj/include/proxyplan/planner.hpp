#pragma once

// Proxy-problem assembly and solution: reward/discount/distance edge matrices
// over a checkpoint set, far-fetched-edge pruning, SMDP value iteration in
// matrix form (Q = R + G V, V = rowwise max), immediate-target selection, and
// the once/regen replanning rules.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "proxyplan/checkpoints.hpp"
#include "proxyplan/estimators.hpp"
#include "proxyplan/gridworld.hpp"

namespace proxyplan {

struct ProxyGraph {
  std::vector<EnvState> vertices;  // [0] is the current state
  std::vector<double> reward;      // n*n, row-major: edge i -> j
  std::vector<double> discount;
  std::vector<double> distance;
  std::vector<double> terminal;       // per-vertex terminal probability
  std::vector<std::uint8_t> alive;    // edge survived pruning and zeroing

  int n() const { return static_cast<int>(vertices.size()); }
  std::size_t idx(int i, int j) const {
    return static_cast<std::size_t>(i) * vertices.size() + static_cast<std::size_t>(j);
  }
  double r(int i, int j) const { return reward[idx(i, j)]; }
  double g(int i, int j) const { return discount[idx(i, j)]; }
  double d(int i, int j) const { return distance[idx(i, j)]; }
  bool edge_alive(int i, int j) const { return alive[idx(i, j)] != 0; }
};

/// Builds the proxy graph for the pruned checkpoint set with the current
/// state prepended as vertex 0. Self-loops and edges into the current state
/// are removed, rows of vertices classified terminal (probability > 0.5) are
/// zeroed, and every edge with estimated distance over the threshold is
/// deleted.
inline ProxyGraph build_graph(const CheckpointSet& pruned, const EnvState& current,
                              const EdgeEstimatorTables& tables,
                              const GoalConditionedQ& q, const MazeTask& task,
                              int task_id, double distance_threshold) {
  ProxyGraph graph;
  graph.vertices.push_back(current);
  for (const auto& cp : pruned.checkpoints) {
    if (cp.position == current.position) continue;  // vertex 0 already covers it
    graph.vertices.push_back(cp);
  }
  int n = graph.n();
  graph.reward.assign(static_cast<std::size_t>(n) * static_cast<std::size_t>(n), 0.0);
  graph.discount.assign(graph.reward.size(), 0.0);
  graph.distance.assign(graph.reward.size(), 0.0);
  graph.alive.assign(graph.reward.size(), 0);
  graph.terminal.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    graph.terminal[static_cast<std::size_t>(i)] =
        tables.terminal_at(task_id, task.index(graph.vertices[static_cast<std::size_t>(i)].position));
  }
  for (int i = 0; i < n; ++i) {
    bool terminal_row = graph.terminal[static_cast<std::size_t>(i)] > 0.5;
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      EdgeEstimate e =
          estimate_edge(tables, q, task, task_id,
                        graph.vertices[static_cast<std::size_t>(i)].position,
                        graph.vertices[static_cast<std::size_t>(j)].position);
      graph.distance[graph.idx(i, j)] = e.distance;
      if (j == 0 || terminal_row || e.distance > distance_threshold) continue;
      graph.reward[graph.idx(i, j)] = e.value;
      graph.discount[graph.idx(i, j)] = e.discount;
      graph.alive[graph.idx(i, j)] = 1;
    }
  }
  return graph;
}

/// SMDP value iteration in matrix form, V initialized to zero.
inline std::vector<double> value_iterate(const ProxyGraph& graph, int iterations) {
  if (iterations < 1) throw std::invalid_argument("value_iterate: iterations >= 1");
  int n = graph.n();
  std::vector<double> v(static_cast<std::size_t>(n), 0.0);
  std::vector<double> next(static_cast<std::size_t>(n), 0.0);
  for (int it = 0; it < iterations; ++it) {
    for (int i = 0; i < n; ++i) {
      double best = 0.0;  // an all-pruned row keeps value zero
      for (int j = 0; j < n; ++j) {
        if (i == j) continue;
        double q = graph.r(i, j) + graph.g(i, j) * v[static_cast<std::size_t>(j)];
        if (q > best) best = q;
      }
      next[static_cast<std::size_t>(i)] = best;
    }
    v.swap(next);
  }
  return v;
}

struct Plan {
  std::vector<double> checkpoint_values;
  int target = -1;  // vertex index of the immediate checkpoint target
};

/// Picks the immediate target as seen from vertex `from`: the vertex
/// maximizing R[from,j] + G[from,j] V[j], ties broken by smaller estimated
/// distance then lower index. If every outgoing edge of `from` was pruned,
/// falls back to the nearest vertex.
inline Plan select_target_from(const ProxyGraph& graph, std::span<const double> values,
                               int from) {
  int n = graph.n();
  if (n < 2) throw std::logic_error("select_target: graph needs at least 2 vertices");
  int best = -1;
  double best_score = 0.0, best_dist = 0.0;
  for (int j = 1; j < n; ++j) {
    if (j == from || !graph.edge_alive(from, j)) continue;
    double score =
        graph.r(from, j) + graph.g(from, j) * values[static_cast<std::size_t>(j)];
    double dist = graph.d(from, j);
    bool better = best < 0 || score > best_score + 1e-12 ||
                  (score > best_score - 1e-12 && dist < best_dist);
    if (better) {
      best = j;
      best_score = score;
      best_dist = dist;
    }
  }
  if (best < 0) {  // everything pruned: nearest vertex
    for (int j = 1; j < n; ++j) {
      if (j == from) continue;
      if (best < 0 || graph.d(from, j) < best_dist) {
        best = j;
        best_dist = graph.d(from, j);
      }
    }
  }
  if (best < 0) throw std::logic_error("select_target: no selectable vertex");
  Plan plan;
  plan.checkpoint_values.assign(values.begin(), values.end());
  plan.target = best;
  return plan;
}

inline Plan select_target(const ProxyGraph& graph, std::span<const double> values) {
  return select_target_from(graph, values, 0);
}

enum class ReplanMode { Once, Regen };
enum class ReplanEvent { EpisodeStart, CheckpointReached, Timeout };
enum class ReplanDecision { RebuildGraphAndPlan, ReplanOnExistingGraph };

/// Once reuses the episode's proxy problem and only re-selects targets;
/// Regen regenerates the whole problem at every replanning event.
inline ReplanDecision replan_policy(ReplanMode mode, ReplanEvent event) {
  if (event == ReplanEvent::EpisodeStart || mode == ReplanMode::Regen) {
    return ReplanDecision::RebuildGraphAndPlan;
  }
  return ReplanDecision::ReplanOnExistingGraph;
}

/// Value of a fixed checkpoint path: sum over edges of the edge value times
/// the product of the discounts of all earlier edges, truncated at max_terms.
inline double composite_path_value(std::span<const double> edge_values,
                                   std::span<const double> edge_discounts,
                                   int max_terms = 50) {
  if (edge_values.size() != edge_discounts.size()) {
    throw std::invalid_argument("composite_path_value: length mismatch");
  }
  double total = 0.0;
  double carry = 1.0;
  int terms = std::min<int>(max_terms, static_cast<int>(edge_values.size()));
  for (int k = 0; k < terms; ++k) {
    total += carry * edge_values[static_cast<std::size_t>(k)];
    carry *= edge_discounts[static_cast<std::size_t>(k)];
  }
  return total;
}

inline void to_json(nlohmann::json& j, const ProxyGraph& graph) {
  nlohmann::json verts = nlohmann::json::array();
  for (const auto& v : graph.vertices) {
    verts.push_back({v.position.x, v.position.y});
  }
  j = nlohmann::json{{"vertices", verts},
                     {"reward", graph.reward},
                     {"discount", graph.discount},
                     {"distance", graph.distance},
                     {"terminal", graph.terminal}};
}

}  // namespace proxyplan
