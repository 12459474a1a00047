#pragma once

// The composite agent: a low-level goal-conditioned policy steered by
// proxy-problem planning. The episode controller owns the per-episode
// planning state (checkpoint set, graph, current target) and applies the
// replanning rules of the selected agent variant.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "proxyplan/checkpoints.hpp"
#include "proxyplan/estimators.hpp"
#include "proxyplan/gridworld.hpp"
#include "proxyplan/planner.hpp"

namespace proxyplan {

enum class AgentKind { SkipperOnce, SkipperRegen, Modelfree, SkipperGoal };

struct AgentParams {
  AgentKind kind = AgentKind::SkipperOnce;
  int n_generate = 32;
  int k_prune = 12;
  int vi_iterations = 5;
  double edge_distance_threshold = 8.0;
  int replan_interval = 8;
  bool include_invalid_checkpoints = false;
  double prune_overflow_distance = 2.0 * kDistanceMax;  // k-medoids input truncation
};

/// A learned agent snapshot: everything needed to act greedily.
struct TrainedAgent {
  AgentParams params;
  GoalConditionedQ q;
  EdgeEstimatorTables tables;
};

/// Pairwise estimated distances among candidate checkpoints, with the
/// pruner's overflow truncation.
inline std::vector<double> candidate_distances(const TrainedAgent& agent,
                                               const MazeTask& task, int task_id,
                                               const CheckpointSet& candidates,
                                               double overflow_value) {
  int m = static_cast<int>(candidates.size());
  std::vector<double> dist(static_cast<std::size_t>(m) * static_cast<std::size_t>(m), 0.0);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < m; ++j) {
      if (i == j) continue;
      dist[static_cast<std::size_t>(i) * static_cast<std::size_t>(m) +
           static_cast<std::size_t>(j)] =
          expected_edge_distance(agent.tables, agent.q, task, task_id,
                                 candidates.checkpoints[static_cast<std::size_t>(i)].position,
                                 candidates.checkpoints[static_cast<std::size_t>(j)].position,
                                 overflow_value);
    }
  }
  return dist;
}

class EpisodeController {
 public:
  EpisodeController(const TrainedAgent& agent, const MazeTask& task, int task_id)
      : agent_(&agent), task_(&task), task_id_(task_id) {}

  void begin(const EnvState& state, Rng& rng) {
    steps_since_plan_ = 0;
    if (uses_graph()) {
      rebuild(state, rng);
    } else {
      target_ = task_->goal;
    }
  }

  /// Greedy low-level action toward the current target.
  Action act(const EnvState& state) const {
    return agent_->q.greedy(*task_, task_id_, state.position, target_);
  }

  /// Call after every environment step with the resulting state; replans on
  /// target arrival or timeout.
  void after_step(const EnvState& next, Rng& rng) {
    ++steps_since_plan_;
    if (next.terminated || !uses_graph() ||
        agent_->params.kind == AgentKind::SkipperGoal) {
      return;
    }
    bool reached = next.position == target_;
    bool timeout = steps_since_plan_ >= agent_->params.replan_interval;
    if (!reached && !timeout) return;
    ReplanEvent event = reached ? ReplanEvent::CheckpointReached : ReplanEvent::Timeout;
    ReplanMode mode = agent_->params.kind == AgentKind::SkipperRegen ? ReplanMode::Regen
                                                                     : ReplanMode::Once;
    if (replan_policy(mode, event) == ReplanDecision::RebuildGraphAndPlan) {
      rebuild(next, rng);
    } else {
      reselect(next, rng);
    }
    steps_since_plan_ = 0;
  }

  Coord current_target() const { return target_; }
  const ProxyGraph* graph() const { return graph_ ? &*graph_ : nullptr; }

 private:
  bool uses_graph() const { return agent_->params.kind != AgentKind::Modelfree; }

  // Full replanning: generate, prune, build, solve, select.
  void rebuild(const EnvState& state, Rng& rng) {
    const AgentParams& p = agent_->params;
    Context ctx{task_, task_id_};
    CheckpointSet generated =
        generate_checkpoints(ctx, p.n_generate, p.include_invalid_checkpoints, rng);
    auto dist =
        candidate_distances(*agent_, *task_, task_id_, generated, p.prune_overflow_distance);
    CheckpointSet kept = kmedoids_prune(generated, dist, p.k_prune, rng);
    graph_ = build_graph(kept, state, agent_->tables, agent_->q, *task_, task_id_,
                         p.edge_distance_threshold);
    values_ = value_iterate(*graph_, p.vi_iterations);
    planned_from_ = 0;
    select_from(0);
  }

  // Quick re-selection on the existing graph: re-bind the current vertex by
  // position match. Degenerate cases (no matching vertex, or no movement
  // since the last plan, which would reproduce it verbatim) rebuild instead.
  void reselect(const EnvState& state, Rng& rng) {
    int bound = -1;
    if (graph_) {
      for (int j = 0; j < graph_->n(); ++j) {
        if (graph_->vertices[static_cast<std::size_t>(j)].position == state.position) {
          bound = j;
          break;
        }
      }
    }
    if (bound < 0 || bound == planned_from_) {
      rebuild(state, rng);
      return;
    }
    planned_from_ = bound;
    select_from(bound);
  }

  void select_from(int from) {
    if (agent_->params.kind == AgentKind::SkipperGoal) {
      target_ = task_->goal;  // the goal vertex is always kept
      return;
    }
    Plan plan = select_target_from(*graph_, values_, from);
    target_ = graph_->vertices[static_cast<std::size_t>(plan.target)].position;
  }

  const TrainedAgent* agent_;
  const MazeTask* task_;
  int task_id_;
  std::optional<ProxyGraph> graph_;
  std::vector<double> values_;
  Coord target_{};
  int steps_since_plan_ = 0;
  int planned_from_ = 0;  // vertex the current selection was made from
};

}  // namespace proxyplan
