#pragma once

// Exact dynamic-programming ground truth for a maze task: all-pairs shortest
// distances, optimal goal-conditioned policies, and exact policy evaluation
// (expected cumulative reward, cumulative discount and truncated trajectory
// length) for arbitrary tabular policies under optional action noise.
// Also hosts the oracle composite agent used by the ablation protocol.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "proxyplan/distributions.hpp"
#include "proxyplan/gridworld.hpp"

namespace proxyplan {

inline constexpr double kUnreachable = std::numeric_limits<double>::infinity();

/// Action distribution of a tabular policy at a cell (the goal is baked into
/// the closure when one is needed).
using PolicyDist = std::function<std::array<double, kNumActions>(int cell)>;

struct OracleTables {
  int n = 0;  // number of cells
  std::vector<double> dist;              // n*n shortest step counts, inf if unreachable
  std::vector<std::uint8_t> best_action; // n*n lowest-index optimal action
  std::vector<std::uint8_t> action_mask; // n*n bitmask of all optimal actions

  double distance(int from, int to) const {
    return dist[static_cast<std::size_t>(from) * static_cast<std::size_t>(n) +
                static_cast<std::size_t>(to)];
  }
  Action optimal_action(int from, int to) const {
    return static_cast<Action>(
        best_action[static_cast<std::size_t>(from) * static_cast<std::size_t>(n) +
                    static_cast<std::size_t>(to)]);
  }
  std::uint8_t optimal_action_set(int from, int to) const {
    return action_mask[static_cast<std::size_t>(from) * static_cast<std::size_t>(n) +
                       static_cast<std::size_t>(to)];
  }
};

/// All-pairs BFS shortest path lengths. Paths may end on a terminal cell but
/// never pass through one; unreachable pairs are +inf, diagonal is 0.
inline std::vector<double> shortest_distances(const MazeTask& task) {
  int n = task.size();
  std::vector<double> dist(static_cast<std::size_t>(n) * static_cast<std::size_t>(n),
                           kUnreachable);
  for (int s = 0; s < n; ++s) {
    auto d = bfs_distances(task, task.coord(s));
    for (int t = 0; t < n; ++t) {
      if (d[static_cast<std::size_t>(t)] >= 0) {
        dist[static_cast<std::size_t>(s) * static_cast<std::size_t>(n) +
             static_cast<std::size_t>(t)] = d[static_cast<std::size_t>(t)];
      }
    }
  }
  return dist;
}

inline OracleTables compute_oracle(const MazeTask& task) {
  OracleTables t;
  t.n = task.size();
  t.dist = shortest_distances(task);
  t.best_action.assign(static_cast<std::size_t>(t.n) * static_cast<std::size_t>(t.n), 0);
  t.action_mask.assign(static_cast<std::size_t>(t.n) * static_cast<std::size_t>(t.n), 0);
  for (int s = 0; s < t.n; ++s) {
    Coord c = task.coord(s);
    if (task.terminal_at(c)) continue;
    for (int g = 0; g < t.n; ++g) {
      double dsg = t.distance(s, g);
      if (s == g || std::isinf(dsg)) continue;
      std::uint8_t mask = 0;
      std::uint8_t first = 0;
      for (int a = 0; a < kNumActions; ++a) {
        Coord d = action_delta(static_cast<Action>(a));
        Coord nc{c.x + d.x, c.y + d.y};
        if (!task.in_bounds(nc)) continue;
        double dn = t.distance(task.index(nc), g);
        if (!std::isinf(dn) && dn + 1.0 == dsg) {
          if (mask == 0) first = static_cast<std::uint8_t>(a);
          mask |= static_cast<std::uint8_t>(1u << a);
        }
      }
      t.best_action[static_cast<std::size_t>(s) * static_cast<std::size_t>(t.n) +
                    static_cast<std::size_t>(g)] = first;
      t.action_mask[static_cast<std::size_t>(s) * static_cast<std::size_t>(t.n) +
                    static_cast<std::size_t>(g)] = mask;
    }
  }
  return t;
}

/// Deterministic optimal policy toward `goal` (lowest-index optimal action;
/// action 0 where the goal is unreachable).
inline PolicyDist optimal_policy(const OracleTables& tables, const MazeTask& task,
                                 Coord goal) {
  int g = task.index(goal);
  return [&tables, g](int cell) {
    std::array<double, kNumActions> p{};
    p[static_cast<std::size_t>(tables.optimal_action(cell, g))] = 1.0;
    return p;
  };
}

struct PolicyEvaluation {
  std::vector<double> value;     // expected cumulative discounted task reward
  std::vector<double> discount;  // E[gamma^T * 1{reached goal}]
  std::vector<double> distance;  // expected truncated trajectory length
};

namespace detail {

struct TransientSystem {
  std::vector<int> cells;          // transient cell indices
  std::vector<int> row_of;         // cell -> row, -1 if absorbing
  Eigen::MatrixXd transitions;     // row-stochastic restricted to transient states
  Eigen::VectorXd reach;           // one-step probability of entering the goal cell
  Eigen::VectorXd reward;          // one-step expected task reward
};

// The option's absorbing events: arriving at the target position (success),
// or entering any terminal cell that is not the target (failure).
inline TransientSystem build_system(const MazeTask& task, const PolicyDist& policy,
                                    int goal_cell, double noise) {
  TransientSystem sys;
  int n = task.size();
  sys.row_of.assign(static_cast<std::size_t>(n), -1);
  for (int c = 0; c < n; ++c) {
    if (c == goal_cell || task.terminal_at(task.coord(c))) continue;
    sys.row_of[static_cast<std::size_t>(c)] = static_cast<int>(sys.cells.size());
    sys.cells.push_back(c);
  }
  int t = static_cast<int>(sys.cells.size());
  sys.transitions = Eigen::MatrixXd::Zero(t, t);
  sys.reach = Eigen::VectorXd::Zero(t);
  sys.reward = Eigen::VectorXd::Zero(t);
  for (int i = 0; i < t; ++i) {
    int c = sys.cells[static_cast<std::size_t>(i)];
    Coord cc = task.coord(c);
    auto pi = policy(c);
    for (int a = 0; a < kNumActions; ++a) {
      double pa = (1.0 - noise) * pi[static_cast<std::size_t>(a)] +
                  noise / kNumActions;
      if (pa == 0.0) continue;
      Coord d = action_delta(static_cast<Action>(a));
      Coord nc{cc.x + d.x, cc.y + d.y};
      if (!task.in_bounds(nc)) nc = cc;
      int ni = task.index(nc);
      if (task.at(nc) == Cell::Goal) sys.reward(i) += pa;
      if (ni == goal_cell) {
        sys.reach(i) += pa;
      } else if (sys.row_of[static_cast<std::size_t>(ni)] >= 0) {
        sys.transitions(i, sys.row_of[static_cast<std::size_t>(ni)]) += pa;
      }
    }
  }
  return sys;
}

// Solves x = gamma * P x + b. Direct solve for small systems with gamma < 1;
// fixed-point iteration to residual < 1e-10 otherwise (gamma = 1 can make
// I - P singular on recurrent classes, where iteration from zero converges
// to the minimal, probabilistically correct solution).
inline Eigen::VectorXd solve_discounted(const Eigen::MatrixXd& p, double gamma,
                                        const Eigen::VectorXd& b) {
  int t = static_cast<int>(p.rows());
  if (t == 0) return Eigen::VectorXd::Zero(0);
  if (gamma < 1.0 && t <= 200) {
    Eigen::MatrixXd a = Eigen::MatrixXd::Identity(t, t) - gamma * p;
    return a.partialPivLu().solve(b);
  }
  Eigen::VectorXd x = Eigen::VectorXd::Zero(t);
  for (int iter = 0; iter < 2000000; ++iter) {
    Eigen::VectorXd next = gamma * (p * x) + b;
    double residual = (next - x).lpNorm<Eigen::Infinity>();
    x = next;
    if (residual < 1e-10) return x;
  }
  throw std::runtime_error("policy evaluation did not converge (malformed policy)");
}

}  // namespace detail

/// Exact distribution of the (truncated) number of steps the policy needs to
/// first arrive at `goal`, per start cell. Bins 1..15 plus overflow.
inline std::vector<Histogram> distance_distribution(const MazeTask& task,
                                                    const PolicyDist& policy,
                                                    Coord goal, double noise) {
  int n = task.size();
  int goal_cell = task.index(goal);
  auto sys = detail::build_system(task, policy, goal_cell, noise);
  int t = static_cast<int>(sys.cells.size());
  std::vector<Histogram> out(static_cast<std::size_t>(n));
  for (int s = 0; s < n; ++s) {
    auto& h = out[static_cast<std::size_t>(s)];
    if (s == goal_cell) continue;  // already at the target: all-zero mass below
    int row = sys.row_of[static_cast<std::size_t>(s)];
    if (row < 0) {
      h.probs[kOverflowBin] = 1.0;  // terminal start, can never reach
      continue;
    }
    Eigen::VectorXd mass = Eigen::VectorXd::Zero(t);
    mass(row) = 1.0;
    double reached_total = 0.0;
    for (int k = 1; k <= kDistanceMax; ++k) {
      double reached = mass.dot(sys.reach);
      h.probs[static_cast<std::size_t>(k - 1)] = reached;
      reached_total += reached;
      mass = sys.transitions.transpose() * mass;
    }
    h.probs[kOverflowBin] = std::max(0.0, 1.0 - reached_total);
  }
  // The start-at-goal convention: distance 0. Representable mass is placed
  // nowhere; callers treat the goal row specially (planner zeroes diagonals).
  out[static_cast<std::size_t>(goal_cell)] = Histogram{};
  return out;
}

/// Exact policy evaluation against a target position: the expected cumulative
/// discounted task reward until the option ends, the expected cumulative
/// discount E[gamma^T 1{reached}], and the expected truncated trajectory
/// length (overflow counted as d_max).
inline PolicyEvaluation evaluate_policy(const MazeTask& task, const PolicyDist& policy,
                                        Coord goal, double gamma, double noise) {
  if (!(gamma > 0.0 && gamma <= 1.0)) {
    throw std::invalid_argument("evaluate_policy: gamma must be in (0, 1]");
  }
  int n = task.size();
  int goal_cell = task.index(goal);
  auto sys = detail::build_system(task, policy, goal_cell, noise);

  Eigen::VectorXd v = detail::solve_discounted(sys.transitions, gamma, sys.reward);
  Eigen::VectorXd g =
      detail::solve_discounted(sys.transitions, gamma, gamma * sys.reach);

  PolicyEvaluation out;
  out.value.assign(static_cast<std::size_t>(n), 0.0);
  out.discount.assign(static_cast<std::size_t>(n), 0.0);
  out.distance.assign(static_cast<std::size_t>(n), 0.0);
  auto dd = distance_distribution(task, policy, goal, noise);
  for (int s = 0; s < n; ++s) {
    if (s == goal_cell) {
      out.discount[static_cast<std::size_t>(s)] = 1.0;  // zero-length option
      continue;
    }
    int row = sys.row_of[static_cast<std::size_t>(s)];
    if (row >= 0) {
      out.value[static_cast<std::size_t>(s)] = v(row);
      out.discount[static_cast<std::size_t>(s)] = g(row);
    }
    out.distance[static_cast<std::size_t>(s)] =
        distance_expectation(dd[static_cast<std::size_t>(s)], kDistanceMax);
  }
  return out;
}

// --- oracle composite agent --------------------------------------------------

/// Hooks for replacing either component of the composite agent with a learned
/// counterpart; a null hook means the DP-optimal version is used.
struct CompositeOverrides {
  // Given the current position and candidate checkpoint positions, pick a target.
  std::function<Coord(const MazeTask&, Coord current, std::span<const Coord> candidates,
                      Rng&)>
      select_target;
  // Low-level action toward the current target.
  std::function<Action(const MazeTask&, Coord current, Coord target, Rng&)> act;
};

namespace detail {

// DP-optimal target selection: among candidates on a shortest current->goal
// path (finite legs both ways), pick the nearest; this strictly decreases the
// remaining distance, so the composite with an optimal policy always succeeds
// on deterministic dynamics.
inline Coord oracle_select_target(const OracleTables& oracle, const MazeTask& task,
                                  Coord current, std::span<const Coord> candidates) {
  int cur = task.index(current);
  int goal = task.index(task.goal);
  int best = -1;
  double best_total = 0.0, best_leg = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    int c = task.index(candidates[i]);
    if (c == cur) continue;
    double leg = oracle.distance(cur, c);
    double rest = oracle.distance(c, goal);
    if (std::isinf(leg) || std::isinf(rest)) continue;
    double total = leg + rest;
    if (best < 0 || total < best_total ||
        (total == best_total && leg < best_leg)) {
      best = static_cast<int>(i);
      best_total = total;
      best_leg = leg;
    }
  }
  if (best < 0) {
    // No useful candidate; fall back to the nearest reachable one.
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      int c = task.index(candidates[i]);
      if (c == cur) continue;
      double leg = oracle.distance(cur, c);
      if (std::isinf(leg)) continue;
      if (best < 0 || leg < best_leg) {
        best = static_cast<int>(i);
        best_leg = leg;
      }
    }
  }
  return best >= 0 ? candidates[static_cast<std::size_t>(best)] : current;
}

}  // namespace detail

/// Success probability of the composite agent on this task when the plan
/// and/or the low-level policy are replaced by DP-optimal versions. Estimated
/// by rollouts (exact for deterministic dynamics with both oracles, where a
/// single rollout decides the outcome). Checkpoint candidates are sampled
/// uniformly per plan, with the goal always included.
inline double optimal_success_rate(const MazeTask& task, const OracleTables& oracle,
                                   bool plan_oracle, bool policy_oracle,
                                   const CompositeOverrides* learned, double noise,
                                   int episodes, Rng& rng, int n_candidates = 32,
                                   int replan_interval = 8) {
  if ((!plan_oracle || !policy_oracle) &&
      (learned == nullptr ||
       (!plan_oracle && !learned->select_target) ||
       (!policy_oracle && !learned->act))) {
    throw std::invalid_argument(
        "optimal_success_rate: learned hooks required for non-oracle components");
  }
  int successes = 0;
  for (int ep = 0; ep < episodes; ++ep) {
    EnvState s = initial_state(task, SpawnMode::EvalOpposite, rng);
    std::vector<Coord> candidates;
    auto replan = [&](Coord current) {
      candidates.clear();
      candidates.push_back(task.goal);
      for (int i = 1; i < n_candidates; ++i) {
        candidates.push_back({uniform_int(rng, 0, task.width - 1),
                              uniform_int(rng, 0, task.height - 1)});
      }
      if (plan_oracle) {
        return detail::oracle_select_target(oracle, task, current, candidates);
      }
      return learned->select_target(task, current, candidates, rng);
    };
    Coord target = replan(s.position);
    int since_plan = 0;
    bool success = false;
    int cap = step_cap(task);
    for (int t = 0; t < cap && !s.terminated; ++t) {
      Action a;
      if (policy_oracle) {
        int cur = task.index(s.position);
        int tgt = task.index(target);
        a = std::isinf(oracle.distance(cur, tgt)) ? Action::Up
                                                  : oracle.optimal_action(cur, tgt);
      } else {
        a = learned->act(task, s.position, target, rng);
      }
      Transition tr = step(task, s, a, noise, rng);
      s = tr.next_state;
      if (tr.terminal && task.at(s.position) == Cell::Goal) success = true;
      ++since_plan;
      if (!s.terminated && (s.position == target || since_plan >= replan_interval)) {
        target = replan(s.position);
        since_plan = 0;
      }
    }
    if (success) ++successes;
  }
  return double(successes) / double(episodes);
}

inline void to_json(nlohmann::json& j, const OracleTables& t) {
  nlohmann::json dist = nlohmann::json::array();
  for (int s = 0; s < t.n; ++s) {
    nlohmann::json row = nlohmann::json::array();
    for (int g = 0; g < t.n; ++g) {
      double d = t.distance(s, g);
      if (std::isinf(d)) {
        row.push_back(nullptr);
      } else {
        row.push_back(d);
      }
    }
    dist.push_back(std::move(row));
  }
  nlohmann::json actions = nlohmann::json::array();
  for (std::size_t i = 0; i < t.best_action.size(); ++i) actions.push_back(t.best_action[i]);
  j = nlohmann::json{{"n", t.n}, {"distance", dist}, {"best_action", actions}};
}

}  // namespace proxyplan
