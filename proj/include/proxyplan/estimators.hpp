#pragma once

// The learned quantities: the goal-conditioned low-level policy (tabular
// Q-learning on an intrinsic reach reward), the distributional cumulative
// reward and truncated-distance estimators that annotate proxy-graph edges,
// the terminal-state classifier, and the delusion-suppression training hook.
//
// Every estimator is a two-level table. The exact level is keyed by
// (task context, position, goal position, action) and converges to the
// per-task fixed point wherever training data exists. The shared level is
// keyed by local features that are observable on any task (the classes of
// the four adjacent cells, the clamped goal displacement, and whether the
// target is the task goal); it is updated by every sample and answers for
// state-goal pairs the exact level has never seen, which is what carries
// learned behavior to held-out tasks.

#include <algorithm>
#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "proxyplan/distributions.hpp"
#include "proxyplan/gridworld.hpp"
#include "proxyplan/replay.hpp"

namespace proxyplan {

using TaskResolver = std::function<const MazeTask&(int task_id)>;

/// Bootstrap action choice used inside distributional updates; defaults to
/// the greedy policy of the Q table being trained alongside.
using BootstrapPolicy =
    std::function<Action(const MazeTask&, int task_id, Coord pos, Coord goal)>;

namespace detail {

struct KeyHash {
  std::size_t operator()(std::uint64_t k) const {
    std::uint64_t s = k;
    return static_cast<std::size_t>(splitmix64(s));
  }
};

inline std::uint64_t exact_key(int task_id, int pos, int goal, int action) {
  return (std::uint64_t(std::uint32_t(task_id)) << 32) |
         (std::uint64_t(pos & 0x3fff) << 18) | (std::uint64_t(goal & 0x3fff) << 4) |
         std::uint64_t(action & 0xf);
}

inline std::uint64_t terminal_key(int task_id, int pos) {
  return (std::uint64_t(std::uint32_t(task_id)) << 32) | std::uint64_t(pos & 0x3fff);
}

// Class of the cell one step in each direction: 0 empty, 1 out of bounds,
// 2 lava, 3 goal cell. Two bits per direction.
inline std::uint32_t neighborhood_code(const MazeTask& task, Coord pos) {
  std::uint32_t code = 0;
  for (int a = 0; a < kNumActions; ++a) {
    Coord d = action_delta(static_cast<Action>(a));
    Coord n{pos.x + d.x, pos.y + d.y};
    std::uint32_t cls = 1;  // out of bounds
    if (task.in_bounds(n)) {
      switch (task.at(n)) {
        case Cell::Empty: cls = 0; break;
        case Cell::Lava: cls = 2; break;
        case Cell::Goal: cls = 3; break;
      }
    }
    code |= cls << (2 * a);
  }
  return code;
}

inline constexpr int kDeltaClamp = 8;

// Shared key for the low-level policy: the local cell classes plus the
// direction class of the goal displacement (signs, dominant axis, adjacency).
// Magnitude is deliberately dropped so obstacle-avoidance lessons pool fast.
inline std::uint64_t shared_policy_key(const MazeTask& task, Coord pos, Coord goal,
                                       int action) {
  int dx = goal.x - pos.x;
  int dy = goal.y - pos.y;
  std::uint32_t sx = std::uint32_t(dx > 0 ? 2 : (dx < 0 ? 0 : 1));
  std::uint32_t sy = std::uint32_t(dy > 0 ? 2 : (dy < 0 ? 0 : 1));
  std::uint32_t dominant_x = std::abs(dx) >= std::abs(dy) ? 1u : 0u;
  std::uint32_t adjacent = std::abs(dx) + std::abs(dy) == 1 ? 1u : 0u;
  std::uint32_t key = neighborhood_code(task, pos);
  key = (key << 2) | sx;
  key = (key << 2) | sy;
  key = (key << 1) | dominant_x;
  key = (key << 1) | adjacent;
  key = (key << 2) | std::uint32_t(action & 0x3);
  return key;
}

// Lava density of the bounding rectangle spanned by the two cells (endpoints
// excluded), in four buckets. A cheap observable stand-in for "how obstructed
// is the straight route", which the edge estimators can condition on.
inline std::uint32_t corridor_lava_bucket(const MazeTask& task, Coord a, Coord b) {
  int x0 = std::min(a.x, b.x), x1 = std::max(a.x, b.x);
  int y0 = std::min(a.y, b.y), y1 = std::max(a.y, b.y);
  int lava = 0, cells = 0;
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      Coord c{x, y};
      if (c == a || c == b) continue;
      ++cells;
      lava += task.at(c) == Cell::Lava;
    }
  }
  if (cells == 0) return 0;
  double frac = double(lava) / double(cells);
  if (frac < 0.05) return 0;
  if (frac < 0.2) return 1;
  if (frac < 0.4) return 2;
  return 3;
}

// Shared key for the edge estimators: the clamped displacement (magnitude
// matters for distances and discounts), the corridor obstruction bucket, and
// whether the target is the task goal (the only rewarding outcome).
inline std::uint64_t shared_edge_key(const MazeTask& task, Coord pos, Coord goal,
                                     int action) {
  int dx = std::clamp(goal.x - pos.x, -kDeltaClamp, kDeltaClamp) + kDeltaClamp;
  int dy = std::clamp(goal.y - pos.y, -kDeltaClamp, kDeltaClamp) + kDeltaClamp;
  std::uint32_t is_goal = goal == task.goal ? 1u : 0u;
  std::uint32_t key = std::uint32_t(dx);
  key = (key << 5) | std::uint32_t(dy);
  key = (key << 2) | corridor_lava_bucket(task, pos, goal);
  key = (key << 1) | is_goal;
  key = (key << 2) | std::uint32_t(action & 0x3);
  return key;
}

template <typename V>
struct BackoffTable {
  std::unordered_map<std::uint64_t, V, KeyHash> exact;
  std::unordered_map<std::uint64_t, V, KeyHash> shared;

  V lookup(std::uint64_t exact_k, std::uint64_t shared_k, const V& fallback) const {
    if (auto it = exact.find(exact_k); it != exact.end()) return it->second;
    if (auto it = shared.find(shared_k); it != shared.end()) return it->second;
    return fallback;
  }

  // Applies `step(current) -> new` to both levels. A fresh exact entry starts
  // from the backed-off estimate so creating it never discards knowledge.
  template <typename F>
  void update(std::uint64_t exact_k, std::uint64_t shared_k, const V& fallback,
              F&& step_fn) {
    auto [eit, fresh] = exact.try_emplace(exact_k, fallback);
    if (fresh) {
      if (auto sit = shared.find(shared_k); sit != shared.end()) {
        eit->second = sit->second;
      }
    }
    eit->second = step_fn(eit->second);
    auto sit = shared.try_emplace(shared_k, fallback).first;
    sit->second = step_fn(sit->second);
  }
};

}  // namespace detail

struct EpsilonSchedule {
  double eps_start = 1.0;
  double eps_end = 0.01;
  double anneal_fraction = 0.5;  // fraction of training over which to anneal

  double value(std::uint64_t steps_done, std::uint64_t total_steps) const {
    double horizon = anneal_fraction * double(total_steps);
    if (horizon <= 0.0) return eps_end;
    double frac = std::min(1.0, double(steps_done) / horizon);
    return eps_start + frac * (eps_end - eps_start);
  }
};

struct GoalConditionedQ {
  double gamma_intrinsic = 0.95;
  EpsilonSchedule epsilon;
  detail::BackoffTable<double> table;

  double lookup(const MazeTask& task, int task_id, Coord pos, Coord goal,
                Action a) const {
    int action = static_cast<int>(a);
    return table.lookup(
        detail::exact_key(task_id, task.index(pos), task.index(goal), action),
        detail::shared_policy_key(task, pos, goal, action), 0.0);
  }

  template <typename F>
  void update_entry(const MazeTask& task, int task_id, Coord pos, Coord goal,
                    Action a, F&& step_fn) {
    int action = static_cast<int>(a);
    table.update(detail::exact_key(task_id, task.index(pos), task.index(goal), action),
                 detail::shared_policy_key(task, pos, goal, action), 0.0,
                 std::forward<F>(step_fn));
  }

  // Tie-break preference: actions that reduce the goal displacement come
  // first (longer axis leading), so an untrained table already walks toward
  // its target instead of bouncing on a wall. Within that order, moves onto
  // visible lava (unless the lava cell is the target itself) rank last and
  // wall bounces next-to-last.
  static std::array<Action, kNumActions> action_preference(const MazeTask& task,
                                                           Coord pos, Coord goal) {
    int dx = goal.x - pos.x;
    int dy = goal.y - pos.y;
    Action toward_x = dx > 0 ? Action::Right : Action::Left;
    Action toward_y = dy > 0 ? Action::Down : Action::Up;
    std::array<Action, kNumActions> order{};
    int n = 0;
    if (dx != 0 && (std::abs(dx) >= std::abs(dy) || dy == 0)) {
      order[std::size_t(n++)] = toward_x;
      if (dy != 0) order[std::size_t(n++)] = toward_y;
    } else if (dy != 0) {
      order[std::size_t(n++)] = toward_y;
      if (dx != 0) order[std::size_t(n++)] = toward_x;
    }
    for (int a = 0; a < kNumActions; ++a) {
      Action act = static_cast<Action>(a);
      bool present = false;
      for (int i = 0; i < n; ++i) present = present || order[std::size_t(i)] == act;
      if (!present) order[std::size_t(n++)] = act;
    }
    auto danger = [&](Action a) {
      Coord d = action_delta(a);
      Coord next{pos.x + d.x, pos.y + d.y};
      if (!task.in_bounds(next)) return 1;  // bounce
      if (next == goal) return 0;
      return task.at(next) == Cell::Lava ? 2 : 0;
    };
    std::stable_sort(order.begin(), order.end(),
                     [&](Action a, Action b) { return danger(a) < danger(b); });
    return order;
  }

  /// Greedy action; ties resolve toward the goal displacement. Stepping onto
  /// visible lava that is not the target itself is excluded outright: its
  /// true action value is zero (terminal, no reach), so no estimate can make
  /// it preferable, and half-trained positive entries must not either.
  Action greedy(const MazeTask& task, int task_id, Coord pos, Coord goal) const {
    auto order = action_preference(task, pos, goal);
    bool have = false;
    Action best = order[0];
    double best_q = 0.0;
    for (int i = 0; i < kNumActions; ++i) {
      Action a = order[std::size_t(i)];
      Coord d = action_delta(a);
      Coord next{pos.x + d.x, pos.y + d.y};
      if (task.in_bounds(next) && task.at(next) == Cell::Lava && !(next == goal)) {
        continue;
      }
      double q = lookup(task, task_id, pos, goal, a);
      if (!have || q > best_q + 1e-12) {
        have = true;
        best_q = q;
        best = a;
      }
    }
    return best;  // all-lava surroundings fall back to the preferred action
  }
};

struct EdgeEstimatorTables {
  double gamma_task = 0.99;
  detail::BackoffTable<Histogram> value;
  detail::BackoffTable<Histogram> distance;
  std::unordered_map<std::uint64_t, double, detail::KeyHash> terminal;

  // Untrained returns are pessimistic (no reward); untrained distances are
  // optimistic (adjacent), which is what makes never-seen generated targets
  // look like shortcuts until suppression training corrects them.
  static Histogram default_value() { return Histogram::point_mass(0); }
  static Histogram default_distance() { return Histogram::point_mass(0); }

  Histogram value_at(const MazeTask& task, int task_id, Coord pos, Coord goal,
                     Action a) const {
    int action = static_cast<int>(a);
    return value.lookup(
        detail::exact_key(task_id, task.index(pos), task.index(goal), action),
        detail::shared_edge_key(task, pos, goal, action), default_value());
  }
  Histogram distance_at(const MazeTask& task, int task_id, Coord pos, Coord goal,
                        Action a) const {
    int action = static_cast<int>(a);
    return distance.lookup(
        detail::exact_key(task_id, task.index(pos), task.index(goal), action),
        detail::shared_edge_key(task, pos, goal, action), default_distance());
  }
  double terminal_at(int task_id, int pos) const {
    auto it = terminal.find(detail::terminal_key(task_id, pos));
    return it == terminal.end() ? 0.0 : it->second;
  }

  template <typename F>
  void update_value_entry(const MazeTask& task, int task_id, Coord pos, Coord goal,
                          Action a, F&& step_fn) {
    int action = static_cast<int>(a);
    value.update(detail::exact_key(task_id, task.index(pos), task.index(goal), action),
                 detail::shared_edge_key(task, pos, goal, action), default_value(),
                 std::forward<F>(step_fn));
  }
  template <typename F>
  void update_distance_entry(const MazeTask& task, int task_id, Coord pos, Coord goal,
                             Action a, F&& step_fn) {
    int action = static_cast<int>(a);
    distance.update(
        detail::exact_key(task_id, task.index(pos), task.index(goal), action),
        detail::shared_edge_key(task, pos, goal, action), default_distance(),
        std::forward<F>(step_fn));
  }
};

namespace detail {

inline BootstrapPolicy greedy_bootstrap(const GoalConditionedQ& q) {
  return [&q](const MazeTask& task, int task_id, Coord pos, Coord goal) {
    return q.greedy(task, task_id, pos, goal);
  };
}

}  // namespace detail

/// Tabular Q-learning on the intrinsic reach reward: +1 exactly when the next
/// position matches the relabelled goal, with bootstrap cut at goal arrival
/// and at terminal states.
inline void update_policy(GoalConditionedQ& q, const TaskResolver& tasks,
                          std::span<const HindsightSample> batch, double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("update_policy: alpha must be in (0, 1]");
  }
  for (const auto& sample : batch) {
    const MazeTask& task = tasks(sample.task_id);
    Coord s = sample.transition.state.position;
    Coord next = sample.transition.next_state.position;
    Coord goal = sample.goal.position;
    bool reached = next == goal;
    bool done = reached || sample.transition.terminal;
    double target = reached ? 1.0 : 0.0;
    if (!done) {
      double best = q.lookup(task, sample.task_id, next, goal, Action::Up);
      for (int a = 1; a < kNumActions; ++a) {
        best = std::max(best,
                        q.lookup(task, sample.task_id, next, goal, static_cast<Action>(a)));
      }
      target += q.gamma_intrinsic * best;
    }
    q.update_entry(task, sample.task_id, s, goal, sample.transition.action,
                   [&](double cur) { return cur + alpha * (target - cur); });
  }
}

/// Distributional update of the cumulative task-reward estimator: the target
/// is a point mass at the transition reward when the option ends (goal reached
/// or terminal state), and reward + gamma-scaled next histogram otherwise.
inline void update_value(EdgeEstimatorTables& tables, const GoalConditionedQ& q,
                         const TaskResolver& tasks,
                         std::span<const HindsightSample> batch, double alpha,
                         const BootstrapPolicy* bootstrap = nullptr) {
  if (!(alpha > 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("update_value: alpha must be in (0, 1]");
  }
  BootstrapPolicy fallback_policy = detail::greedy_bootstrap(q);
  const BootstrapPolicy& pol = bootstrap ? *bootstrap : fallback_policy;
  for (const auto& sample : batch) {
    const MazeTask& task = tasks(sample.task_id);
    Coord s = sample.transition.state.position;
    Coord next = sample.transition.next_state.position;
    Coord goal = sample.goal.position;
    double r = sample.transition.reward;
    Histogram target;
    if (next == goal || sample.transition.terminal) {
      std::array<double, 1> v{r};
      std::array<double, 1> m{1.0};
      target = project(v, m, value_support());
    } else {
      Action a2 = pol(task, sample.task_id, next, goal);
      Histogram h = tables.value_at(task, sample.task_id, next, goal, a2);
      std::array<double, kBins> atoms;
      for (int i = 0; i < kBins; ++i) {
        atoms[static_cast<std::size_t>(i)] =
            r + tables.gamma_task * value_support()[static_cast<std::size_t>(i)];
      }
      target = project(atoms, h.probs, value_support());
    }
    tables.update_value_entry(
        task, sample.task_id, s, goal, sample.transition.action,
        [&](const Histogram& cur) { return mix(cur, target, alpha); });
  }
}

/// Distributional update of the truncated-distance estimator: point mass at 1
/// when the goal is reached in one step, overflow when the trajectory ends in
/// a terminal state that is not the goal, and 1 + shifted next histogram
/// otherwise.
inline void update_distance(EdgeEstimatorTables& tables, const GoalConditionedQ& q,
                            const TaskResolver& tasks,
                            std::span<const HindsightSample> batch, double alpha,
                            const BootstrapPolicy* bootstrap = nullptr) {
  if (!(alpha > 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("update_distance: alpha must be in (0, 1]");
  }
  BootstrapPolicy fallback_policy = detail::greedy_bootstrap(q);
  const BootstrapPolicy& pol = bootstrap ? *bootstrap : fallback_policy;
  for (const auto& sample : batch) {
    const MazeTask& task = tasks(sample.task_id);
    Coord s = sample.transition.state.position;
    Coord next = sample.transition.next_state.position;
    Coord goal = sample.goal.position;
    Histogram target;
    if (next == goal) {
      target = Histogram::point_mass(0);  // distance 1
    } else if (sample.transition.terminal) {
      target = Histogram::point_mass(kOverflowBin);
    } else {
      Action a2 = pol(task, sample.task_id, next, goal);
      target = shift_distance(tables.distance_at(task, sample.task_id, next, goal, a2));
    }
    tables.update_distance_entry(
        task, sample.task_id, s, goal, sample.transition.action,
        [&](const Histogram& cur) { return mix(cur, target, alpha); });
  }
}

/// Moves the per-state terminal probability toward the observed flag.
inline void update_terminal(EdgeEstimatorTables& tables, const TaskResolver& tasks,
                            std::span<const HindsightSample> batch, double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("update_terminal: alpha must be in (0, 1]");
  }
  for (const auto& sample : batch) {
    const MazeTask& task = tasks(sample.task_id);
    int pos = task.index(sample.transition.next_state.position);
    double flag = sample.transition.terminal ? 1.0 : 0.0;
    auto key = detail::terminal_key(sample.task_id, pos);
    auto [it, fresh] = tables.terminal.try_emplace(key, 0.0);
    it->second += alpha * (flag - it->second);
  }
}

struct EdgeEstimate {
  double value = 0.0;
  double discount = 0.0;
  double distance = 0.0;       // overflow counted as d_max
  double terminal_from = 0.0;  // terminal probability of the source vertex
};

/// Read-only edge annotation between two checkpoints sharing a task context,
/// evaluated at the greedy low-level action. The distance is conditioned on
/// reaching at all (overflow counted as d_max only when reaching is
/// hopeless); failure probability is carried by the discount instead.
inline EdgeEstimate estimate_edge(const EdgeEstimatorTables& tables,
                                  const GoalConditionedQ& q, const MazeTask& task,
                                  int task_id, Coord from, Coord to) {
  Action a = q.greedy(task, task_id, from, to);
  EdgeEstimate e;
  e.value = expectation(tables.value_at(task, task_id, from, to, a), value_support());
  Histogram d = tables.distance_at(task, task_id, from, to, a);
  e.discount = transplant_discount(d, tables.gamma_task);
  e.distance = reach_conditional_distance(d, kDistanceMax);
  e.terminal_from = tables.terminal_at(task_id, task.index(from));
  return e;
}

/// Edge distance with a caller-chosen overflow stand-in (the checkpoint
/// pruner uses 2*d_max so unreachable candidates cluster away).
inline double expected_edge_distance(const EdgeEstimatorTables& tables,
                                     const GoalConditionedQ& q, const MazeTask& task,
                                     int task_id, Coord from, Coord to,
                                     double overflow_value) {
  Action a = q.greedy(task, task_id, from, to);
  return reach_conditional_distance(tables.distance_at(task, task_id, from, to, a),
                                    overflow_value);
}

/// Samples a checkpoint position from a task context (the delusion hook's
/// generator; positions may be lava or unreachable).
using CheckpointSampler = std::function<Coord(const MazeTask&, int task_id, Rng&)>;

/// Delusion suppression: retrains the distance estimator on the batch with
/// goals replaced by freshly generated checkpoints at a reduced rate. By the
/// structure of the distance rule, targets that never occur in experience
/// converge to the overflow outcome.
inline void suppress_delusions(EdgeEstimatorTables& tables, const GoalConditionedQ& q,
                               const TaskResolver& tasks,
                               std::span<const HindsightSample> batch,
                               const CheckpointSampler& generator, double scale,
                               double alpha, Rng& rng,
                               const BootstrapPolicy* bootstrap = nullptr) {
  std::vector<HindsightSample> relabelled(batch.begin(), batch.end());
  for (auto& sample : relabelled) {
    const MazeTask& task = tasks(sample.task_id);
    Coord g = generator(task, sample.task_id, rng);
    sample.goal = EnvState{g, task.terminal_at(g)};
  }
  update_distance(tables, q, tasks, relabelled, scale * alpha, bootstrap);
}

// --- snapshot serialization --------------------------------------------------

namespace detail {

template <typename V>
nlohmann::json table_to_json(const std::unordered_map<std::uint64_t, V, KeyHash>& m);

inline nlohmann::json histogram_to_json(const Histogram& h) {
  nlohmann::json a = nlohmann::json::array();
  for (double p : h.probs) a.push_back(p);
  return a;
}

inline Histogram histogram_from_json(const nlohmann::json& j) {
  Histogram h;
  for (int i = 0; i < kBins; ++i) h.probs[static_cast<std::size_t>(i)] = j.at(i).get<double>();
  return h;
}

template <typename V>
nlohmann::json table_to_json(const std::unordered_map<std::uint64_t, V, KeyHash>& m) {
  std::vector<std::uint64_t> keys;
  keys.reserve(m.size());
  for (const auto& [k, v] : m) keys.push_back(k);
  std::sort(keys.begin(), keys.end());
  nlohmann::json out = nlohmann::json::object();
  for (auto k : keys) {
    const V& v = m.at(k);
    if constexpr (std::is_same_v<V, double>) {
      out[std::to_string(k)] = v;
    } else {
      out[std::to_string(k)] = histogram_to_json(v);
    }
  }
  return out;
}

template <typename V>
void table_from_json(const nlohmann::json& j,
                     std::unordered_map<std::uint64_t, V, KeyHash>& m) {
  m.clear();
  for (auto it = j.begin(); it != j.end(); ++it) {
    std::uint64_t k = std::stoull(it.key());
    if constexpr (std::is_same_v<V, double>) {
      m[k] = it.value().get<double>();
    } else {
      m[k] = histogram_from_json(it.value());
    }
  }
}

}  // namespace detail

inline constexpr int kSnapshotVersion = 1;

inline nlohmann::json tables_to_json(const GoalConditionedQ& q,
                                     const EdgeEstimatorTables& t) {
  return nlohmann::json{
      {"version", kSnapshotVersion},
      {"gamma_intrinsic", q.gamma_intrinsic},
      {"gamma_task", t.gamma_task},
      {"q", {{"exact", detail::table_to_json(q.table.exact)},
             {"shared", detail::table_to_json(q.table.shared)}}},
      {"value", {{"exact", detail::table_to_json(t.value.exact)},
                 {"shared", detail::table_to_json(t.value.shared)}}},
      {"distance", {{"exact", detail::table_to_json(t.distance.exact)},
                    {"shared", detail::table_to_json(t.distance.shared)}}},
      {"terminal", detail::table_to_json(t.terminal)}};
}

inline void tables_from_json(const nlohmann::json& j, GoalConditionedQ& q,
                             EdgeEstimatorTables& t) {
  if (j.at("version").get<int>() != kSnapshotVersion) {
    throw std::invalid_argument("snapshot: unsupported version");
  }
  q.gamma_intrinsic = j.at("gamma_intrinsic").get<double>();
  t.gamma_task = j.at("gamma_task").get<double>();
  detail::table_from_json(j.at("q").at("exact"), q.table.exact);
  detail::table_from_json(j.at("q").at("shared"), q.table.shared);
  detail::table_from_json(j.at("value").at("exact"), t.value.exact);
  detail::table_from_json(j.at("value").at("shared"), t.value.shared);
  detail::table_from_json(j.at("distance").at("exact"), t.distance.exact);
  detail::table_from_json(j.at("distance").at("shared"), t.distance.shared);
  detail::table_from_json(j.at("terminal"), t.terminal);
}

}  // namespace proxyplan
