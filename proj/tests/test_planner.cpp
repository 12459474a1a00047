#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "proxyplan/dp_oracle.hpp"
#include "proxyplan/estimators.hpp"
#include "proxyplan/gridworld.hpp"
#include "proxyplan/planner.hpp"

using namespace proxyplan;

namespace {

MazeTask fixture_from_rows(std::vector<std::string> rows, Coord goal) {
  nlohmann::json j = {{"width", int(rows[0].size())},
                      {"height", int(rows.size())},
                      {"difficulty", 0.0},
                      {"seed", 0},
                      {"goal", {goal.x, goal.y}},
                      {"cells", rows}};
  return j.get<MazeTask>();
}

// Directly writes a point-mass distance histogram into the exact table.
void set_distance(EdgeEstimatorTables& tables, const MazeTask& t, int task_id,
                  Coord from, Coord to, int bin) {
  for (int a = 0; a < kNumActions; ++a) {
    tables.update_distance_entry(
        t, task_id, from, to, static_cast<Action>(a),
        [&](const Histogram&) { return Histogram::point_mass(bin); });
  }
}

void set_value(EdgeEstimatorTables& tables, const MazeTask& t, int task_id, Coord from,
               Coord to, double value) {
  std::array<double, 1> v{value};
  std::array<double, 1> m{1.0};
  Histogram h = project(v, m, value_support());
  for (int a = 0; a < kNumActions; ++a) {
    tables.update_value_entry(t, task_id, from, to, static_cast<Action>(a),
                              [&](const Histogram&) { return h; });
  }
}

// Synthetic proxy graph with given matrices (the invariants pre-applied).
ProxyGraph synthetic_graph(int n, const std::vector<double>& r,
                           const std::vector<double>& g) {
  ProxyGraph graph;
  for (int i = 0; i < n; ++i) graph.vertices.push_back(EnvState{{i, 0}, false});
  graph.reward = r;
  graph.discount = g;
  graph.distance.assign(std::size_t(n * n), 1.0);
  graph.terminal.assign(std::size_t(n), 0.0);
  graph.alive.assign(std::size_t(n * n), 0);
  for (int i = 0; i < n; ++i) {
    for (int j = 1; j < n; ++j) {
      if (i == j) continue;
      bool nonzero = r[std::size_t(i * n + j)] != 0.0 || g[std::size_t(i * n + j)] != 0.0;
      graph.alive[graph.idx(i, j)] = nonzero;
    }
  }
  return graph;
}

// Max over checkpoint paths of length <= depth of the discounted reward sum.
double brute_force_value(const ProxyGraph& graph, int start, int depth) {
  if (depth == 0) return 0.0;
  double best = 0.0;
  for (int j = 0; j < graph.n(); ++j) {
    if (j == start) continue;
    double v = graph.r(start, j) + graph.g(start, j) * brute_force_value(graph, j, depth - 1);
    best = std::max(best, v);
  }
  return best;
}

}  // namespace

TEST_CASE("graph construction applies the structural zeroings", "[planner]") {
  MazeTask t = fixture_from_rows({".....", ".....", ".....", ".....", "....G"}, {4, 4});
  EdgeEstimatorTables tables;
  GoalConditionedQ q;
  // Mark the goal as reliably terminal.
  tables.terminal[(std::uint64_t(0) << 32) | std::uint64_t(t.index(t.goal))] = 1.0;

  CheckpointSet set;
  set.checkpoints = {EnvState{{4, 4}, true}, EnvState{{2, 2}, false},
                     EnvState{{0, 4}, false}};
  set.must_keep = {1, 0, 0};
  // Distances: all defaults are 1 except a far-fetched edge (2,2) -> (0,4).
  set_distance(tables, t, 0, {2, 2}, {0, 4}, kOverflowBin);  // estimated unreachable

  EnvState current{{0, 0}, false};
  ProxyGraph graph = build_graph(set, current, tables, q, t, 0, 8.0);
  REQUIRE(graph.n() == 4);  // current + 3 checkpoints

  int goal_v = -1, mid_v = -1, far_v = -1;
  for (int i = 0; i < 4; ++i) {
    if (graph.vertices[std::size_t(i)].position == Coord{4, 4}) goal_v = i;
    if (graph.vertices[std::size_t(i)].position == Coord{2, 2}) mid_v = i;
    if (graph.vertices[std::size_t(i)].position == Coord{0, 4}) far_v = i;
  }
  REQUIRE(goal_v > 0);
  REQUIRE(mid_v > 0);
  REQUIRE(far_v > 0);

  for (int i = 0; i < 4; ++i) {
    CHECK(graph.r(i, i) == 0.0);          // no self loops
    CHECK(graph.g(i, i) == 0.0);
    CHECK(graph.r(i, 0) == 0.0);          // nothing points back at the agent
    CHECK(graph.g(i, 0) == 0.0);
    CHECK(graph.g(goal_v, i) == 0.0);     // terminal row zeroed
    CHECK(graph.r(goal_v, i) == 0.0);
  }
  // The far-fetched edge was deleted, its siblings survive.
  CHECK_FALSE(graph.edge_alive(mid_v, far_v));
  CHECK(graph.edge_alive(0, mid_v));
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      CHECK(graph.g(i, j) >= 0.0);
      CHECK(graph.g(i, j) <= 1.0);
    }
  }
}

TEST_CASE("graph edges reflect converged estimates", "[planner]") {
  MazeTask t = fixture_from_rows({".....", ".....", ".....", ".....", "....G"}, {4, 4});
  EdgeEstimatorTables tables;
  GoalConditionedQ q;
  // Current at (4,1), goal 3 steps below: hand-write the converged histograms.
  set_distance(tables, t, 0, {4, 1}, {4, 4}, 2);  // distance 3
  set_value(tables, t, 0, {4, 1}, {4, 4}, std::pow(0.99, 2));

  CheckpointSet set;
  set.checkpoints = {EnvState{{4, 4}, true}};
  set.must_keep = {1};
  ProxyGraph graph = build_graph(set, EnvState{{4, 1}, false}, tables, q, t, 0, 8.0);
  REQUIRE(graph.n() == 2);
  CHECK(graph.g(0, 1) == Catch::Approx(std::pow(0.99, 3)).margin(1e-12));
  CHECK(graph.r(0, 1) == Catch::Approx(std::pow(0.99, 2)).margin(1e-3));
  CHECK(graph.d(0, 1) == Catch::Approx(3.0));
}

TEST_CASE("value iteration solves the chain fixture by hand arithmetic", "[planner]") {
  // Vertices: 0 = current, 1 = A, 2 = goal. Edges: 0->1 (no reward),
  // 1->2 (reward 1). After two iterations V(1) = 1, V(0) = g01 * 1 + r01.
  int n = 3;
  std::vector<double> r(9, 0.0), g(9, 0.0);
  r[std::size_t(0 * 3 + 1)] = 0.0;
  g[std::size_t(0 * 3 + 1)] = 0.95;
  r[std::size_t(1 * 3 + 2)] = 1.0;
  g[std::size_t(1 * 3 + 2)] = 0.9;
  ProxyGraph graph = synthetic_graph(n, r, g);

  auto v1 = value_iterate(graph, 1);
  CHECK(v1[0] == 0.0);
  CHECK(v1[1] == Catch::Approx(1.0));

  auto v2 = value_iterate(graph, 2);
  CHECK(v2[1] == Catch::Approx(1.0));
  CHECK(v2[0] == Catch::Approx(0.95 * 1.0 + 0.0));

  auto v5 = value_iterate(graph, 5);
  CHECK(v5[0] == Catch::Approx(0.95));
}

TEST_CASE("zero matrices keep the value at zero", "[planner]") {
  ProxyGraph graph = synthetic_graph(4, std::vector<double>(16, 0.0),
                                     std::vector<double>(16, 0.0));
  auto v = value_iterate(graph, 5);
  for (double x : v) CHECK(x == 0.0);
}

TEST_CASE("five-iteration values match exhaustive path enumeration", "[planner]") {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    int n = uniform_int(rng, 2, 5);
    std::vector<double> r(std::size_t(n * n), 0.0), g(std::size_t(n * n), 0.0);
    std::vector<int> terminal_rows;
    for (int i = 0; i < n; ++i) {
      if (uniform_real(rng) < 0.2) terminal_rows.push_back(i);
    }
    for (int i = 0; i < n; ++i) {
      bool term = std::find(terminal_rows.begin(), terminal_rows.end(), i) !=
                  terminal_rows.end();
      for (int j = 1; j < n; ++j) {
        if (i == j || term) continue;
        if (uniform_real(rng) < 0.3) continue;  // pruned edge
        r[std::size_t(i * n + j)] = uniform_real(rng);
        g[std::size_t(i * n + j)] = uniform_real(rng) * 0.99;
      }
    }
    ProxyGraph graph = synthetic_graph(n, r, g);
    auto v = value_iterate(graph, 5);
    for (int i = 0; i < n; ++i) {
      CHECK(v[std::size_t(i)] ==
            Catch::Approx(brute_force_value(graph, i, 5)).margin(1e-9));
    }
  }
}

TEST_CASE("value iteration is monotone and bounded", "[planner]") {
  Rng rng(77);
  int n = 5;
  std::vector<double> r(25, 0.0), g(25, 0.0);
  double gmax = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int j = 1; j < n; ++j) {
      if (i == j) continue;
      r[std::size_t(i * n + j)] = uniform_real(rng);
      g[std::size_t(i * n + j)] = uniform_real(rng) * 0.9;
      gmax = std::max(gmax, g[std::size_t(i * n + j)]);
    }
  }
  ProxyGraph graph = synthetic_graph(n, r, g);
  std::vector<double> prev(std::size_t(n), 0.0);
  for (int iters = 1; iters <= 8; ++iters) {
    auto v = value_iterate(graph, iters);
    for (int i = 0; i < n; ++i) {
      CHECK(v[std::size_t(i)] >= prev[std::size_t(i)] - 1e-12);
      CHECK(v[std::size_t(i)] <= 1.0 / (1.0 - gmax) + 1e-9);
    }
    prev = v;
  }
}

TEST_CASE("target selection prefers score, then distance, then index", "[planner]") {
  // Two-vertex graph: the only option is the goal.
  {
    std::vector<double> r(4, 0.0), g(4, 0.0);
    r[1] = 0.5;
    g[1] = 0.9;
    ProxyGraph graph = synthetic_graph(2, r, g);
    auto v = value_iterate(graph, 5);
    CHECK(select_target(graph, v).target == 1);
  }
  // Chain: direct edge to goal pruned, so the intermediate wins.
  {
    int n = 3;
    std::vector<double> r(9, 0.0), g(9, 0.0);
    g[std::size_t(0 * 3 + 1)] = 0.9;   // current -> A alive
    r[std::size_t(1 * 3 + 2)] = 1.0;   // A -> goal carries the reward
    g[std::size_t(1 * 3 + 2)] = 0.9;
    ProxyGraph graph = synthetic_graph(n, r, g);
    auto v = value_iterate(graph, 5);
    CHECK(select_target(graph, v).target == 1);
  }
  // Tie on score: smaller estimated distance wins, then lower index.
  {
    int n = 3;
    std::vector<double> r(9, 0.0), g(9, 0.0);
    r[std::size_t(0 * 3 + 1)] = 0.5;
    r[std::size_t(0 * 3 + 2)] = 0.5;
    ProxyGraph graph = synthetic_graph(n, r, g);
    graph.distance[graph.idx(0, 1)] = 5.0;
    graph.distance[graph.idx(0, 2)] = 2.0;
    auto v = value_iterate(graph, 5);
    CHECK(select_target(graph, v).target == 2);
    graph.distance[graph.idx(0, 1)] = 2.0;
    CHECK(select_target(graph, v).target == 1);
  }
}

TEST_CASE("all-pruned rows fall back to the nearest vertex", "[planner]") {
  int n = 4;
  ProxyGraph graph = synthetic_graph(n, std::vector<double>(16, 0.0),
                                     std::vector<double>(16, 0.0));
  for (auto& a : graph.alive) a = 0;
  graph.distance[graph.idx(0, 1)] = 9.0;
  graph.distance[graph.idx(0, 2)] = 4.0;
  graph.distance[graph.idx(0, 3)] = 6.0;
  auto v = value_iterate(graph, 5);
  CHECK(select_target(graph, v).target == 2);
}

TEST_CASE("single-vertex graphs are a contract violation", "[planner]") {
  ProxyGraph graph = synthetic_graph(1, {0.0}, {0.0});
  auto v = value_iterate(graph, 5);
  CHECK_THROWS_AS(select_target(graph, v), std::logic_error);
}

TEST_CASE("replanning rules per mode and event", "[planner]") {
  using enum ReplanEvent;
  using enum ReplanDecision;
  CHECK(replan_policy(ReplanMode::Once, EpisodeStart) == RebuildGraphAndPlan);
  CHECK(replan_policy(ReplanMode::Regen, EpisodeStart) == RebuildGraphAndPlan);
  CHECK(replan_policy(ReplanMode::Once, CheckpointReached) == ReplanOnExistingGraph);
  CHECK(replan_policy(ReplanMode::Once, Timeout) == ReplanOnExistingGraph);
  CHECK(replan_policy(ReplanMode::Regen, CheckpointReached) == RebuildGraphAndPlan);
  CHECK(replan_policy(ReplanMode::Regen, Timeout) == RebuildGraphAndPlan);
}

TEST_CASE("composite path value truncates its series", "[planner]") {
  std::vector<double> v{1.0, 1.0, 1.0};
  std::vector<double> g{0.5, 0.5, 0.5};
  CHECK(composite_path_value(v, g) == Catch::Approx(1.0 + 0.5 + 0.25));
  CHECK(composite_path_value(v, g, 2) == Catch::Approx(1.0 + 0.5));
  std::vector<double> long_v(100, 1.0), long_g(100, 1.0);
  CHECK(composite_path_value(long_v, long_g, 50) == Catch::Approx(50.0));
}

TEST_CASE("selection is invariant to joint positive reward rescaling", "[planner]") {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    int n = uniform_int(rng, 3, 6);
    std::vector<double> r(std::size_t(n * n), 0.0), g(std::size_t(n * n), 0.0);
    for (int i = 0; i < n; ++i) {
      for (int j = 1; j < n; ++j) {
        if (i == j) continue;
        r[std::size_t(i * n + j)] = uniform_real(rng);
      }
    }
    ProxyGraph graph = synthetic_graph(n, r, g);
    auto v = value_iterate(graph, 5);
    int before = select_target(graph, v).target;

    std::vector<double> r2(r);
    for (auto& x : r2) x *= 3.7;
    ProxyGraph scaled = synthetic_graph(n, r2, g);
    auto v2 = value_iterate(scaled, 5);
    CHECK(select_target(scaled, v2).target == before);
  }
}

TEST_CASE("perturbed composite values stay within the first-order bound",
          "[planner]") {
  // Mini version of the full sweep: one fixture, exact oracle edges.
  MazeTask t = generate_task(8, 8, 0.35, 4);
  OracleTables oracle = compute_oracle(t);
  Coord spawn = eval_spawn(t);
  std::vector<Coord> path{spawn};
  Coord cur = spawn;
  while (!(cur == t.goal)) {
    Action a = oracle.optimal_action(t.index(cur), t.index(t.goal));
    Coord d = action_delta(a);
    cur = {cur.x + d.x, cur.y + d.y};
    path.push_back(cur);
  }
  std::vector<Coord> waypoints;
  for (std::size_t i = 3; i < path.size(); i += 3) waypoints.push_back(path[i]);
  if (waypoints.empty() || !(waypoints.back() == t.goal)) waypoints.push_back(t.goal);
  std::vector<double> ev, eg;
  Coord from = spawn;
  for (Coord to : waypoints) {
    auto pe = evaluate_policy(t, optimal_policy(oracle, t, to), to, 0.99, 0.0);
    ev.push_back(pe.value[std::size_t(t.index(from))]);
    eg.push_back(pe.discount[std::size_t(t.index(from))]);
    from = to;
  }
  double exact = composite_path_value(ev, eg);
  double eps_v = 0.01, eps_g = 0.01;
  double bound = 1.5 * (eps_v / (1 - 0.99) + eps_g / ((1 - 0.99) * (1 - 0.99)));
  std::vector<double> pv(ev), pg(eg);
  for (auto& x : pv) x += eps_v;
  for (auto& x : pg) x = std::min(1.0, x + eps_g);
  CHECK(std::abs(composite_path_value(pv, pg) - exact) <= bound);
}

TEST_CASE("proxy graphs dump to json", "[planner]") {
  ProxyGraph graph = synthetic_graph(3, std::vector<double>(9, 0.1),
                                     std::vector<double>(9, 0.2));
  nlohmann::json j = graph;
  CHECK(j.at("vertices").size() == 3);
  CHECK(j.at("reward").size() == 9);
  CHECK(j.at("discount").size() == 9);
}
