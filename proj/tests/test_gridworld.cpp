#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <set>

#include "proxyplan/gridworld.hpp"

using namespace proxyplan;

namespace {

int count_cells(const MazeTask& t, Cell kind) {
  int n = 0;
  for (auto c : t.cells) n += c == kind;
  return n;
}

}  // namespace

TEST_CASE("generation is a pure function of its arguments", "[gridworld]") {
  MazeTask a = generate_task(8, 8, 0.4, 42);
  MazeTask b = generate_task(8, 8, 0.4, 42);
  CHECK(a.cells == b.cells);
  CHECK(a.goal == b.goal);
  MazeTask c = generate_task(8, 8, 0.4, 43);
  CHECK(a.cells != c.cells);  // different seed, different maze
}

TEST_CASE("zero difficulty yields an all-empty maze with one goal", "[gridworld]") {
  MazeTask t = generate_task(4, 4, 0.0, 9);
  CHECK(count_cells(t, Cell::Goal) == 1);
  CHECK(count_cells(t, Cell::Lava) == 0);
  CHECK(t.at(t.goal) == Cell::Goal);
}

TEST_CASE("generated tasks keep a viable spawn-to-goal path", "[gridworld]") {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    MazeTask t = generate_task(8, 8, 0.55, seed);
    CHECK(count_cells(t, Cell::Goal) == 1);
    Coord spawn = eval_spawn(t);
    CHECK(t.at(spawn) == Cell::Empty);
    auto dist = bfs_distances(t, spawn);
    CHECK(dist[std::size_t(t.index(t.goal))] >= 0);
  }
}

TEST_CASE("lava density tracks the difficulty parameter", "[gridworld]") {
  // Aggregate over seeds; eligible cells exclude the goal and reserved spawn.
  int lava = 0, eligible = 0;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    MazeTask t = generate_task(12, 12, 0.4, 1000 + seed);
    lava += count_cells(t, Cell::Lava);
    eligible += t.size() - 2;
  }
  double p = 0.4;
  double sigma = std::sqrt(p * (1 - p) * eligible);
  // Carving can only remove lava, so allow a slightly asymmetric band.
  CHECK(std::abs(lava - p * eligible) < 4.0 * sigma + 0.02 * eligible);
}

TEST_CASE("steps move, bounce on walls, and terminate on lava/goal", "[gridworld]") {
  MazeTask t = generate_task(4, 4, 0.0, 1);
  Rng rng(0);
  EnvState s{{1, 1}, false};

  Transition up = step(t, s, Action::Up, 0.0, rng);
  CHECK(up.next_state.position == Coord{1, 0});
  CHECK(up.reward == 0.0);
  CHECK_FALSE(up.terminal);

  EnvState edge{{0, 0}, false};
  Transition bounce = step(t, edge, Action::Up, 0.0, rng);
  CHECK(bounce.next_state.position == Coord{0, 0});
  CHECK_FALSE(bounce.terminal);

  // Walk into the goal: reward 1, terminal.
  Coord beside{t.goal.x, t.goal.y};
  Action into = Action::Right;
  if (t.goal.x > 0) {
    beside = {t.goal.x - 1, t.goal.y};
    into = Action::Right;
  } else {
    beside = {t.goal.x + 1, t.goal.y};
    into = Action::Left;
  }
  Transition win = step(t, EnvState{beside, false}, into, 0.0, rng);
  CHECK(win.reward == 1.0);
  CHECK(win.terminal);
  CHECK(win.next_state.terminated);

  // Lava is terminal with zero reward.
  MazeTask lt = t;
  lt.at({2, 1}) = Cell::Lava;
  Transition burn = step(lt, EnvState{{1, 1}, false}, Action::Right, 0.0, rng);
  CHECK(burn.terminal);
  CHECK(burn.reward == 0.0);
}

TEST_CASE("stepping a terminated state is rejected", "[gridworld]") {
  MazeTask t = generate_task(4, 4, 0.0, 2);
  Rng rng(0);
  EnvState dead{{0, 0}, true};
  CHECK_THROWS_AS(step(t, dead, Action::Up, 0.0, rng), std::logic_error);
}

TEST_CASE("deterministic step consumes no randomness", "[gridworld]") {
  MazeTask t = generate_task(4, 4, 0.0, 3);
  Rng a(99), b(99);
  step(t, EnvState{{1, 1}, false}, Action::Down, 0.0, a);
  CHECK(a() == b());
}

TEST_CASE("action noise mixes in a uniform random action", "[gridworld]") {
  MazeTask t = generate_task(6, 6, 0.0, 4);
  Rng rng(7);
  EnvState s{{2, 2}, false};
  const int n = 20000;
  std::map<int, int> counts;  // executed direction, inferred from movement
  for (int i = 0; i < n; ++i) {
    Transition tr = step(t, s, Action::Right, 0.1, rng);
    Coord d{tr.next_state.position.x - s.position.x,
            tr.next_state.position.y - s.position.y};
    for (int a = 0; a < kNumActions; ++a) {
      if (action_delta(static_cast<Action>(a)) == d) counts[a]++;
    }
  }
  // Intended action executes with probability 0.9 + 0.1/4 = 0.925.
  auto within_3sigma = [&](int observed, double p) {
    double sigma = std::sqrt(p * (1 - p) * n);
    return std::abs(observed - p * n) < 3.0 * sigma;
  };
  CHECK(within_3sigma(counts[int(Action::Right)], 0.925));
  CHECK(within_3sigma(counts[int(Action::Up)], 0.025));
  CHECK(within_3sigma(counts[int(Action::Down)], 0.025));
  CHECK(within_3sigma(counts[int(Action::Left)], 0.025));
}

TEST_CASE("evaluation spawn is deterministic, empty, and connected", "[gridworld]") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    MazeTask t = generate_task(8, 8, 0.4, 500 + seed);
    Coord s1 = eval_spawn(t);
    Coord s2 = eval_spawn(t);
    CHECK(s1 == s2);
    CHECK(t.at(s1) == Cell::Empty);
    auto dist = bfs_distances(t, s1);
    CHECK(dist[std::size_t(t.index(t.goal))] >= 0);
  }
}

TEST_CASE("eval spawn lands opposite the goal's corner", "[gridworld]") {
  // Hand-built: goal in the top-left corner region, lava on the far corner.
  MazeTask t;
  nlohmann::json j = {{"width", 5},  {"height", 5}, {"difficulty", 0.0}, {"seed", 0},
                      {"goal", {0, 0}},
                      {"cells", {"G....", ".....", ".....", ".....", "....L"}}};
  t = j.get<MazeTask>();
  Coord spawn = eval_spawn(t);
  // (4,4) is lava, so the nearest empty cell to the opposite corner wins.
  CHECK((spawn == Coord{3, 4} || spawn == Coord{4, 3}));
  CHECK(spawn == Coord{4, 3});  // row-major tie-break
}

TEST_CASE("train spawns are uniform over empty cells", "[gridworld]") {
  MazeTask t = generate_task(4, 4, 0.3, 11);
  std::vector<int> empties;
  for (int i = 0; i < t.size(); ++i) {
    if (t.cells[std::size_t(i)] == Cell::Empty) empties.push_back(i);
  }
  Rng rng(13);
  const int n = 10000;
  std::map<int, int> counts;
  for (int i = 0; i < n; ++i) {
    EnvState s = initial_state(t, SpawnMode::TrainUniform, rng);
    CHECK_FALSE(s.terminated);
    counts[t.index(s.position)]++;
  }
  double p = 1.0 / double(empties.size());
  double sigma = std::sqrt(p * (1 - p) * n);
  for (int cell : empties) {
    CHECK(std::abs(counts[cell] - p * n) < 3.5 * sigma);
  }
}

TEST_CASE("task json round-trips bit-exactly", "[gridworld]") {
  MazeTask t = generate_task(8, 8, 0.4, 77);
  nlohmann::json j = t;
  MazeTask back = j.get<MazeTask>();
  CHECK(back.cells == t.cells);
  CHECK(back.goal == t.goal);
  CHECK(back.width == t.width);
  CHECK(back.height == t.height);
  CHECK(back.seed == t.seed);
  CHECK(back.difficulty == t.difficulty);  // exact, not approximate
  nlohmann::json j2 = back;
  CHECK(j.dump() == j2.dump());
}

TEST_CASE("precondition violations are rejected", "[gridworld]") {
  CHECK_THROWS_AS(generate_task(3, 8, 0.4, 1), std::invalid_argument);
  CHECK_THROWS_AS(generate_task(8, 8, 1.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(generate_task(8, 8, -0.1, 1), std::invalid_argument);
}

TEST_CASE("step cap is four times the cell count", "[gridworld]") {
  MazeTask t = generate_task(8, 8, 0.4, 1);
  CHECK(step_cap(t) == 256);
}

TEST_CASE("ascii dump renders rows with the agent marker", "[gridworld]") {
  MazeTask t = generate_task(4, 4, 0.0, 1);
  Coord agent{1, 1};
  std::string art = ascii_dump(t, &agent);
  CHECK(art.size() == 4 * 5);
  CHECK(art[std::size_t(1 * 5 + 1)] == 'A');
}
