#pragma once

// Procedurally generated lava-maze navigation tasks: a rectangular grid of
// empty/lava/goal cells with a difficulty parameter controlling lava density,
// deterministic or action-noise dynamics, and the two spawn schemes used by
// the experiment harness (uniform for training, opposite-corner for eval).

#include <array>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <queue>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "proxyplan/rng.hpp"

namespace proxyplan {

enum class Cell : std::uint8_t { Empty, Lava, Goal };

enum class Action : std::uint8_t { Up, Down, Left, Right };
inline constexpr int kNumActions = 4;

struct Coord {
  int x = 0;
  int y = 0;
  friend bool operator==(const Coord&, const Coord&) = default;
};

/// Grid deltas; y grows downward, so Up decreases y.
inline Coord action_delta(Action a) {
  switch (a) {
    case Action::Up: return {0, -1};
    case Action::Down: return {0, 1};
    case Action::Left: return {-1, 0};
    case Action::Right: return {1, 0};
  }
  return {0, 0};
}

struct MazeTask {
  int width = 0;
  int height = 0;
  std::vector<Cell> cells;  // row-major
  Coord goal{};
  double difficulty = 0.0;
  std::uint64_t seed = 0;

  int size() const { return width * height; }
  bool in_bounds(Coord c) const {
    return c.x >= 0 && c.x < width && c.y >= 0 && c.y < height;
  }
  int index(Coord c) const { return c.y * width + c.x; }
  Coord coord(int i) const { return {i % width, i / width}; }
  Cell at(Coord c) const { return cells[static_cast<std::size_t>(index(c))]; }
  Cell& at(Coord c) { return cells[static_cast<std::size_t>(index(c))]; }
  bool terminal_at(Coord c) const { return at(c) != Cell::Empty; }
};

struct EnvState {
  Coord position{};
  bool terminated = false;
  friend bool operator==(const EnvState&, const EnvState&) = default;
};

struct Transition {
  EnvState state{};
  Action action = Action::Up;
  double reward = 0.0;
  EnvState next_state{};
  bool terminal = false;
};

enum class SpawnMode { TrainUniform, EvalOpposite };

/// Harness-level episode truncation; truncation does not mark states terminal.
inline int step_cap(const MazeTask& task) { return 4 * task.width * task.height; }

/// BFS step counts from `start` to every cell. Terminal cells are enterable
/// but never expanded, so paths run through empty cells only. Unreachable: -1.
inline std::vector<int> bfs_distances(const MazeTask& task, Coord start) {
  std::vector<int> dist(static_cast<std::size_t>(task.size()), -1);
  std::queue<int> frontier;
  dist[static_cast<std::size_t>(task.index(start))] = 0;
  frontier.push(task.index(start));
  while (!frontier.empty()) {
    int ci = frontier.front();
    frontier.pop();
    Coord c = task.coord(ci);
    if (task.terminal_at(c)) continue;
    for (int a = 0; a < kNumActions; ++a) {
      Coord d = action_delta(static_cast<Action>(a));
      Coord n{c.x + d.x, c.y + d.y};
      if (!task.in_bounds(n)) continue;
      int ni = task.index(n);
      if (dist[static_cast<std::size_t>(ni)] >= 0) continue;
      dist[static_cast<std::size_t>(ni)] = dist[static_cast<std::size_t>(ci)] + 1;
      frontier.push(ni);
    }
  }
  return dist;
}

namespace detail {

inline std::array<Coord, 4> corners(const MazeTask& task) {
  return {Coord{0, 0}, Coord{task.width - 1, 0}, Coord{0, task.height - 1},
          Coord{task.width - 1, task.height - 1}};
}

inline int manhattan(Coord a, Coord b) {
  return std::abs(a.x - b.x) + std::abs(a.y - b.y);
}

// Perimeter cells within the quadrant of corner `c` (strict half-spans, so
// the nearest corner of any quadrant cell is unique even for odd sizes).
inline std::vector<Coord> quadrant_perimeter(int width, int height, Coord c) {
  std::vector<Coord> out;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      bool perimeter = x == 0 || x == width - 1 || y == 0 || y == height - 1;
      if (!perimeter) continue;
      if (std::abs(x - c.x) < width / 2 && std::abs(y - c.y) < height / 2) {
        out.push_back({x, y});
      }
    }
  }
  return out;
}

}  // namespace detail

/// The deterministic evaluation spawn: the empty cell nearest the corner
/// diagonally opposite the goal's corner (ties broken row-major).
inline Coord eval_spawn(const MazeTask& task) {
  auto cs = detail::corners(task);
  int best_corner = 0;
  int best_d = detail::manhattan(task.goal, cs[0]);
  for (int i = 1; i < 4; ++i) {
    int d = detail::manhattan(task.goal, cs[i]);
    if (d < best_d) {
      best_d = d;
      best_corner = i;
    }
  }
  Coord opp{task.width - 1 - cs[best_corner].x, task.height - 1 - cs[best_corner].y};
  int best_i = -1;
  int best_od = 0;
  for (int i = 0; i < task.size(); ++i) {
    Coord c = task.coord(i);
    if (task.at(c) != Cell::Empty) continue;
    int d = detail::manhattan(c, opp);
    if (best_i < 0 || d < best_od) {
      best_i = i;
      best_od = d;
    }
  }
  if (best_i < 0) throw std::logic_error("eval_spawn: task has no empty cell");
  return task.coord(best_i);
}

/// Generates a maze task. Each cell other than the goal and the reserved
/// spawn corner is lava with probability `difficulty`; grids are resampled
/// (up to 1000 times) until BFS confirms a spawn-to-goal path, after which a
/// random monotone corridor is carved as a last resort.
inline MazeTask generate_task(int width, int height, double difficulty,
                              std::uint64_t seed) {
  if (width < 4 || height < 4) {
    throw std::invalid_argument("generate_task: width and height must be >= 4");
  }
  if (!(difficulty >= 0.0 && difficulty < 1.0)) {
    throw std::invalid_argument("generate_task: difficulty must be in [0, 1)");
  }

  MazeTask task;
  task.width = width;
  task.height = height;
  task.difficulty = difficulty;
  task.seed = seed;
  task.cells.assign(static_cast<std::size_t>(width * height), Cell::Empty);

  std::uint64_t diff_bits;
  static_assert(sizeof(diff_bits) == sizeof(difficulty));
  std::memcpy(&diff_bits, &difficulty, sizeof(diff_bits));
  std::uint64_t stream = derive_seed(seed, 0x6d617a65ULL);
  stream = derive_seed(stream, (std::uint64_t(width) << 32) | std::uint64_t(height));
  Rng rng(derive_seed(stream, diff_bits));

  auto cs = detail::corners(task);
  Coord corner = cs[static_cast<std::size_t>(uniform_int(rng, 0, 3))];
  auto perimeter = detail::quadrant_perimeter(width, height, corner);
  task.goal = perimeter[static_cast<std::size_t>(
      uniform_int(rng, 0, static_cast<int>(perimeter.size()) - 1))];
  Coord spawn{width - 1 - corner.x, height - 1 - corner.y};

  auto sample_grid = [&](Rng& r) {
    for (int i = 0; i < task.size(); ++i) {
      Coord c = task.coord(i);
      if (c == task.goal) {
        task.cells[static_cast<std::size_t>(i)] = Cell::Goal;
      } else if (c == spawn) {
        task.cells[static_cast<std::size_t>(i)] = Cell::Empty;
      } else {
        task.cells[static_cast<std::size_t>(i)] =
            chance(r, difficulty) ? Cell::Lava : Cell::Empty;
      }
    }
  };

  constexpr int kMaxAttempts = 1000;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    sample_grid(rng);
    auto dist = bfs_distances(task, spawn);
    if (dist[static_cast<std::size_t>(task.index(task.goal))] >= 0) return task;
  }

  // Carve a random monotone corridor through the last sampled grid.
  Coord cur = spawn;
  while (!(cur == task.goal)) {
    int dx = task.goal.x - cur.x;
    int dy = task.goal.y - cur.y;
    bool move_x;
    if (dx == 0) {
      move_x = false;
    } else if (dy == 0) {
      move_x = true;
    } else {
      move_x = chance(rng, 0.5);
    }
    if (move_x) {
      cur.x += dx > 0 ? 1 : -1;
    } else {
      cur.y += dy > 0 ? 1 : -1;
    }
    if (!(cur == task.goal)) task.at(cur) = Cell::Empty;
  }
  return task;
}

/// Samples an initial state. TrainUniform draws uniformly over empty cells;
/// EvalOpposite is deterministic and consumes no randomness.
inline EnvState initial_state(const MazeTask& task, SpawnMode mode, Rng& rng) {
  if (mode == SpawnMode::EvalOpposite) return EnvState{eval_spawn(task), false};
  std::vector<int> empties;
  for (int i = 0; i < task.size(); ++i) {
    if (task.cells[static_cast<std::size_t>(i)] == Cell::Empty) empties.push_back(i);
  }
  if (empties.empty()) throw std::logic_error("initial_state: task has no empty cell");
  int pick = uniform_int(rng, 0, static_cast<int>(empties.size()) - 1);
  return EnvState{task.coord(empties[static_cast<std::size_t>(pick)]), false};
}

/// One environment step. With probability `noise` the executed action is
/// replaced by a uniformly random one. Walking off the grid leaves the
/// position unchanged; entering lava or the goal terminates.
inline Transition step(const MazeTask& task, const EnvState& state, Action action,
                       double noise, Rng& rng) {
  if (state.terminated) throw std::logic_error("step: state is terminated");
  Action executed = action;
  if (noise > 0.0 && chance(rng, noise)) {
    executed = static_cast<Action>(uniform_int(rng, 0, kNumActions - 1));
  }
  Coord d = action_delta(executed);
  Coord next{state.position.x + d.x, state.position.y + d.y};
  if (!task.in_bounds(next)) next = state.position;
  bool terminal = task.terminal_at(next);
  double reward = task.at(next) == Cell::Goal ? 1.0 : 0.0;
  return Transition{state, action, reward, EnvState{next, terminal}, terminal};
}

// --- serialization ---------------------------------------------------------

inline void to_json(nlohmann::json& j, const MazeTask& task) {
  std::vector<std::string> rows;
  rows.reserve(static_cast<std::size_t>(task.height));
  for (int y = 0; y < task.height; ++y) {
    std::string row;
    row.reserve(static_cast<std::size_t>(task.width));
    for (int x = 0; x < task.width; ++x) {
      switch (task.at({x, y})) {
        case Cell::Empty: row.push_back('.'); break;
        case Cell::Lava: row.push_back('L'); break;
        case Cell::Goal: row.push_back('G'); break;
      }
    }
    rows.push_back(std::move(row));
  }
  j = nlohmann::json{{"width", task.width},
                     {"height", task.height},
                     {"difficulty", task.difficulty},
                     {"seed", task.seed},
                     {"goal", {task.goal.x, task.goal.y}},
                     {"cells", rows}};
}

inline void from_json(const nlohmann::json& j, MazeTask& task) {
  task.width = j.at("width").get<int>();
  task.height = j.at("height").get<int>();
  task.difficulty = j.at("difficulty").get<double>();
  task.seed = j.at("seed").get<std::uint64_t>();
  task.goal = {j.at("goal").at(0).get<int>(), j.at("goal").at(1).get<int>()};
  auto rows = j.at("cells").get<std::vector<std::string>>();
  if (static_cast<int>(rows.size()) != task.height) {
    throw std::invalid_argument("task json: row count does not match height");
  }
  task.cells.assign(static_cast<std::size_t>(task.width * task.height), Cell::Empty);
  for (int y = 0; y < task.height; ++y) {
    if (static_cast<int>(rows[static_cast<std::size_t>(y)].size()) != task.width) {
      throw std::invalid_argument("task json: row length does not match width");
    }
    for (int x = 0; x < task.width; ++x) {
      char ch = rows[static_cast<std::size_t>(y)][static_cast<std::size_t>(x)];
      Cell cell = Cell::Empty;
      if (ch == 'L') {
        cell = Cell::Lava;
      } else if (ch == 'G') {
        cell = Cell::Goal;
      } else if (ch != '.') {
        throw std::invalid_argument("task json: unknown cell character");
      }
      task.at({x, y}) = cell;
    }
  }
}

/// ASCII debug dump; marks the agent position with 'A' when provided.
inline std::string ascii_dump(const MazeTask& task, const Coord* agent = nullptr) {
  std::string out;
  for (int y = 0; y < task.height; ++y) {
    for (int x = 0; x < task.width; ++x) {
      if (agent && *agent == Coord{x, y}) {
        out.push_back('A');
        continue;
      }
      switch (task.at({x, y})) {
        case Cell::Empty: out.push_back('.'); break;
        case Cell::Lava: out.push_back('L'); break;
        case Cell::Goal: out.push_back('G'); break;
      }
    }
    out.push_back('\n');
  }
  return out;
}

}  // namespace proxyplan
