#pragma once

// Experiment orchestration: the training loop (explore / follow the planned
// target, train every few actions, hindsight-relabel finished episodes), the
// evaluation protocol (opposite-corner spawns, greedy acting, held-out task
// suites across difficulties), delusion diagnostics against the DP oracle,
// metric export, and the perturbation sweep for the composite-value bound.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "proxyplan/agent.hpp"
#include "proxyplan/checkpoints.hpp"
#include "proxyplan/dp_oracle.hpp"
#include "proxyplan/estimators.hpp"
#include "proxyplan/gridworld.hpp"
#include "proxyplan/planner.hpp"
#include "proxyplan/replay.hpp"

namespace proxyplan {

inline const char* agent_kind_name(AgentKind k) {
  switch (k) {
    case AgentKind::SkipperOnce: return "SkipperOnce";
    case AgentKind::SkipperRegen: return "SkipperRegen";
    case AgentKind::Modelfree: return "Modelfree";
    case AgentKind::SkipperGoal: return "SkipperGoal";
  }
  return "SkipperOnce";
}

inline AgentKind agent_kind_from_name(const std::string& name) {
  if (name == "SkipperOnce") return AgentKind::SkipperOnce;
  if (name == "SkipperRegen") return AgentKind::SkipperRegen;
  if (name == "Modelfree") return AgentKind::Modelfree;
  if (name == "SkipperGoal") return AgentKind::SkipperGoal;
  throw std::invalid_argument("unknown agent kind: " + name);
}

struct ExperimentConfig {
  int grid_width = 8;
  int grid_height = 8;
  double train_difficulty = 0.4;
  std::vector<double> eval_difficulties = {0.25, 0.35, 0.45, 0.55};
  int num_train_tasks = 25;  // 0 draws a fresh task for every training episode
  std::uint64_t total_interactions = 200000;
  int n_generate = 32;
  int k_prune = 12;
  int vi_iterations = 5;
  double edge_distance_threshold = 8.0;
  int replan_interval = 8;
  int her_k = 4;
  double gamma_task = 0.99;
  double gamma_intrinsic = 0.95;
  double noise = 0.0;
  AgentKind agent = AgentKind::SkipperOnce;
  bool delusion_suppression = false;
  bool include_invalid_checkpoints = false;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  int eval_episodes = 20;
  int eval_tasks_per_difficulty = 20;
  double alpha = 0.1;
  int train_every = 4;
  int batch_size = 32;
  std::size_t replay_capacity = 100000;
  double eval_cadence_fraction = 0.05;
  double suppression_scale = 0.25;
  int delusion_probe_tasks = 10;
  int delusion_probes_per_task = 5;
  bool parallel_seeds = true;

  void validate() const {
    auto fail = [](const std::string& msg) {
      throw std::invalid_argument("config: " + msg);
    };
    if (grid_width < 4 || grid_height < 4) fail("grid must be at least 4x4");
    if (!(train_difficulty >= 0.0 && train_difficulty < 1.0)) {
      fail("train_difficulty must be in [0, 1)");
    }
    for (double d : eval_difficulties) {
      if (!(d >= 0.0 && d < 1.0)) fail("eval difficulties must be in [0, 1)");
    }
    if (num_train_tasks < 0) fail("num_train_tasks must be >= 0");
    if (total_interactions == 0) fail("total_interactions must be positive");
    if (n_generate < 2) fail("n_generate must be >= 2");
    if (k_prune < 1 || k_prune > n_generate) fail("k_prune must be in [1, n_generate]");
    if (vi_iterations < 1) fail("vi_iterations must be >= 1");
    if (edge_distance_threshold <= 0.0) fail("edge_distance_threshold must be positive");
    if (replan_interval < 1) fail("replan_interval must be >= 1");
    if (her_k < 1) fail("her_k must be >= 1");
    if (!(gamma_task > 0.0 && gamma_task <= 1.0)) fail("gamma_task must be in (0, 1]");
    if (!(gamma_intrinsic > 0.0 && gamma_intrinsic <= 1.0)) {
      fail("gamma_intrinsic must be in (0, 1]");
    }
    if (!(noise >= 0.0 && noise <= 1.0)) fail("noise must be in [0, 1]");
    if (seeds.empty()) fail("at least one seed required");
    if (eval_episodes < 1) fail("eval_episodes must be >= 1");
    if (eval_tasks_per_difficulty < 1) fail("eval_tasks_per_difficulty must be >= 1");
    if (!(alpha > 0.0 && alpha <= 1.0)) fail("alpha must be in (0, 1]");
    if (train_every < 1) fail("train_every must be >= 1");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (replay_capacity == 0) fail("replay_capacity must be positive");
    if (!(eval_cadence_fraction > 0.0 && eval_cadence_fraction <= 1.0)) {
      fail("eval_cadence_fraction must be in (0, 1]");
    }
    if (!(suppression_scale > 0.0 && suppression_scale <= 1.0)) {
      fail("suppression_scale must be in (0, 1]");
    }
  }

  AgentParams agent_params() const {
    AgentParams p;
    p.kind = agent;
    p.n_generate = n_generate;
    p.k_prune = k_prune;
    p.vi_iterations = vi_iterations;
    p.edge_distance_threshold = edge_distance_threshold;
    p.replan_interval = replan_interval;
    p.include_invalid_checkpoints = include_invalid_checkpoints;
    return p;
  }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"grid_width", c.grid_width},
                     {"grid_height", c.grid_height},
                     {"train_difficulty", c.train_difficulty},
                     {"eval_difficulties", c.eval_difficulties},
                     {"num_train_tasks", c.num_train_tasks},
                     {"total_interactions", c.total_interactions},
                     {"n_generate", c.n_generate},
                     {"k_prune", c.k_prune},
                     {"vi_iterations", c.vi_iterations},
                     {"edge_distance_threshold", c.edge_distance_threshold},
                     {"replan_interval", c.replan_interval},
                     {"her_k", c.her_k},
                     {"gamma_task", c.gamma_task},
                     {"gamma_intrinsic", c.gamma_intrinsic},
                     {"noise", c.noise},
                     {"agent", agent_kind_name(c.agent)},
                     {"delusion_suppression", c.delusion_suppression},
                     {"include_invalid_checkpoints", c.include_invalid_checkpoints},
                     {"seeds", c.seeds},
                     {"eval_episodes", c.eval_episodes},
                     {"eval_tasks_per_difficulty", c.eval_tasks_per_difficulty},
                     {"alpha", c.alpha},
                     {"train_every", c.train_every},
                     {"batch_size", c.batch_size},
                     {"replay_capacity", c.replay_capacity},
                     {"eval_cadence_fraction", c.eval_cadence_fraction},
                     {"suppression_scale", c.suppression_scale},
                     {"delusion_probe_tasks", c.delusion_probe_tasks},
                     {"delusion_probes_per_task", c.delusion_probes_per_task},
                     {"parallel_seeds", c.parallel_seeds}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  ExperimentConfig d;
  c.grid_width = j.value("grid_width", d.grid_width);
  c.grid_height = j.value("grid_height", d.grid_height);
  c.train_difficulty = j.value("train_difficulty", d.train_difficulty);
  c.eval_difficulties = j.value("eval_difficulties", d.eval_difficulties);
  c.num_train_tasks = j.value("num_train_tasks", d.num_train_tasks);
  c.total_interactions = j.value("total_interactions", d.total_interactions);
  c.n_generate = j.value("n_generate", d.n_generate);
  c.k_prune = j.value("k_prune", d.k_prune);
  c.vi_iterations = j.value("vi_iterations", d.vi_iterations);
  c.edge_distance_threshold = j.value("edge_distance_threshold", d.edge_distance_threshold);
  c.replan_interval = j.value("replan_interval", d.replan_interval);
  c.her_k = j.value("her_k", d.her_k);
  c.gamma_task = j.value("gamma_task", d.gamma_task);
  c.gamma_intrinsic = j.value("gamma_intrinsic", d.gamma_intrinsic);
  c.noise = j.value("noise", d.noise);
  c.agent = agent_kind_from_name(j.value("agent", std::string(agent_kind_name(d.agent))));
  c.delusion_suppression = j.value("delusion_suppression", d.delusion_suppression);
  c.include_invalid_checkpoints =
      j.value("include_invalid_checkpoints", d.include_invalid_checkpoints);
  c.seeds = j.value("seeds", d.seeds);
  c.eval_episodes = j.value("eval_episodes", d.eval_episodes);
  c.eval_tasks_per_difficulty =
      j.value("eval_tasks_per_difficulty", d.eval_tasks_per_difficulty);
  c.alpha = j.value("alpha", d.alpha);
  c.train_every = j.value("train_every", d.train_every);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.replay_capacity = j.value("replay_capacity", d.replay_capacity);
  c.eval_cadence_fraction = j.value("eval_cadence_fraction", d.eval_cadence_fraction);
  c.suppression_scale = j.value("suppression_scale", d.suppression_scale);
  c.delusion_probe_tasks = j.value("delusion_probe_tasks", d.delusion_probe_tasks);
  c.delusion_probes_per_task =
      j.value("delusion_probes_per_task", d.delusion_probes_per_task);
  c.parallel_seeds = j.value("parallel_seeds", d.parallel_seeds);
}

struct EvalPoint {
  std::uint64_t interactions = 0;
  double train_success = 0.0;
  std::vector<double> ood_success;  // aligned with config.eval_difficulties
  double delusion_frequency = 0.0;
  double delusion_distance_l1 = 0.0;
  double target_optimality = 0.0;
};

struct RunRecord {
  std::uint64_t seed = 0;
  std::vector<EvalPoint> points;
};

inline void to_json(nlohmann::json& j, const EvalPoint& p) {
  j = nlohmann::json{{"interactions", p.interactions},
                     {"train_success", p.train_success},
                     {"ood_success", p.ood_success},
                     {"delusion_frequency", p.delusion_frequency},
                     {"delusion_distance_l1", p.delusion_distance_l1},
                     {"target_optimality", p.target_optimality}};
}

inline void from_json(const nlohmann::json& j, EvalPoint& p) {
  j.at("interactions").get_to(p.interactions);
  j.at("train_success").get_to(p.train_success);
  j.at("ood_success").get_to(p.ood_success);
  j.at("delusion_frequency").get_to(p.delusion_frequency);
  j.at("delusion_distance_l1").get_to(p.delusion_distance_l1);
  j.at("target_optimality").get_to(p.target_optimality);
}

inline void to_json(nlohmann::json& j, const RunRecord& r) {
  j = nlohmann::json{{"seed", r.seed}, {"points", r.points}};
}

inline void from_json(const nlohmann::json& j, RunRecord& r) {
  j.at("seed").get_to(r.seed);
  j.at("points").get_to(r.points);
}

// --- evaluation ---------------------------------------------------------------

/// Average success of the greedy agent over `episodes` episodes distributed
/// round-robin over the task suite, spawning at the evaluation cell.
/// Never mutates the agent.
inline double evaluate(const TrainedAgent& agent, std::span<const MazeTask> tasks,
                       std::span<const int> task_ids, int episodes, double noise,
                       Rng& rng) {
  if (tasks.empty()) throw std::invalid_argument("evaluate: empty task list");
  if (episodes < 1) throw std::invalid_argument("evaluate: episodes must be >= 1");
  if (task_ids.size() != tasks.size()) {
    throw std::invalid_argument("evaluate: task id list mismatch");
  }
  int successes = 0;
  for (int ep = 0; ep < episodes; ++ep) {
    const MazeTask& task = tasks[static_cast<std::size_t>(ep) % tasks.size()];
    int task_id = task_ids[static_cast<std::size_t>(ep) % tasks.size()];
    EpisodeController controller(agent, task, task_id);
    EnvState s = initial_state(task, SpawnMode::EvalOpposite, rng);
    controller.begin(s, rng);
    int cap = step_cap(task);
    for (int t = 0; t < cap && !s.terminated; ++t) {
      Transition tr = step(task, s, controller.act(s), noise, rng);
      s = tr.next_state;
      if (tr.terminal && task.at(s.position) == Cell::Goal) {
        ++successes;
        break;
      }
      controller.after_step(s, rng);
    }
  }
  return double(successes) / double(episodes);
}

// --- delusion diagnostics ------------------------------------------------------

struct DelusionStats {
  double selection_frequency = 0.0;
  double mean_distance_l1 = 0.0;  // over edges incident to delusional vertices
  double target_optimality = 0.0;
  int probes = 0;
  int delusional_edges = 0;
};

/// Probes the agent's planning on a task: how often the selected target is
/// delusional (lava-positioned or unreachable from the probe start), the L1
/// error of estimated distances on edges touching delusional vertices
/// (truth truncated at d_max), and how often the target lies on an
/// oracle-shortest path within the edge threshold.
inline DelusionStats delusion_metrics(const TrainedAgent& agent, const MazeTask& task,
                                      int task_id, const OracleTables& oracle,
                                      int probes, Rng& rng) {
  DelusionStats stats;
  stats.probes = probes;
  double l1_sum = 0.0;
  for (int p = 0; p < probes; ++p) {
    EnvState s = initial_state(task, SpawnMode::TrainUniform, rng);
    int start = task.index(s.position);
    EpisodeController controller(agent, task, task_id);
    controller.begin(s, rng);
    auto delusional = [&](Coord pos) {
      return task.at(pos) == Cell::Lava ||
             std::isinf(oracle.distance(start, task.index(pos)));
    };
    Coord target = controller.current_target();
    if (delusional(target)) stats.selection_frequency += 1.0;
    int tgt = task.index(target);
    int goal = task.index(task.goal);
    double d_to = oracle.distance(start, tgt);
    double d_rest = oracle.distance(tgt, goal);
    double d_direct = oracle.distance(start, goal);
    if (!std::isinf(d_to) && !std::isinf(d_rest) && d_to + d_rest == d_direct &&
        d_to <= agent.params.edge_distance_threshold) {
      stats.target_optimality += 1.0;
    }
    if (const ProxyGraph* graph = controller.graph()) {
      int n = graph->n();
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
          if (i == j) continue;
          Coord pi = graph->vertices[static_cast<std::size_t>(i)].position;
          Coord pj = graph->vertices[static_cast<std::size_t>(j)].position;
          if (!delusional(pi) && !delusional(pj)) continue;
          double truth =
              std::min<double>(oracle.distance(task.index(pi), task.index(pj)),
                               double(kDistanceMax));
          l1_sum += std::abs(graph->d(i, j) - truth);
          ++stats.delusional_edges;
        }
      }
    }
  }
  if (probes > 0) {
    stats.selection_frequency /= probes;
    stats.target_optimality /= probes;
  }
  if (stats.delusional_edges > 0) stats.mean_distance_l1 = l1_sum / stats.delusional_edges;
  return stats;
}

// --- training -------------------------------------------------------------------

struct SeedResult {
  RunRecord record;
  TrainedAgent agent;
};

namespace detail {

// Stream tags for per-seed RNG derivation.
inline constexpr std::uint64_t kStreamEnv = 1;
inline constexpr std::uint64_t kStreamExplore = 2;
inline constexpr std::uint64_t kStreamTrain = 3;
inline constexpr std::uint64_t kStreamHer = 4;
inline constexpr std::uint64_t kStreamPlan = 5;
inline constexpr std::uint64_t kStreamTaskPick = 6;
inline constexpr std::uint64_t kStreamTrainTasks = 1000;
inline constexpr std::uint64_t kStreamEvalTasks = 1u << 16;
inline constexpr std::uint64_t kStreamEvalRun = 1u << 20;
inline constexpr std::uint64_t kStreamProbe = 1u << 21;
inline constexpr std::uint64_t kStreamEpisodeTask = 1ull << 32;

}  // namespace detail

/// Trains one seed. When `fixed_tasks` is nonempty it replaces the procedural
/// training task set (fixture experiments).
inline SeedResult run_single_seed(const ExperimentConfig& cfg, std::uint64_t master,
                                  std::span<const MazeTask> fixed_tasks = {}) {
  cfg.validate();

  SeedResult result;
  result.record.seed = master;
  TrainedAgent& agent = result.agent;
  agent.params = cfg.agent_params();
  agent.q.gamma_intrinsic = cfg.gamma_intrinsic;
  agent.tables.gamma_task = cfg.gamma_task;

  // Training tasks (fixed for the whole run unless in fresh-task mode).
  std::vector<MazeTask> train_tasks(fixed_tasks.begin(), fixed_tasks.end());
  bool fresh_task_mode = cfg.num_train_tasks == 0 && fixed_tasks.empty();
  if (train_tasks.empty() && !fresh_task_mode) {
    for (int i = 0; i < cfg.num_train_tasks; ++i) {
      train_tasks.push_back(generate_task(
          cfg.grid_width, cfg.grid_height, cfg.train_difficulty,
          derive_seed(master, detail::kStreamTrainTasks + std::uint64_t(i))));
    }
  }
  std::vector<int> train_ids(train_tasks.size());
  for (std::size_t i = 0; i < train_ids.size(); ++i) train_ids[i] = static_cast<int>(i);

  // Held-out evaluation suites: one per OOD difficulty, plus a held-out
  // train-difficulty suite used when there are no fixed training tasks.
  auto make_suite = [&](double difficulty, int suite_index) {
    std::vector<MazeTask> tasks;
    std::vector<int> ids;
    for (int i = 0; i < cfg.eval_tasks_per_difficulty; ++i) {
      tasks.push_back(generate_task(
          cfg.grid_width, cfg.grid_height, difficulty,
          derive_seed(master, detail::kStreamEvalTasks +
                                  std::uint64_t(suite_index) * 1024 + std::uint64_t(i))));
      ids.push_back(-(1 + suite_index * 1024 + i));
    }
    return std::pair(std::move(tasks), std::move(ids));
  };

  std::vector<std::vector<MazeTask>> ood_tasks;
  std::vector<std::vector<int>> ood_ids;
  for (std::size_t d = 0; d < cfg.eval_difficulties.size(); ++d) {
    auto [tasks, ids] = make_suite(cfg.eval_difficulties[d], static_cast<int>(d) + 1);
    ood_tasks.push_back(std::move(tasks));
    ood_ids.push_back(std::move(ids));
  }
  std::vector<MazeTask> train_eval_tasks;
  std::vector<int> train_eval_ids;
  if (!train_tasks.empty()) {
    train_eval_tasks = train_tasks;
    train_eval_ids = train_ids;
  } else {
    auto [tasks, ids] = make_suite(cfg.train_difficulty, 0);
    train_eval_tasks = std::move(tasks);
    train_eval_ids = std::move(ids);
  }

  // Delusion probes run against the first few train-difficulty tasks.
  int probe_count =
      std::min<int>(cfg.delusion_probe_tasks, static_cast<int>(train_eval_tasks.size()));
  std::vector<OracleTables> probe_oracles;
  for (int i = 0; i < probe_count; ++i) {
    probe_oracles.push_back(compute_oracle(train_eval_tasks[static_cast<std::size_t>(i)]));
  }

  ReplayBuffer buffer(cfg.replay_capacity);
  Rng env_rng(derive_seed(master, detail::kStreamEnv));
  Rng explore_rng(derive_seed(master, detail::kStreamExplore));
  Rng train_rng(derive_seed(master, detail::kStreamTrain));
  Rng her_rng(derive_seed(master, detail::kStreamHer));
  Rng plan_rng(derive_seed(master, detail::kStreamPlan));
  Rng task_pick_rng(derive_seed(master, detail::kStreamTaskPick));

  TaskResolver resolver = [&](int task_id) -> const MazeTask& {
    return train_tasks[static_cast<std::size_t>(task_id)];
  };
  CheckpointSampler delusion_sampler = [](const MazeTask& t, int, Rng& r) {
    return Coord{uniform_int(r, 0, t.width - 1), uniform_int(r, 0, t.height - 1)};
  };

  std::uint64_t point_interval = std::max<std::uint64_t>(
      1, std::uint64_t(std::llround(cfg.eval_cadence_fraction *
                                    double(cfg.total_interactions))));
  std::uint64_t next_eval = point_interval;
  int eval_index = 0;

  auto run_evaluations = [&](std::uint64_t interactions) {
    EvalPoint point;
    point.interactions = interactions;
    Rng eval_rng(derive_seed(master, detail::kStreamEvalRun + std::uint64_t(eval_index)));
    point.train_success = evaluate(agent, train_eval_tasks, train_eval_ids,
                                   cfg.eval_episodes, cfg.noise, eval_rng);
    for (std::size_t d = 0; d < ood_tasks.size(); ++d) {
      point.ood_success.push_back(evaluate(agent, ood_tasks[d], ood_ids[d],
                                           cfg.eval_episodes, cfg.noise, eval_rng));
    }
    Rng probe_rng(derive_seed(master, detail::kStreamProbe + std::uint64_t(eval_index)));
    double freq = 0.0, l1 = 0.0, opt = 0.0;
    int l1_points = 0;
    for (int i = 0; i < probe_count; ++i) {
      DelusionStats s = delusion_metrics(agent, train_eval_tasks[static_cast<std::size_t>(i)],
                                         train_eval_ids[static_cast<std::size_t>(i)],
                                         probe_oracles[static_cast<std::size_t>(i)],
                                         cfg.delusion_probes_per_task, probe_rng);
      freq += s.selection_frequency;
      opt += s.target_optimality;
      if (s.delusional_edges > 0) {
        l1 += s.mean_distance_l1;
        ++l1_points;
      }
    }
    if (probe_count > 0) {
      point.delusion_frequency = freq / probe_count;
      point.target_optimality = opt / probe_count;
    }
    if (l1_points > 0) point.delusion_distance_l1 = l1 / l1_points;
    result.record.points.push_back(std::move(point));
    ++eval_index;
  };

  std::uint64_t interactions = 0;
  std::uint64_t episode_index = 0;
  while (interactions < cfg.total_interactions) {
    const MazeTask* task = nullptr;
    int task_id = 0;
    if (fresh_task_mode) {
      // Fresh tasks get fresh ids so exact-table entries are never reused;
      // they stay in the list because buffered samples still reference them.
      train_tasks.push_back(generate_task(
          cfg.grid_width, cfg.grid_height, cfg.train_difficulty,
          derive_seed(master, detail::kStreamEpisodeTask + episode_index)));
      task = &train_tasks.back();
      task_id = static_cast<int>(train_tasks.size()) - 1;
    } else {
      int pick = uniform_int(task_pick_rng, 0, static_cast<int>(train_tasks.size()) - 1);
      task = &train_tasks[static_cast<std::size_t>(pick)];
      task_id = pick;
    }

    EnvState s = initial_state(*task, SpawnMode::TrainUniform, env_rng);
    EpisodeController controller(agent, *task, task_id);
    controller.begin(s, plan_rng);
    std::vector<Transition> trajectory;
    int cap = step_cap(*task);
    for (int t = 0; t < cap && !s.terminated && interactions < cfg.total_interactions;
         ++t) {
      double eps = agent.q.epsilon.value(interactions, cfg.total_interactions);
      Action a = chance(explore_rng, eps)
                     ? static_cast<Action>(uniform_int(explore_rng, 0, kNumActions - 1))
                     : controller.act(s);
      Transition tr = step(*task, s, a, cfg.noise, env_rng);
      trajectory.push_back(tr);
      s = tr.next_state;
      ++interactions;
      if (!s.terminated) controller.after_step(s, plan_rng);

      if (interactions % std::uint64_t(cfg.train_every) == 0 && !buffer.empty()) {
        auto batch = buffer.sample_batch(static_cast<std::size_t>(cfg.batch_size),
                                         train_rng);
        update_policy(agent.q, resolver, batch, cfg.alpha);
        update_value(agent.tables, agent.q, resolver, batch, cfg.alpha);
        update_distance(agent.tables, agent.q, resolver, batch, cfg.alpha);
        update_terminal(agent.tables, resolver, batch, cfg.alpha);
        if (cfg.delusion_suppression) {
          suppress_delusions(agent.tables, agent.q, resolver, batch, delusion_sampler,
                             cfg.suppression_scale, cfg.alpha, train_rng);
        }
      }
      if (interactions >= next_eval) {
        run_evaluations(interactions);
        next_eval += point_interval;
      }
    }
    if (!trajectory.empty()) {
      auto samples = relabel(trajectory, task_id, cfg.her_k, her_rng);
      buffer.push_all(samples);
    }
    ++episode_index;
  }
  if (result.record.points.empty() ||
      result.record.points.back().interactions < cfg.total_interactions) {
    run_evaluations(cfg.total_interactions);
  }
  return result;
}

/// Runs every configured seed (concurrently when enabled); results are
/// ordered by seed position regardless of scheduling.
inline std::vector<SeedResult> run_training(const ExperimentConfig& cfg,
                                            std::span<const MazeTask> fixed_tasks = {}) {
  cfg.validate();
  std::vector<SeedResult> results(cfg.seeds.size());
  if (!cfg.parallel_seeds || cfg.seeds.size() == 1) {
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
      results[i] = run_single_seed(cfg, cfg.seeds[i], fixed_tasks);
    }
    return results;
  }
  std::vector<std::exception_ptr> errors(cfg.seeds.size());
  std::vector<std::thread> workers;
  workers.reserve(cfg.seeds.size());
  for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
    workers.emplace_back([&, i] {
      try {
        results[i] = run_single_seed(cfg, cfg.seeds[i], fixed_tasks);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    });
  }
  for (auto& w : workers) w.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return results;
}

// --- metric export ---------------------------------------------------------------

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

struct MeanCi {
  double mean = 0.0;
  double half_width = 0.0;
};

inline MeanCi mean_ci(std::span<const double> xs) {
  MeanCi out;
  if (xs.empty()) return out;
  double sum = 0.0;
  for (double x : xs) sum += x;
  out.mean = sum / double(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - out.mean) * (x - out.mean);
    double stddev = std::sqrt(ss / double(xs.size() - 1));
    out.half_width = 1.96 * stddev / std::sqrt(double(xs.size()));
  }
  return out;
}

}  // namespace detail

/// Plot-ready CSV: one row per (evaluation point, difficulty), where the
/// training suite appears under the training difficulty. CI half-widths use
/// the normal approximation over seeds.
inline std::string metrics_csv(const ExperimentConfig& cfg,
                               std::span<const RunRecord> runs) {
  std::string out = "interactions,difficulty,mean_success,ci_half_width\n";
  if (runs.empty()) return out;
  std::size_t n_points = runs.front().points.size();
  for (const auto& run : runs) {
    if (run.points.size() != n_points) {
      throw std::invalid_argument("metrics_csv: runs have differing point counts");
    }
  }
  for (std::size_t p = 0; p < n_points; ++p) {
    std::uint64_t interactions = runs.front().points[p].interactions;
    auto emit = [&](double difficulty, auto&& getter) {
      std::vector<double> xs;
      xs.reserve(runs.size());
      for (const auto& run : runs) xs.push_back(getter(run.points[p]));
      auto mc = detail::mean_ci(xs);
      out += std::to_string(interactions);
      out += ',';
      out += detail::format_double(difficulty);
      out += ',';
      out += detail::format_double(mc.mean);
      out += ',';
      out += detail::format_double(mc.half_width);
      out += '\n';
    };
    emit(cfg.train_difficulty, [](const EvalPoint& pt) { return pt.train_success; });
    for (std::size_t d = 0; d < cfg.eval_difficulties.size(); ++d) {
      emit(cfg.eval_difficulties[d],
           [d](const EvalPoint& pt) { return pt.ood_success[d]; });
    }
  }
  return out;
}

inline nlohmann::json metrics_json(const ExperimentConfig& cfg,
                                   std::span<const RunRecord> runs) {
  nlohmann::json j;
  j["config"] = cfg;
  j["ci_method"] = "normal approximation: half_width = 1.96 * stddev / sqrt(n_seeds)";
  j["runs"] = std::vector<RunRecord>(runs.begin(), runs.end());
  return j;
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << content;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

/// Writes metrics.csv and metrics.json under out_dir.
inline void export_metrics(const ExperimentConfig& cfg, std::span<const RunRecord> runs,
                           const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create directory: " + out_dir.string());
  write_file(out_dir / "metrics.csv", metrics_csv(cfg, runs));
  write_file(out_dir / "metrics.json", metrics_json(cfg, runs).dump(2) + "\n");
}

// --- agent snapshots --------------------------------------------------------------

inline void to_json(nlohmann::json& j, const AgentParams& p) {
  j = nlohmann::json{{"kind", agent_kind_name(p.kind)},
                     {"n_generate", p.n_generate},
                     {"k_prune", p.k_prune},
                     {"vi_iterations", p.vi_iterations},
                     {"edge_distance_threshold", p.edge_distance_threshold},
                     {"replan_interval", p.replan_interval},
                     {"include_invalid_checkpoints", p.include_invalid_checkpoints},
                     {"prune_overflow_distance", p.prune_overflow_distance}};
}

inline void from_json(const nlohmann::json& j, AgentParams& p) {
  AgentParams d;
  p.kind = agent_kind_from_name(j.value("kind", std::string(agent_kind_name(d.kind))));
  p.n_generate = j.value("n_generate", d.n_generate);
  p.k_prune = j.value("k_prune", d.k_prune);
  p.vi_iterations = j.value("vi_iterations", d.vi_iterations);
  p.edge_distance_threshold =
      j.value("edge_distance_threshold", d.edge_distance_threshold);
  p.replan_interval = j.value("replan_interval", d.replan_interval);
  p.include_invalid_checkpoints =
      j.value("include_invalid_checkpoints", d.include_invalid_checkpoints);
  p.prune_overflow_distance =
      j.value("prune_overflow_distance", d.prune_overflow_distance);
}

inline nlohmann::json agent_to_json(const TrainedAgent& agent) {
  nlohmann::json j = tables_to_json(agent.q, agent.tables);
  j["params"] = agent.params;
  return j;
}

inline TrainedAgent agent_from_json(const nlohmann::json& j) {
  TrainedAgent agent;
  tables_from_json(j, agent.q, agent.tables);
  agent.params = j.at("params").get<AgentParams>();
  return agent;
}

inline void save_agent(const TrainedAgent& agent, const std::filesystem::path& path) {
  write_file(path, agent_to_json(agent).dump() + "\n");
}

inline TrainedAgent load_agent(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open snapshot: " + path.string());
  nlohmann::json j;
  in >> j;
  return agent_from_json(j);
}

// --- composite-value bound sweep ---------------------------------------------------

struct BoundCheckCase {
  int fixture = 0;
  double eps_v = 0.0;
  double eps_gamma = 0.0;
  double observed_error = 0.0;
  double bound = 0.0;
  bool ok = false;
};

/// Builds a fixed checkpoint path along an oracle-shortest route for each
/// fixture, evaluates exact per-edge values/discounts by DP, perturbs every
/// entry by up to (eps_v, eps_gamma), and compares the worst observed
/// composite-value error against the first-order bound with a slack factor.
inline std::vector<BoundCheckCase> theorem_bound_sweep(
    std::span<const MazeTask> fixtures, double gamma, double slack,
    int waypoint_stride, int random_trials, Rng& rng) {
  constexpr double kVMax = 1.0;
  std::vector<BoundCheckCase> cases;
  const std::array<double, 3> grid = {0.001, 0.005, 0.01};
  for (std::size_t f = 0; f < fixtures.size(); ++f) {
    const MazeTask& task = fixtures[f];
    OracleTables oracle = compute_oracle(task);
    Coord spawn = eval_spawn(task);
    // Shortest path cells spawn -> goal via greedy descent on oracle distances.
    std::vector<Coord> path{spawn};
    Coord cur = spawn;
    int goal = task.index(task.goal);
    while (!(cur == task.goal)) {
      Action a = oracle.optimal_action(task.index(cur), goal);
      Coord d = action_delta(a);
      cur = Coord{cur.x + d.x, cur.y + d.y};
      path.push_back(cur);
    }
    std::vector<Coord> waypoints;
    for (std::size_t i = waypoint_stride > 0 ? static_cast<std::size_t>(waypoint_stride) : 1;
         i < path.size(); i += static_cast<std::size_t>(std::max(1, waypoint_stride))) {
      waypoints.push_back(path[i]);
    }
    if (waypoints.empty() || !(waypoints.back() == task.goal)) {
      waypoints.push_back(task.goal);
    }
    std::vector<double> edge_v, edge_g;
    Coord from = spawn;
    for (Coord to : waypoints) {
      auto pe = evaluate_policy(task, optimal_policy(oracle, task, to), to, gamma, 0.0);
      edge_v.push_back(pe.value[static_cast<std::size_t>(task.index(from))]);
      edge_g.push_back(pe.discount[static_cast<std::size_t>(task.index(from))]);
      from = to;
    }
    double exact = composite_path_value(edge_v, edge_g);
    for (double ev : grid) {
      for (double eg : grid) {
        double worst = 0.0;
        auto try_perturbation = [&](auto&& pert_v, auto&& pert_g) {
          std::vector<double> pv(edge_v), pg(edge_g);
          for (std::size_t i = 0; i < pv.size(); ++i) {
            pv[i] = edge_v[i] + pert_v(i);
            pg[i] = std::clamp(edge_g[i] + pert_g(i), 0.0, 1.0);
          }
          double err = std::abs(composite_path_value(pv, pg) - exact);
          worst = std::max(worst, err);
        };
        try_perturbation([&](std::size_t) { return ev * kVMax; },
                         [&](std::size_t) { return eg; });
        try_perturbation([&](std::size_t) { return -ev * kVMax; },
                         [&](std::size_t) { return -eg; });
        try_perturbation([&](std::size_t) { return ev * kVMax; },
                         [&](std::size_t) { return -eg; });
        try_perturbation([&](std::size_t) { return -ev * kVMax; },
                         [&](std::size_t) { return eg; });
        for (int t = 0; t < random_trials; ++t) {
          std::vector<double> dv(edge_v.size()), dg(edge_g.size());
          for (std::size_t i = 0; i < dv.size(); ++i) {
            dv[i] = (2.0 * uniform_real(rng) - 1.0) * ev * kVMax;
            dg[i] = (2.0 * uniform_real(rng) - 1.0) * eg;
          }
          try_perturbation([&](std::size_t i) { return dv[i]; },
                           [&](std::size_t i) { return dg[i]; });
        }
        BoundCheckCase c;
        c.fixture = static_cast<int>(f);
        c.eps_v = ev;
        c.eps_gamma = eg;
        c.observed_error = worst;
        c.bound = slack * (ev * kVMax / (1.0 - gamma) +
                           eg * kVMax / ((1.0 - gamma) * (1.0 - gamma)));
        c.ok = c.observed_error <= c.bound;
        cases.push_back(c);
      }
    }
  }
  return cases;
}

}  // namespace proxyplan
