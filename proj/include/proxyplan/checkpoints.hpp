#pragma once

// Checkpoint generation through the context / partial-description split, and
// proxy-vertex pruning with a k-medoids pass over estimated distances that
// never evicts must-keep states.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "proxyplan/gridworld.hpp"
#include "proxyplan/rng.hpp"

namespace proxyplan {

/// Episode-stable information: the maze layout.
struct Context {
  const MazeTask* task = nullptr;
  int task_id = 0;
};

/// State-identifying information: the agent coordinates. Validity against
/// lava is deliberately not guaranteed.
struct PartialDescription {
  Coord position{};
};

/// Reconstructs the full state a partial description denotes in a context.
inline EnvState fuse(const Context& ctx, PartialDescription z) {
  return EnvState{z.position, ctx.task->terminal_at(z.position)};
}

struct CheckpointSet {
  std::vector<EnvState> checkpoints;
  std::vector<std::uint8_t> must_keep;

  std::size_t size() const { return checkpoints.size(); }
};

/// Samples n checkpoints from the context: the goal state is always included
/// (and marked must-keep), the rest are fused from partial descriptions drawn
/// uniformly over grid coordinates. With include_invalid, lava and potentially
/// unreachable positions are allowed, mimicking delusional generator output.
inline CheckpointSet generate_checkpoints(const Context& ctx, int n,
                                          bool include_invalid, Rng& rng) {
  if (n < 2) throw std::invalid_argument("generate_checkpoints: n must be >= 2");
  const MazeTask& task = *ctx.task;
  CheckpointSet out;
  out.checkpoints.push_back(fuse(ctx, PartialDescription{task.goal}));
  out.must_keep.push_back(1);
  std::vector<Coord> valid;
  if (!include_invalid) {
    for (int i = 0; i < task.size(); ++i) {
      Coord c = task.coord(i);
      if (task.at(c) != Cell::Lava) valid.push_back(c);
    }
  }
  for (int i = 1; i < n; ++i) {
    Coord pos;
    if (include_invalid) {
      pos = {uniform_int(rng, 0, task.width - 1), uniform_int(rng, 0, task.height - 1)};
    } else {
      pos = valid[static_cast<std::size_t>(
          uniform_int(rng, 0, static_cast<int>(valid.size()) - 1))];
    }
    out.checkpoints.push_back(fuse(ctx, PartialDescription{pos}));
    out.must_keep.push_back(0);
  }
  return out;
}

namespace detail {

inline double kmedoids_cost(std::span<const double> dsym, int n,
                            std::span<const int> medoids) {
  double cost = 0.0;
  for (int i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (int m : medoids) {
      best = std::min(best, dsym[static_cast<std::size_t>(i) * static_cast<std::size_t>(n) +
                                 static_cast<std::size_t>(m)]);
    }
    cost += best;
  }
  return cost;
}

}  // namespace detail

/// PAM-style pruning of a candidate set down to k medoids. The distance
/// matrix is given over the candidate list (row-major, finite entries); it is
/// symmetrized by the elementwise minimum with its transpose so that one-way
/// reachability still pulls candidates together. Duplicate positions are
/// deduplicated first; must-keep members are never evicted. Each iteration
/// re-assigns points to their nearest medoid and applies the best
/// cost-improving swap between a medoid and a point of its cluster,
/// terminating when no swap improves the cost.
inline CheckpointSet kmedoids_prune(const CheckpointSet& candidates,
                                    std::span<const double> distance, int k, Rng& rng,
                                    std::vector<double>* cost_trace = nullptr) {
  int n0 = static_cast<int>(candidates.size());
  if (distance.size() != static_cast<std::size_t>(n0) * static_cast<std::size_t>(n0)) {
    throw std::invalid_argument("kmedoids_prune: distance matrix shape mismatch");
  }

  // Deduplicate by position, merging must-keep flags into the first occurrence.
  std::vector<int> keep;  // indices into the original candidate list
  std::vector<std::uint8_t> keep_must;
  for (int i = 0; i < n0; ++i) {
    bool dup = false;
    for (std::size_t j = 0; j < keep.size(); ++j) {
      if (candidates.checkpoints[static_cast<std::size_t>(keep[j])].position ==
          candidates.checkpoints[static_cast<std::size_t>(i)].position) {
        keep_must[j] |= candidates.must_keep[static_cast<std::size_t>(i)];
        dup = true;
        break;
      }
    }
    if (!dup) {
      keep.push_back(i);
      keep_must.push_back(candidates.must_keep[static_cast<std::size_t>(i)]);
    }
  }
  int n = static_cast<int>(keep.size());

  auto build_result = [&](std::span<const int> picked) {
    std::vector<int> sorted(picked.begin(), picked.end());
    std::sort(sorted.begin(), sorted.end());
    CheckpointSet out;
    for (int i : sorted) {
      out.checkpoints.push_back(candidates.checkpoints[static_cast<std::size_t>(keep[static_cast<std::size_t>(i)])]);
      out.must_keep.push_back(keep_must[static_cast<std::size_t>(i)]);
    }
    return out;
  };

  int n_must = 0;
  for (auto m : keep_must) n_must += m != 0;
  if (k < n_must) {
    throw std::logic_error("kmedoids_prune: k smaller than the must-keep set");
  }
  if (n <= k) {  // fewer distinct candidates than requested: keep them all
    std::vector<int> all(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
    return build_result(all);
  }

  // Symmetrized distances over the deduplicated candidates.
  std::vector<double> dsym(static_cast<std::size_t>(n) * static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      auto orig = [&](int a, int b) {
        return distance[static_cast<std::size_t>(keep[static_cast<std::size_t>(a)]) *
                            static_cast<std::size_t>(n0) +
                        static_cast<std::size_t>(keep[static_cast<std::size_t>(b)])];
      };
      dsym[static_cast<std::size_t>(i) * static_cast<std::size_t>(n) +
           static_cast<std::size_t>(j)] = std::min(orig(i, j), orig(j, i));
    }
  }
  auto d = [&](int a, int b) {
    return dsym[static_cast<std::size_t>(a) * static_cast<std::size_t>(n) +
                static_cast<std::size_t>(b)];
  };

  // Initial medoids: the must-keep set plus a random fill.
  std::vector<int> medoids;
  std::vector<std::uint8_t> is_medoid(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    if (keep_must[static_cast<std::size_t>(i)]) {
      medoids.push_back(i);
      is_medoid[static_cast<std::size_t>(i)] = 1;
    }
  }
  while (static_cast<int>(medoids.size()) < k) {
    int pick = uniform_int(rng, 0, n - 1);
    if (!is_medoid[static_cast<std::size_t>(pick)]) {
      medoids.push_back(pick);
      is_medoid[static_cast<std::size_t>(pick)] = 1;
    }
  }

  std::vector<int> assigned(static_cast<std::size_t>(n), 0);
  constexpr int kMaxIterations = 1000;
  for (int iter = 0; iter < kMaxIterations; ++iter) {
    // Assign each point to its nearest medoid (ties: lowest candidate index).
    for (int i = 0; i < n; ++i) {
      int best = medoids[0];
      double best_d = d(i, best);
      for (int m : medoids) {
        double dist_im = d(i, m);
        if (dist_im < best_d || (dist_im == best_d && m < best)) {
          best = m;
          best_d = dist_im;
        }
      }
      assigned[static_cast<std::size_t>(i)] = best;
    }
    double cost = detail::kmedoids_cost(dsym, n, medoids);
    if (cost_trace) cost_trace->push_back(cost);

    // Best single swap of a non-must-keep medoid with a point of its cluster.
    double best_cost = cost;
    int swap_slot = -1, swap_point = -1;
    for (std::size_t slot = 0; slot < medoids.size(); ++slot) {
      int m = medoids[slot];
      if (keep_must[static_cast<std::size_t>(m)]) continue;
      for (int x = 0; x < n; ++x) {
        if (is_medoid[static_cast<std::size_t>(x)]) continue;
        if (assigned[static_cast<std::size_t>(x)] != m) continue;
        std::vector<int> trial(medoids);
        trial[slot] = x;
        double trial_cost = detail::kmedoids_cost(dsym, n, trial);
        if (trial_cost < best_cost - 1e-12) {
          best_cost = trial_cost;
          swap_slot = static_cast<int>(slot);
          swap_point = x;
        }
      }
    }
    if (swap_slot < 0) break;  // converged: no cost improvement
    is_medoid[static_cast<std::size_t>(medoids[static_cast<std::size_t>(swap_slot)])] = 0;
    medoids[static_cast<std::size_t>(swap_slot)] = swap_point;
    is_medoid[static_cast<std::size_t>(swap_point)] = 1;
  }

  return build_result(medoids);
}

}  // namespace proxyplan
