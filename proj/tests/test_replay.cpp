#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <vector>

#include "proxyplan/gridworld.hpp"
#include "proxyplan/replay.hpp"

using namespace proxyplan;

namespace {

// A trajectory with distinct positions so goals identify their source index.
std::vector<Transition> straight_trajectory(int length) {
  std::vector<Transition> traj;
  for (int i = 0; i < length; ++i) {
    Transition tr;
    tr.state = EnvState{{i, 0}, false};
    tr.action = Action::Right;
    tr.reward = 0.0;
    tr.next_state = EnvState{{i + 1, 0}, false};
    tr.terminal = false;
    traj.push_back(tr);
  }
  return traj;
}

}  // namespace

TEST_CASE("a length-1 trajectory forces the single future goal", "[replay]") {
  auto traj = straight_trajectory(1);
  Rng rng(1);
  auto samples = relabel(traj, 3, 4, rng);
  REQUIRE(samples.size() == 4);
  for (const auto& s : samples) {
    CHECK(s.goal.position == Coord{1, 0});
    CHECK(s.task_id == 3);
  }
}

TEST_CASE("relabel emits k samples per transition", "[replay]") {
  auto traj = straight_trajectory(13);
  Rng rng(2);
  auto samples = relabel(traj, 0, 4, rng);
  CHECK(samples.size() == 13 * 4);
}

TEST_CASE("relabel rejects bad input", "[replay]") {
  Rng rng(3);
  std::vector<Transition> empty;
  CHECK_THROWS_AS(relabel(empty, 0, 4, rng), std::invalid_argument);
  auto traj = straight_trajectory(2);
  CHECK_THROWS_AS(relabel(traj, 0, 0, rng), std::invalid_argument);
}

TEST_CASE("goals come uniformly from the future segment", "[replay]") {
  auto traj = straight_trajectory(6);
  Rng rng(4);
  // Transition t's goal candidates are the next states of transitions t..5,
  // i.e. positions x = t+1 .. 6.
  std::map<int, std::map<int, int>> counts;
  const int rounds = 20000;
  for (int r = 0; r < rounds; ++r) {
    auto samples = relabel(traj, 0, 1, rng);
    for (std::size_t t = 0; t < samples.size(); ++t) {
      counts[int(t)][samples[t].goal.position.x]++;
    }
  }
  for (int t = 0; t < 6; ++t) {
    int options = 6 - t;
    double p = 1.0 / options;
    double sigma = std::sqrt(p * (1 - p) * rounds);
    for (int x = t + 1; x <= 6; ++x) {
      CHECK(std::abs(counts[t][x] - p * rounds) <= 4.0 * sigma);
    }
    // Nothing from the past segment.
    for (int x = 0; x <= t; ++x) CHECK(counts[t][x] == 0);
  }
}

TEST_CASE("every relabelled goal occurs at or after its transition", "[replay]") {
  auto traj = straight_trajectory(20);
  Rng rng(5);
  auto samples = relabel(traj, 0, 4, rng);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    int t = int(i) / 4;
    CHECK(samples[i].goal.position.x >= t + 1);  // source index j >= t
  }
}

TEST_CASE("buffer respects capacity with FIFO eviction", "[replay]") {
  ReplayBuffer buf(5);
  auto traj = straight_trajectory(8);
  Rng rng(6);
  auto samples = relabel(traj, 0, 1, rng);
  REQUIRE(samples.size() == 8);
  buf.push_all(samples);
  CHECK(buf.size() == 5);
  // The oldest three were evicted; insertion order is preserved.
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(buf.at(i).transition.state.position.x == int(i) + 3);
  }
}

TEST_CASE("sampling is uniform with replacement", "[replay]") {
  ReplayBuffer buf(16);
  auto traj = straight_trajectory(10);
  Rng rng(7);
  buf.push_all(relabel(traj, 0, 1, rng));
  REQUIRE(buf.size() == 10);
  std::map<int, int> counts;
  const int draws = 100000;
  auto batch = buf.sample_batch(draws, rng);
  for (const auto& s : batch) counts[s.transition.state.position.x]++;
  double p = 0.1;
  double sigma = std::sqrt(p * (1 - p) * draws);
  for (int x = 0; x < 10; ++x) {
    CHECK(std::abs(counts[x] - p * draws) < 4.0 * sigma);
  }
}

TEST_CASE("batch edge cases", "[replay]") {
  ReplayBuffer buf(4);
  Rng rng(8);
  CHECK(buf.sample_batch(0, rng).empty());
  CHECK_THROWS_AS(buf.sample_batch(1, rng), std::logic_error);
  auto traj = straight_trajectory(1);
  buf.push_all(relabel(traj, 0, 1, rng));
  auto batch = buf.sample_batch(1, rng);
  REQUIRE(batch.size() == 1);
  CHECK(batch[0].transition.state.position == Coord{0, 0});
}
