#pragma once

// Trajectory replay with hindsight relabeling: every completed episode is
// expanded into goal-relabelled samples (future strategy), stored in a
// bounded FIFO buffer sampled uniformly with replacement.

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "proxyplan/gridworld.hpp"
#include "proxyplan/rng.hpp"

namespace proxyplan {

struct HindsightSample {
  Transition transition{};
  EnvState goal{};  // the relabelled target state
  int task_id = 0;
};

/// Expands a trajectory into k hindsight samples per transition, each with a
/// goal drawn uniformly from the states visited at or after that transition.
inline std::vector<HindsightSample> relabel(std::span<const Transition> trajectory,
                                            int task_id, int k, Rng& rng) {
  if (trajectory.empty()) throw std::invalid_argument("relabel: empty trajectory");
  if (k < 1) throw std::invalid_argument("relabel: k must be >= 1");
  std::vector<HindsightSample> out;
  out.reserve(trajectory.size() * static_cast<std::size_t>(k));
  int n = static_cast<int>(trajectory.size());
  for (int t = 0; t < n; ++t) {
    for (int i = 0; i < k; ++i) {
      int j = uniform_int(rng, t, n - 1);
      out.push_back(HindsightSample{trajectory[static_cast<std::size_t>(t)],
                                    trajectory[static_cast<std::size_t>(j)].next_state,
                                    task_id});
    }
  }
  return out;
}

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("ReplayBuffer: zero capacity");
    storage_.reserve(capacity);
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return storage_.size(); }
  bool empty() const { return storage_.empty(); }

  void push(const HindsightSample& s) {
    if (storage_.size() < capacity_) {
      storage_.push_back(s);
    } else {
      storage_[head_] = s;
      head_ = (head_ + 1) % capacity_;
    }
  }

  void push_all(std::span<const HindsightSample> samples) {
    for (const auto& s : samples) push(s);
  }

  /// Oldest-first access (insertion order).
  const HindsightSample& at(std::size_t i) const {
    if (i >= storage_.size()) throw std::out_of_range("ReplayBuffer::at");
    if (storage_.size() < capacity_) return storage_[i];
    return storage_[(head_ + i) % capacity_];
  }

  /// Uniform sampling with replacement.
  std::vector<HindsightSample> sample_batch(std::size_t batch, Rng& rng) const {
    if (batch == 0) return {};
    if (storage_.empty()) throw std::logic_error("sample_batch: empty buffer");
    std::vector<HindsightSample> out;
    out.reserve(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      int pick = uniform_int(rng, 0, static_cast<int>(storage_.size()) - 1);
      out.push_back(storage_[static_cast<std::size_t>(pick)]);
    }
    return out;
  }

 private:
  std::size_t capacity_;
  std::vector<HindsightSample> storage_;
  std::size_t head_ = 0;  // next eviction slot once full
};

}  // namespace proxyplan
