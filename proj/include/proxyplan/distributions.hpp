#pragma once

// Fixed-support histogram distributions shared by all estimators: the
// categorical projection used for value targets, the truncated-distance
// support with its overflow bin, and the distance-to-discount transplant
// that computes E[gamma^D] rather than gamma^E[D].

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <stdexcept>

namespace proxyplan {

inline constexpr int kBins = 16;
inline constexpr int kDistanceMax = 15;        // finite distance bins are 1..15
inline constexpr int kOverflowBin = kBins - 1; // "longer than d_max, or never"

struct Histogram {
  std::array<double, kBins> probs{};

  static Histogram point_mass(int bin) {
    Histogram h;
    h.probs[static_cast<std::size_t>(bin)] = 1.0;
    return h;
  }

  double mass() const {
    double s = 0.0;
    for (double p : probs) s += p;
    return s;
  }

  bool valid(double tol = 1e-9) const {
    for (double p : probs) {
      if (!(p >= -tol)) return false;
    }
    return std::abs(mass() - 1.0) <= tol;
  }

  friend bool operator==(const Histogram&, const Histogram&) = default;
};

/// Support for task-return histograms: 16 bins uniform on [0, 1].
inline const std::array<double, kBins>& value_support() {
  static const std::array<double, kBins> support = [] {
    std::array<double, kBins> s{};
    for (int i = 0; i < kBins; ++i) s[static_cast<std::size_t>(i)] = double(i) / (kBins - 1);
    return s;
  }();
  return support;
}

/// Distance represented by a finite bin (bins 0..14 are distances 1..15).
inline double distance_bin_value(int bin) { return double(bin + 1); }

/// Projects a set of weighted atoms onto a fixed ascending support; each
/// atom's mass is split between the two nearest bins proportionally to
/// distance, clamped at the support ends.
inline Histogram project(std::span<const double> atom_values,
                         std::span<const double> atom_masses,
                         std::span<const double> support) {
  if (atom_values.size() != atom_masses.size()) {
    throw std::invalid_argument("project: values/masses size mismatch");
  }
  if (support.size() != kBins) {
    throw std::invalid_argument("project: support must have 16 bins");
  }
  Histogram out;
  for (std::size_t k = 0; k < atom_values.size(); ++k) {
    double m = atom_masses[k];
    if (m == 0.0) continue;
    double v = std::clamp(atom_values[k], support.front(), support.back());
    auto it = std::lower_bound(support.begin(), support.end(), v);
    std::size_t hi = static_cast<std::size_t>(it - support.begin());
    if (hi == 0 || support[hi] == v) {
      out.probs[hi] += m;
      continue;
    }
    std::size_t lo = hi - 1;
    double width = support[hi] - support[lo];
    double w_hi = (v - support[lo]) / width;
    out.probs[lo] += m * (1.0 - w_hi);
    out.probs[hi] += m * w_hi;
  }
  return out;
}

inline double expectation(const Histogram& h, std::span<const double> support) {
  double e = 0.0;
  for (int i = 0; i < kBins; ++i) {
    e += h.probs[static_cast<std::size_t>(i)] * support[static_cast<std::size_t>(i)];
  }
  return e;
}

/// Finite expectation of a distance histogram, with the overflow bin counted
/// as `overflow_value`. Only for uses that explicitly need a finite number
/// (edge pruning); discount recovery must go through transplant_discount.
inline double distance_expectation(const Histogram& h, double overflow_value) {
  double e = 0.0;
  for (int i = 0; i < kOverflowBin; ++i) {
    e += h.probs[static_cast<std::size_t>(i)] * distance_bin_value(i);
  }
  e += h.probs[kOverflowBin] * overflow_value;
  return e;
}

/// Expected distance conditioned on the target being reached at all: the
/// mean over finite bins, normalized by their mass. Falls back to
/// `overflow_value` when almost no finite mass remains. Keeps hop-length
/// annotations meaningful under hazard, where failure mass belongs to the
/// discount channel rather than the length channel.
inline double reach_conditional_distance(const Histogram& h, double overflow_value,
                                         double min_reach_mass = 0.2) {
  double mass = 0.0;
  double sum = 0.0;
  for (int i = 0; i < kOverflowBin; ++i) {
    mass += h.probs[static_cast<std::size_t>(i)];
    sum += h.probs[static_cast<std::size_t>(i)] * distance_bin_value(i);
  }
  if (mass < min_reach_mass) return overflow_value;
  return sum / mass;
}

/// E[gamma^D]: replaces each distance bin with its discount; overflow
/// contributes discount 0 (unreachable-or-too-far outcomes never pay off).
inline double transplant_discount(const Histogram& distance_hist, double gamma) {
  double e = 0.0;
  double g = 1.0;
  for (int i = 0; i < kOverflowBin; ++i) {
    g *= gamma;  // gamma^(i+1)
    e += distance_hist.probs[static_cast<std::size_t>(i)] * g;
  }
  return e;
}

/// Distance of one more step: bin d -> d+1, with mass beyond d_max folded
/// into the overflow bin (which is absorbing).
inline Histogram shift_distance(const Histogram& h) {
  Histogram out;
  for (int i = 0; i + 1 < kOverflowBin; ++i) {
    out.probs[static_cast<std::size_t>(i + 1)] = h.probs[static_cast<std::size_t>(i)];
  }
  out.probs[kOverflowBin] =
      h.probs[kOverflowBin - 1] + h.probs[kOverflowBin];
  return out;
}

/// Learning-rate mixing toward a target distribution.
inline Histogram mix(const Histogram& current, const Histogram& target, double alpha) {
  Histogram out;
  for (int i = 0; i < kBins; ++i) {
    auto k = static_cast<std::size_t>(i);
    out.probs[k] = (1.0 - alpha) * current.probs[k] + alpha * target.probs[k];
  }
  return out;
}

}  // namespace proxyplan
