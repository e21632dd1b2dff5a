#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "cocolm/error.hpp"

namespace cocolm {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Derives an independent 64-bit seed for a (seed, stream) pair.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(splitmix64(seed) ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

// mt19937_64 with hand-rolled variate helpers. The std distributions are
// implementation-defined, which would make corpora differ between standard
// libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(splitmix64(seed)) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Rejection keeps it unbiased.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw Error(ErrorCode::InvalidConfig, "Rng::below(0)");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  // Uniform integer in [lo, hi].
  std::int64_t between(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller (one draw per call, the pair's twin is discarded).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Normal truncated to [-2, 2] standard deviations, by resampling.
  double truncated_normal(double stddev) {
    double z;
    do {
      z = normal();
    } while (z < -2.0 || z > 2.0);
    return z * stddev;
  }

  template <class T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

// Draws index i with probability proportional to masses[i] by a linear scan.
// Meant for the short candidate lists of a single walk step.
inline std::size_t sample_proportional(std::span<const double> masses, Rng& rng) {
  const double total = std::accumulate(masses.begin(), masses.end(), 0.0);
  const double target = rng.uniform() * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < masses.size(); ++i) {
    acc += masses[i];
    if (target < acc) return i;
  }
  // Rounding can leave target == total; return the last positive entry.
  for (std::size_t i = masses.size(); i-- > 0;) {
    if (masses[i] > 0.0) return i;
  }
  return masses.size() - 1;
}

// Walker/Vose alias table: O(n) build, O(1) draws.
class AliasTable {
 public:
  AliasTable() = default;

  explicit AliasTable(std::span<const double> masses) {
    const std::size_t n = masses.size();
    if (n == 0) throw Error(ErrorCode::InvalidConfig, "alias table over an empty distribution");
    const double total = std::accumulate(masses.begin(), masses.end(), 0.0);
    if (!(total > 0.0)) throw Error(ErrorCode::InvalidConfig, "alias table with zero total mass");

    prob_.assign(n, 0.0);
    alias_.assign(n, 0);
    probabilities_.resize(n);
    std::vector<double> scaled(n);
    std::vector<std::size_t> small, large;
    for (std::size_t i = 0; i < n; ++i) {
      probabilities_[i] = masses[i] / total;
      scaled[i] = probabilities_[i] * static_cast<double>(n);
      (scaled[i] < 1.0 ? small : large).push_back(i);
    }
    while (!small.empty() && !large.empty()) {
      const std::size_t s = small.back();
      small.pop_back();
      const std::size_t l = large.back();
      prob_[s] = scaled[s];
      alias_[s] = l;
      scaled[l] -= 1.0 - scaled[s];
      if (scaled[l] < 1.0) {
        large.pop_back();
        small.push_back(l);
      }
    }
    for (auto i : large) prob_[i] = 1.0;
    for (auto i : small) prob_[i] = 1.0;
  }

  std::size_t size() const { return prob_.size(); }

  // Normalized probability of outcome i (the analytic distribution).
  double probability(std::size_t i) const { return probabilities_[i]; }

  std::size_t sample(Rng& rng) const {
    const std::size_t column = rng.below(prob_.size());
    return rng.uniform() < prob_[column] ? column : alias_[column];
  }

 private:
  std::vector<double> prob_;
  std::vector<std::size_t> alias_;
  std::vector<double> probabilities_;
};

}  // namespace cocolm
