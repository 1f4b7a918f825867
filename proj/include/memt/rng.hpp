#pragma once

#include <cstdint>
#include <random>

namespace memt {

// Seeded RNG handed explicitly to every stochastic operation so runs are
// reproducible. fork() derives an independent stream for sub-tasks without
// disturbing the parent sequence.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(gen_);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(gen_);
  }

  // Uniform integer in [lo, hi] inclusive.
  std::int64_t randint(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(gen_);
  }

  bool bernoulli(double p) { return std::bernoulli_distribution(p)(gen_); }

  Rng fork(std::uint64_t salt) {
    return Rng(gen_() ^ (0x9e3779b97f4a7c15ULL * (salt + 1)));
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

}  // namespace memt
