#pragma once

#include <cstdint>
#include <span>

namespace cliqueflow {

// Counter-based random stream. Every draw is a pure function of (key, counter),
// so streams can be split per latent / per record / per step and replayed
// independently of thread scheduling.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0);

  // Independent child stream; does not advance this stream.
  Rng split(std::uint64_t id) const;

  std::uint64_t next_u64();
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  void fill_normal(std::span<double> out);
  std::size_t index(std::size_t n);
  bool bernoulli(double p) { return uniform() < p; }

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace cliqueflow
