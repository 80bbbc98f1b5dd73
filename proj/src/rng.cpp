#include "cliqueflow/rng.hpp"

#include <cmath>
#include <numbers>

namespace cliqueflow {
namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

Rng::Rng(std::uint64_t seed, std::uint64_t stream)
    : key_(mix64(mix64(seed + kGolden) ^ (stream * kGolden + 0x632BE59BD9B4E019ULL))) {}

Rng Rng::split(std::uint64_t id) const {
  Rng child;
  child.key_ = mix64(key_ ^ mix64(id + 0xD1B54A32D192ED03ULL));
  child.counter_ = 0;
  return child;
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t c = counter_++;
  return mix64(mix64(key_ + c * kGolden) ^ key_);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  // Box-Muller; 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

void Rng::fill_normal(std::span<double> out) {
  std::size_t i = 0;
  for (; i + 1 < out.size(); i += 2) {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    out[i] = r * std::cos(2.0 * std::numbers::pi * u2);
    out[i + 1] = r * std::sin(2.0 * std::numbers::pi * u2);
  }
  if (i < out.size()) out[i] = normal();
}

std::size_t Rng::index(std::size_t n) {
  // Lemire's multiply-shift; bias is < n / 2^64.
  const unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
  return static_cast<std::size_t>(m >> 64);
}

}  // namespace cliqueflow
