#include "reg4rec/numerics/rng.hpp"

#include <cmath>
#include <numbers>

#include "reg4rec/error.hpp"

namespace reg4rec::numerics {

namespace {
constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
}

// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t x) {
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

RngStream::RngStream(std::uint64_t seed) : key_(mix64(seed + kGolden)) {}

RngStream RngStream::substream(std::uint64_t id) const {
  return RngStream(mix64(key_ ^ mix64(id * kGolden + 0x632BE59BD9B4E019ULL)), 0, 0);
}

RngStream RngStream::substream(std::string_view name) const {
  // FNV-1a over the name, then the numeric path.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return substream(h);
}

std::uint64_t RngStream::next_u64() { return mix64(key_ + (++counter_) * kGolden); }

double RngStream::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double RngStream::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t RngStream::index(std::size_t n) {
  if (n == 0) throw Error("empty-range", "cannot draw an index from an empty range");
  // Rejection keeps the draw unbiased.
  const std::uint64_t bound = n;
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  for (;;) {
    const std::uint64_t x = next_u64();
    if (x < limit) return static_cast<std::size_t>(x % bound);
  }
}

std::size_t RngStream::categorical(std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw Error("invalid-distribution", "categorical weights must be finite and nonnegative");
    total += w;
  }
  if (!(total > 0.0)) throw Error("invalid-distribution", "categorical weights sum to zero");
  const double u = uniform() * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (u < acc) return i;
  }
  // Rounding left u at the top edge; return the last index with positive weight.
  for (std::size_t i = weights.size(); i-- > 0;) {
    if (weights[i] > 0.0) return i;
  }
  return weights.size() - 1;
}

}  // namespace reg4rec::numerics
