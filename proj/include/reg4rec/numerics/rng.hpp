#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>

namespace reg4rec::numerics {

// Counter-based generator: output n of a stream is mix(key, n), so a stream is
// fully described by (key, counter). Substreams derive fresh keys, which lets
// every stochastic operation own an independent, reproducible stream.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0);

  RngStream substream(std::uint64_t id) const;
  RngStream substream(std::string_view name) const;

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  // Uniform integer in [0, n).
  std::size_t index(std::size_t n);
  // Draws an index with probability proportional to weights (need not sum to 1).
  std::size_t categorical(std::span<const double> weights);

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) std::iter_swap(first + (i - 1), first + index(i));
  }

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

 private:
  RngStream(std::uint64_t key, std::uint64_t counter, int) : key_(key), counter_(counter) {}

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t x);

}  // namespace reg4rec::numerics
