#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "fmp/matrix.hpp"

namespace fmp {

namespace detail {
inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}
}  // namespace detail

// Counter-based random stream keyed by (seed, stream-id). The i-th draw is a pure function
// of (seed, stream-id, i), so streams can be handed to threads without coordination and
// child streams can be split off deterministically with derive().
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id)
      : seed_(seed),
        stream_(stream_id),
        key_(detail::splitmix64(seed ^ detail::splitmix64(stream_id + 0xD1B54A32D192ED03ULL))) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_; }
  std::uint64_t position() const noexcept { return counter_; }

  // Independent child stream with the same seed.
  RngStream derive(std::uint64_t tag) const {
    return RngStream(seed_, detail::splitmix64(stream_ * 0x9E3779B97F4A7C15ULL + detail::splitmix64(tag)));
  }

  std::uint64_t next_u64() {
    const std::uint64_t x = key_ + 0x9E3779B97F4A7C15ULL * (++counter_);
    return detail::splitmix64(x ^ (x >> 29));
  }

  // Uniform on the open interval (0, 1).
  double uniform() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

  // Box-Muller; one normal per pair of uniforms so the stream position is draw-count exact.
  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::size_t uniform_index(std::size_t n) {
    return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
  }

  // Marsaglia-Tsang, with the shape < 1 boost.
  double gamma(double shape) {
    if (shape < 1.0) {
      const double u = uniform();
      return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = normal();
      double v = 1.0 + c * x;
      if (v <= 0.0) continue;
      v = v * v * v;
      const double u = uniform();
      if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
    }
  }

  // Fisher-Yates.
  template <class T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = uniform_index(i);
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

inline Matrix sample_gaussian(RngStream& rng, std::size_t rows, std::size_t cols, double stddev = 1.0) {
  Matrix out(rows, cols);
  for (double& x : out.values()) x = stddev * rng.normal();
  return out;
}

}  // namespace fmp
