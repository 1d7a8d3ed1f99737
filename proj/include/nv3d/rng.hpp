#ifndef NV3D_RNG_HPP
#define NV3D_RNG_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <vector>

namespace nv3d::rng {

/// Stream families. Each sampler draws from its own family so that adding or
/// reordering stages never shifts another stage's random numbers.
enum class Tag : std::uint64_t {
  cap = 1,
  nd = 2,
  fov = 3,
  general_bin = 4,
  random = 5,
  fps = 6,
  scene = 7,
  fusion_init = 8,
  batch = 9,
};

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

constexpr std::uint64_t derive_key(std::uint64_t seed, Tag tag, std::uint64_t index) noexcept {
  std::uint64_t k = mix64(seed + 0x9E3779B97F4A7C15ull);
  k = mix64(k ^ (static_cast<std::uint64_t>(tag) * 0xD1B54A32D192ED03ull));
  k = mix64(k ^ (index * 0x8CB92BA72F3D8DD7ull + 0x632BE59BD9B4E019ull));
  return k;
}

/// Counter-based stream: the n-th draw is a pure function of
/// (seed, tag, index, n), independent of any other stream's consumption.
/// Output is identical on every platform and standard library.
class Stream {
 public:
  Stream(std::uint64_t seed, Tag tag, std::uint64_t index = 0) noexcept
      : key_(derive_key(seed, tag, index)) {}

  std::uint64_t at(std::uint64_t counter) const noexcept {
    return mix64(key_ + (counter + 1) * 0x9E3779B97F4A7C15ull);
  }

  std::uint64_t next() noexcept { return at(counter_++); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n); n must be > 0.
  std::uint64_t below(std::uint64_t n) noexcept {
    // Lemire's multiply-shift with rejection.
    std::uint64_t x = next();
    __uint128_t m = static_cast<__uint128_t>(x) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
      const std::uint64_t threshold = (0 - n) % n;
      while (low < threshold) {
        x = next();
        m = static_cast<__uint128_t>(x) * n;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  /// Standard normal via Box-Muller (one variate per call).
  double normal() noexcept {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t consumed() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// Uniformly random k-subset of positions [0, n), returned in ascending order.
inline std::vector<std::size_t> choose_subset(std::size_t n, std::size_t k, Stream& stream) {
  if (k >= n) {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    return all;
  }
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  // partial Fisher-Yates
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(stream.below(n - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

}  // namespace nv3d::rng

#endif  // NV3D_RNG_HPP
