#pragma once

// Counter-based random streams.
//
// Every draw is a pure function of (master seed, task id, purpose, salt,
// counter). The generator is the SplitMix64 output function applied to a
// Weyl sequence:
//
//   key     = mix(mix(mix(mix(seed ^ 0x5375626e6574556eULL) ^ task) ^ purpose) ^ salt)
//   draw(n) = mix(key + (n + 1) * 0x9e3779b97f4a7c15ULL)
//   mix(z)  : z ^= z >> 30; z *= 0xbf58476d1ce4e5b9ULL;
//             z ^= z >> 27; z *= 0x94d049bb133111ebULL;
//             z ^= z >> 31;
//
// All arithmetic is on uint64_t with wrap-around, so outputs are identical on
// every platform. Floating draws use the top 53 bits.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

namespace subnet_unlearn {

enum class Purpose : std::uint64_t {
  param_init = 1,
  score_init = 2,
  data_order = 3,
  buffer_sample = 4,
  retrain_order = 5,
  scenario = 6,
  evaluation = 7,
};

inline constexpr std::uint64_t kWeylGamma = 0x9e3779b97f4a7c15ULL;
inline constexpr std::uint64_t kSeedSalt = 0x5375626e6574556eULL;

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z ^= z >> 30;
  z *= 0xbf58476d1ce4e5b9ULL;
  z ^= z >> 27;
  z *= 0x94d049bb133111ebULL;
  z ^= z >> 31;
  return z;
}

constexpr std::uint64_t domain_key(std::uint64_t seed, std::uint64_t task, Purpose purpose,
                                   std::uint64_t salt = 0) noexcept {
  std::uint64_t k = mix64(seed ^ kSeedSalt);
  k = mix64(k ^ task);
  k = mix64(k ^ static_cast<std::uint64_t>(purpose));
  return mix64(k ^ salt);
}

class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t task, Purpose purpose, std::uint64_t salt = 0)
      : seed_(seed), task_(task), purpose_(purpose), key_(domain_key(seed, task, purpose, salt)) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t task() const noexcept { return task_; }
  Purpose purpose() const noexcept { return purpose_; }
  std::uint64_t counter() const noexcept { return counter_; }

  // Random access; does not move the counter.
  std::uint64_t at(std::uint64_t n) const noexcept { return mix64(key_ + (n + 1) * kWeylGamma); }

  std::uint64_t next_u64() noexcept { return at(counter_++); }

  static double to_unit(std::uint64_t bits) noexcept {
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
  }

  // [0, 1)
  double uniform01() noexcept { return to_unit(next_u64()); }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform01(); }

  // Uniform integer in [0, n), Lemire's multiply-and-reject.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("RngStream::below: n must be positive");
    std::uint64_t x = next_u64();
    unsigned __int128 m = static_cast<unsigned __int128>(x) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
      const std::uint64_t threshold = (0 - n) % n;
      while (low < threshold) {
        x = next_u64();
        m = static_cast<unsigned __int128>(x) * n;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  // Standard normal via Box-Muller; consumes two draws, uses the cosine branch.
  double normal() noexcept {
    const double u1 = 1.0 - uniform01();
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Fisher-Yates over the whole range.
  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  // First k entries of a uniformly random permutation of [0, n).
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
    if (k > n) throw std::invalid_argument("sample_without_replacement: k > n");
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = 0; i < k; ++i) {
      const auto j = i + static_cast<std::size_t>(below(n - i));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    return idx;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t task_;
  Purpose purpose_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace subnet_unlearn
