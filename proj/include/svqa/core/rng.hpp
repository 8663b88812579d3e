#pragma once

#include <cstdint>
#include <span>
#include <utility>

namespace svqa {

/// Counter-based 64-bit generator. Output i is a pure function of (key, i),
/// so streams can be split and replayed without shared state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t next_u64() noexcept;
  /// Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  double normal() noexcept;
  /// Uniform integer in [0, n). n must be positive.
  std::int64_t below(std::int64_t n) noexcept;

  /// Independent generator derived from this key and `stream`; does not advance this one.
  Rng split(std::uint64_t stream) const noexcept;

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

  template <typename T>
  void shuffle(std::span<T> items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      auto j = static_cast<std::size_t>(below(static_cast<std::int64_t>(i)));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t x) noexcept;

/// FNV-1a over bytes; used for stable ids and config hashes.
std::uint64_t fnv1a64(std::span<const char> bytes) noexcept;

}  // namespace svqa
