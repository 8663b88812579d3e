#include "svqa/core/rng.hpp"

#include <cmath>
#include <numbers>

namespace svqa {

namespace {
constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
}

std::uint64_t mix64(std::uint64_t x) noexcept {
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBULL;
  x ^= x >> 31;
  return x;
}

std::uint64_t fnv1a64(std::span<const char> bytes) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

Rng::Rng(std::uint64_t seed, std::uint64_t stream) : key_(mix64(seed + kGolden) ^ mix64(~stream * kGolden)) {}

std::uint64_t Rng::next_u64() noexcept {
  const std::uint64_t x = key_ + (++counter_) * kGolden;
  return mix64(x ^ (x >> 32));
}

double Rng::uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() noexcept {
  // Box-Muller; one draw per call keeps the stream position a function of call count.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::int64_t Rng::below(std::int64_t n) noexcept {
  const auto range = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % range);
  std::uint64_t x = next_u64();
  while (x >= limit) x = next_u64();
  return static_cast<std::int64_t>(x % range);
}

Rng Rng::split(std::uint64_t stream) const noexcept {
  Rng child(0);
  child.key_ = mix64(key_ ^ mix64(stream + 0x632BE59BD9B4E019ULL));
  return child;
}

}  // namespace svqa
