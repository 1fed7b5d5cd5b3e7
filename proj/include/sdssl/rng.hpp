#pragma once

#include "sdssl/common.hpp"

#include <cstdint>
#include <initializer_list>
#include <cmath>
#include <random>
#include <vector>
#include <string_view>

namespace sdssl {

using Rng = std::mt19937_64;

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Derives an independent stream seed from a root seed and a key path.
inline std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = mix64(root);
  for (auto k : keys) h = mix64(h ^ mix64(k));
  return h;
}

inline Rng make_rng(std::uint64_t root, std::string_view stream,
                    std::initializer_list<std::uint64_t> keys = {}) {
  std::uint64_t h = derive_seed(root, {fnv1a(stream)});
  for (auto k : keys) h = mix64(h ^ mix64(k));
  return Rng(h);
}

/// Fisher-Yates with explicit draws, so a seed gives the same order with
/// every standard library.
template <typename T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

/// Normal(0, std) truncated to [-2 std, 2 std] by rejection.
inline Matrix trunc_normal(Index rows, Index cols, Real std, Rng& rng) {
  std::normal_distribution<Real> dist(0.0, std);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) {
    Real v;
    do {
      v = dist(rng);
    } while (std::abs(v) > 2.0 * std);
    m.data()[i] = v;
  }
  return m;
}

inline Matrix xavier_uniform(Index fan_in, Index fan_out, Rng& rng) {
  const Real bound = std::sqrt(6.0 / static_cast<Real>(fan_in + fan_out));
  std::uniform_real_distribution<Real> dist(-bound, bound);
  Matrix m(fan_in, fan_out);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

}  // namespace sdssl
