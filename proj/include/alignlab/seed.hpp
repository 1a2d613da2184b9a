#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace alignlab {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Derives independent named sub-streams from a single root seed, so that
/// adding draws to one stage never shifts the randomness of another.
class SeedStreams {
 public:
  explicit SeedStreams(std::uint64_t root) : root_(root) {}

  std::uint64_t root() const { return root_; }

  std::uint64_t derive(std::string_view name, std::uint64_t index = 0) const {
    return splitmix64(splitmix64(root_ ^ fnv1a(name)) + index);
  }

  Rng rng(std::string_view name, std::uint64_t index = 0) const { return Rng(derive(name, index)); }

 private:
  std::uint64_t root_;
};

}  // namespace alignlab
