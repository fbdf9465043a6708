#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace nnbf {

// Counter-based generator (splitmix64 core). All randomness in the project
// flows through this class so that results are bit-reproducible across
// platforms and standard-library versions; std::normal_distribution and
// friends are implementation-defined and deliberately avoided.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller, no caching: two uniforms per draw, call-sequence deterministic.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    // u1 in (0,1] so the log is finite
    return std::sqrt(-2.0 * std::log(1.0 - u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  bool bit() { return (next_u64() >> 63) != 0; }

  // Integer in [0, n)
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

 private:
  std::uint64_t state_;
};

// Labeled sub-seeding: one root seed, independent streams per (label, index).
// FNV-1a over the label mixed with the root and the stream index.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view label,
                                 std::uint64_t index = 0) {
  std::uint64_t h = 0xcbf29ce484222325ULL ^ root;
  for (char c : label) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  h ^= index + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  // one splitmix round to decorrelate nearby indices
  h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ULL;
  h = (h ^ (h >> 27)) * 0x94d049bb133111ebULL;
  return h ^ (h >> 31);
}

inline RngStream derive_stream(std::uint64_t root, std::string_view label,
                               std::uint64_t index = 0) {
  return RngStream(derive_seed(root, label, index));
}

}  // namespace nnbf
