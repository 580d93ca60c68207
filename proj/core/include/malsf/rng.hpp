#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace malsf {

// Deterministic random source. Draw helpers are hand-rolled on top of
// mt19937_64 because std::uniform_*_distribution output is
// implementation-defined; checkpoints and datasets must be byte-stable.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // Unbiased integer in [0, n), n >= 1. Rejection sampling.
  uint64_t below(uint64_t n);

  // Uniform double in [0, 1) with 53 bits of precision.
  double uniform();

  // Gaussian via Box-Muller; one spare value cached per pair.
  double normal(double mean = 0.0, double stddev = 1.0);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// splitmix64 mix of a base seed and a stream index, for per-sample /
// per-epoch substreams.
uint64_t derive_seed(uint64_t base, uint64_t stream);

}  // namespace malsf
