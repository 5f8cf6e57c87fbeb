#pragma once

#include <array>
#include <cstdint>

namespace arvsr {

// Counter-based generator (Philox-4x32-10). A generator is a (key, stream)
// pair plus a counter; two generators with equal key/stream/counter produce
// identical sequences, and `fork` derives independent streams without
// touching the parent's counter.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0, uint64_t stream = 0) : seed_(seed), stream_(stream) {}

  // Independent child stream identified by `id`. Pure: does not advance *this.
  Rng fork(uint64_t id) const;

  uint32_t next_u32();
  uint64_t next_u64();
  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [lo, hi] inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi);
  double normal();

  uint64_t seed() const { return seed_; }
  uint64_t stream() const { return stream_; }
  uint64_t counter() const { return counter_; }

 private:
  void refill();

  uint64_t seed_;
  uint64_t stream_;
  uint64_t counter_ = 0;
  std::array<uint32_t, 4> block_{};
  int used_ = 4;
  bool has_spare_normal_ = false;
  double spare_normal_ = 0.0;
};

std::array<uint32_t, 4> philox4x32(std::array<uint32_t, 4> ctr, std::array<uint32_t, 2> key);

}  // namespace arvsr
