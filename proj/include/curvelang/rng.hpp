#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace curvelang {

// Philox4x32-10 block function (Salmon et al., "Parallel random numbers: as
// easy as 1, 2, 3"). Exposed for known-answer tests.
std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> counter,
                                        std::array<std::uint32_t, 2> key);

// Counter-based generator. A stream is fully determined by (key, stream id);
// split() derives independent child streams by name so that e.g. dropout
// masks and noise draws stay reproducible per (seed, step, name).
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  Rng split(std::string_view name) const;
  Rng split(std::uint64_t index) const;

  std::uint32_t next_u32();
  std::uint64_t next_u64();
  // Uniform on [0, 1).
  double uniform();
  // Uniform integer on [0, n).
  std::uint64_t uniform_int(std::uint64_t n);
  double normal();

  std::uint64_t key() const { return key_; }
  std::uint64_t stream() const { return stream_; }

 private:
  void refill();

  std::uint64_t key_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> block_{};
  int used_ = 4;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace curvelang
