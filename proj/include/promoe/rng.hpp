#pragma once

#include <array>
#include <cstdint>

namespace promoe {

/// Philox4x32-10 block function (Salmon et al., "Parallel random numbers: as
/// easy as 1, 2, 3"). Pure function of (counter, key).
std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> counter,
                                           std::array<std::uint32_t, 2> key);

/// Independent random streams. Each purpose draws from its own key so that,
/// e.g., changing the dropout rate never shifts the data stream.
enum class Stream : std::uint32_t {
  kInit = 1,
  kData = 2,
  kDropout = 3,
  kTimestep = 4,
  kNoise = 5,
  kSampler = 6,
  kKMeans = 7,
  kTest = 99,
};

/// Counter-based generator keyed by (seed, stream) with the step number in the
/// upper half of the counter:
///   key     = { lo32(seed), hi32(seed) ^ (stream * 0x85EBCA6B) }
///   counter = { lo32(block), hi32(block), lo32(step), hi32(step) }
/// Blocks are consumed sequentially, four 32-bit words each.
class Rng {
 public:
  Rng(std::uint64_t seed, Stream stream, std::uint64_t step = 0);

  std::uint32_t next_u32();
  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Standard normal via Box-Muller (second variate cached).
  double normal();
  /// Uniform integer in [0, n); n must be > 0.
  std::uint64_t below(std::uint64_t n);

 private:
  std::array<std::uint32_t, 2> key_;
  std::uint64_t step_;
  std::uint64_t block_ = 0;
  std::array<std::uint32_t, 4> buf_{};
  int pos_ = 4;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace promoe
