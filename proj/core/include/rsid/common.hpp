#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

namespace rsid {

/// Error type thrown across the library; `what()` carries a user-facing
/// message that names the offending file / line / value where possible.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// splitmix64 step; used to derive independent stream seeds so that
/// parallel subproblems (per parent node, per window) are schedule-independent.
std::uint64_t splitmix64(std::uint64_t& state);

/// Derive a seed for a named substream: hash of (seed, salt...).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt_a,
                          std::uint64_t salt_b = 0, std::uint64_t salt_c = 0);

/// Deterministic RNG. Draw methods are hand-rolled on top of a 64-bit
/// generator so results do not depend on the standard library's
/// distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  /// Uniform in [0, 1), 53 bits.
  double next_double();
  /// Uniform in [0, n). n must be > 0.
  std::size_t next_index(std::size_t n);
  /// Standard normal via Box-Muller.
  double next_gaussian();

 private:
  std::uint64_t s_[4];
  bool has_cached_gaussian_ = false;
  double cached_gaussian_ = 0.0;
};

/// Resolve a thread-count request: n >= 1 is taken as-is, n <= 0 falls back
/// to the RSID_THREADS environment variable, then to 1.
int resolve_threads(int requested);

/// Run fn(begin, end) over a static contiguous partition of [0, n).
/// With threads == 1 the call runs inline; chunk boundaries depend only on
/// (n, threads), so any per-chunk side effects are schedule-independent.
void parallel_for(std::size_t n, int threads,
                  const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace rsid
