#pragma once

#include <cstdint>
#include <limits>
#include <random>
#include <string_view>
#include <vector>

namespace gssm {

/// Counter-based generator: output i of a stream is mix(key, i), so a stream
/// can be split into named children without consuming draws from the parent.
/// Satisfies UniformRandomBitGenerator for use with <random> distributions.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0) : key_(mix(seed ^ 0x9e3779b97f4a7c15ULL)) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return mix(key_ + 0x9e3779b97f4a7c15ULL * ++counter_); }

  /// Child stream keyed by (this key, name). Does not advance this stream.
  [[nodiscard]] Rng split(std::string_view name) const;
  /// Child stream keyed by (this key, index). Does not advance this stream.
  [[nodiscard]] Rng split(std::uint64_t index) const;

  double uniform(double lo = 0.0, double hi = 1.0);
  double normal(double mean = 0.0, double stddev = 1.0);
  std::size_t index(std::size_t n);

  std::vector<std::size_t> permutation(std::size_t n);

  [[nodiscard]] std::uint64_t counter() const { return counter_; }

 private:
  Rng(std::uint64_t key, int /*tag*/) : key_(key) {}
  static std::uint64_t mix(std::uint64_t z);

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace gssm
