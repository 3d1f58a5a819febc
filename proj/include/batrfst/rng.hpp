// Counter-based random stream: (seed, stream_id, counter) -> u64.
// Same (seed, stream_id) replays the same sequence regardless of which
// thread or episode consumes it, so parallel evaluation stays reproducible.

#ifndef BATRFST_RNG_HPP_
#define BATRFST_RNG_HPP_

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace batr {

namespace detail {

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

inline std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBULL;
  x ^= x >> 31;
  return x;
}

}  // namespace detail

class rng_stream {
 public:
  rng_stream() : rng_stream(0, 0) {}
  rng_stream(std::uint64_t seed, std::uint64_t stream_id)
      : seed_(seed), stream_id_(stream_id), counter_(0) {
    key_ = detail::mix64(seed + detail::kGolden * (stream_id + 1));
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() { return detail::mix64(key_ + detail::kGolden * ++counter_); }

  // Unbiased enough for desk scale: 128-bit multiply-shift range reduction.
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller; consumes exactly two draws per call.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log1p(-u1));
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // First k of a seeded permutation of {0..n-1}, in draw order.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    shuffle(idx);
    idx.resize(k);
    return idx;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t counter_;
  std::uint64_t key_;
};

// Stream-id scheme: purpose tag mixed with up to two indices. Keeps every
// consumer (masking, dropout, episodes, augmentation, ...) on its own stream.
enum class rng_purpose : std::uint64_t {
  param_init = 1,
  mask_plan = 2,
  dropout = 3,
  shuffle = 4,
  episode = 5,
  augment = 6,
  mc_pass = 7,
  synth = 8,
  partition = 9,
  generic = 10,
};

inline rng_stream make_stream(std::uint64_t seed, rng_purpose purpose, std::uint64_t a = 0,
                              std::uint64_t b = 0) {
  std::uint64_t id = detail::mix64(static_cast<std::uint64_t>(purpose) +
                                   detail::kGolden * (a + 1) + detail::mix64(b + 1));
  return rng_stream(seed, id);
}

}  // namespace batr

#endif  // BATRFST_RNG_HPP_
