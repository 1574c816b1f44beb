#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace accvit {

// Error taxonomy. Dimension errors are runtime shape mismatches; partition
// errors are divisibility violations (the message names the offending dim);
// config errors are construction-time problems; usage errors are API misuse.
class DimensionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class PartitionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Deterministic random stream: splitmix64 for integers, Box-Muller for
// normals. Self-contained (no std::distribution) so the exact draw sequence
// is bit-stable across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n) { return next_u64() % n; }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    const double u2 = uniform();
    const double mag = std::sqrt(-2.0 * std::log(u1));
    const double ang = 6.28318530717958647692 * u2;
    spare_ = mag * std::sin(ang);
    have_spare_ = true;
    return mag * std::cos(ang);
  }

  // Normal truncated to +-2 sigma, then scaled.
  double trunc_normal(double stddev) {
    for (;;) {
      const double z = normal();
      if (z >= -2.0 && z <= 2.0) return z * stddev;
    }
  }

  // Derives an independent stream, e.g. per sample index.
  static Rng fork(std::uint64_t seed, std::uint64_t stream) {
    Rng mixer(seed ^ (0x517cc1b727220a95ULL * (stream + 1)));
    return Rng(mixer.next_u64());
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// Internal parallelism cap. ACCVIT_THREADS env var (default 1: fully serial,
// reproducible by construction). Work is split so each output element is
// produced by exactly one thread with an unchanged per-element reduction
// order, so results are bit-identical for any thread count.
namespace threading {

inline std::atomic<int>& thread_cap() {
  static std::atomic<int> cap{-1};
  return cap;
}

inline int max_threads() {
  int v = thread_cap().load(std::memory_order_relaxed);
  if (v > 0) return v;
  int parsed = 1;
  if (const char* env = std::getenv("ACCVIT_THREADS")) {
    parsed = std::atoi(env);
    if (parsed < 1) parsed = 1;
    const int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw > 0 && parsed > hw) parsed = hw;
  }
  thread_cap().store(parsed, std::memory_order_relaxed);
  return parsed;
}

inline void set_max_threads(int n) { thread_cap().store(n < 1 ? 1 : n, std::memory_order_relaxed); }

// body(lo, hi) over disjoint chunks of [0, n).
template <class F>
void parallel_for(std::int64_t n, F&& body) {
  if (n <= 0) return;
  const int threads = max_threads();
  if (threads <= 1 || n < 2) {
    body(std::int64_t{0}, n);
    return;
  }
  const int workers = static_cast<int>(std::min<std::int64_t>(threads, n));
  const std::int64_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers - 1));
  for (int w = 1; w < workers; ++w) {
    const std::int64_t lo = w * chunk;
    const std::int64_t hi = std::min<std::int64_t>(lo + chunk, n);
    if (lo >= hi) break;
    pool.emplace_back([&body, lo, hi] { body(lo, hi); });
  }
  body(std::int64_t{0}, std::min<std::int64_t>(chunk, n));
  for (auto& t : pool) t.join();
}

}  // namespace threading

}  // namespace accvit
