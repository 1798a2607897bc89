#pragma once

// Shared plumbing: error taxonomy, deterministic RNG, hashing, and a small
// thread pool. Every parallel construct here keeps a fixed work partition so
// repeated runs produce bitwise-identical results.

#include <atomic>
#include <cmath>
#include <concepts>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <mutex>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace voxfuse {

template <typename T>
concept Scalar = std::same_as<T, float> || std::same_as<T, double>;

// ---------------------------------------------------------------------------
// Errors

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct BoundsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Hashing (FNV-1a, used for archive checksums and seed derivation)

constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = kFnvOffset) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s,
                             std::uint64_t h = kFnvOffset) {
  return fnv1a64(s.data(), s.size(), h);
}

// Derives an independent stream seed from a base seed and a label.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
  std::uint64_t h = fnv1a64(&seed, sizeof(seed));
  return fnv1a64(label, h);
}

// ---------------------------------------------------------------------------
// Deterministic RNG.
//
// Draws are hand-rolled on top of mt19937_64 rather than <random>
// distributions so the byte stream does not depend on the standard library
// implementation. normal() uses Box-Muller and discards the paired variate,
// keeping the engine word stream the only state (serializable).

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi], inclusive. Unbiased via rejection.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    if (hi < lo) throw ContractError("uniform_int: empty range");
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<std::int64_t>(eng_());  // full range
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    std::uint64_t r = eng_();
    while (r >= limit) r = eng_();
    return lo + static_cast<std::int64_t>(r % span);
  }

  // Standard normal via Box-Muller (second variate discarded).
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  std::string state() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
    if (!is) throw DataError("Rng: malformed engine state");
  }

 private:
  std::mt19937_64 eng_;
};

// ---------------------------------------------------------------------------
// Thread pool.
//
// Work is dispatched as an indexed job set; each index is claimed by exactly
// one thread and processed with its own serial loops, so results never depend
// on the number of workers. The caller thread participates.

class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  int size() const { return static_cast<int>(workers_.size()) + 1; }

  // Runs job(0..njobs-1), blocking until all complete. Not reentrant: a call
  // from inside a pool job executes inline on the calling thread.
  void run(int njobs, const std::function<void(int)>& job) {
    if (njobs <= 0) return;
    if (njobs == 1 || workers_.empty() || inside_job_) {
      for (int j = 0; j < njobs; ++j) job(j);
      return;
    }
    std::uint64_t my_epoch;
    {
      std::lock_guard<std::mutex> lk(mu_);
      job_ = &job;
      njobs_ = njobs;
      next_ = 0;
      pending_ = njobs;
      my_epoch = ++epoch_;
    }
    cv_.notify_all();
    work_loop(my_epoch);
    std::unique_lock<std::mutex> lk(mu_);
    done_cv_.wait(lk, [&] { return pending_ == 0; });
    job_ = nullptr;
  }

  ~ThreadPool() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
      ++epoch_;
    }
    cv_.notify_all();
    for (auto& t : workers_) t.join();
  }

 private:
  ThreadPool() {
    unsigned hw = std::thread::hardware_concurrency();
    if (const char* env = std::getenv("VOXFUSE_THREADS")) {
      const long v = std::strtol(env, nullptr, 10);
      if (v >= 1 && v <= 256) hw = static_cast<unsigned>(v);
    }
    const unsigned extra = hw > 1 ? hw - 1 : 0;
    for (unsigned i = 0; i < extra; ++i) {
      workers_.emplace_back([this] { worker_main(); });
    }
  }

  void worker_main() {
    inside_job_ = true;
    std::uint64_t seen = 0;
    for (;;) {
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] { return epoch_ != seen; });
        seen = epoch_;
        if (stop_) return;
      }
      work_loop(seen);
    }
  }

  // Claims indices under the lock and re-validates the dispatch epoch, so a
  // worker waking late can never touch a newer dispatch's job.
  void work_loop(std::uint64_t my_epoch) {
    for (;;) {
      const std::function<void(int)>* job;
      int j;
      {
        std::lock_guard<std::mutex> lk(mu_);
        if (epoch_ != my_epoch || next_ >= njobs_ || job_ == nullptr) break;
        j = next_++;
        job = job_;
      }
      (*job)(j);
      std::lock_guard<std::mutex> lk(mu_);
      if (--pending_ == 0) done_cv_.notify_all();
    }
  }

  std::vector<std::thread> workers_;
  std::mutex mu_;
  std::condition_variable cv_, done_cv_;
  const std::function<void(int)>* job_ = nullptr;
  int njobs_ = 0;
  int next_ = 0;
  int pending_ = 0;
  std::uint64_t epoch_ = 0;
  bool stop_ = false;
  static inline thread_local bool inside_job_ = false;
};

// Splits [0, n) into contiguous chunks and runs fn(begin, end) per chunk.
// Chunks are independent; fn must not reduce across chunk boundaries.
inline void parallel_for(std::int64_t n, std::int64_t grain,
                         const std::function<void(std::int64_t, std::int64_t)>& fn) {
  if (n <= 0) return;
  ThreadPool& pool = ThreadPool::instance();
  std::int64_t chunks = std::min<std::int64_t>(pool.size(), (n + grain - 1) / grain);
  if (chunks <= 1) {
    fn(0, n);
    return;
  }
  pool.run(static_cast<int>(chunks), [&](int c) {
    const std::int64_t b = n * c / chunks;
    const std::int64_t e = n * (c + 1) / chunks;
    if (b < e) fn(b, e);
  });
}

}  // namespace voxfuse
