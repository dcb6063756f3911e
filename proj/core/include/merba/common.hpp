#pragma once
// Shared plumbing: error checking, deterministic RNG, thread pool cap,
// global float-width mode.

#include <cstdint>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace merba {

// Validation failures (bad shapes, bad attributes, bad configs). CLI maps
// these to exit code 1.
struct ValidationError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Numerical failures (non-finite values, diverged training). Exit code 2.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {
inline void format_into(std::ostringstream&) {}
template <typename T, typename... Rest>
void format_into(std::ostringstream& os, const T& v, const Rest&... rest) {
    os << v;
    format_into(os, rest...);
}
}  // namespace detail

template <typename... Parts>
std::string concat(const Parts&... parts) {
    std::ostringstream os;
    detail::format_into(os, parts...);
    return os.str();
}

#define MERBA_CHECK(cond, ...)                                        \
    do {                                                              \
        if (!(cond)) throw ::merba::ValidationError(::merba::concat(__VA_ARGS__)); \
    } while (0)

#define MERBA_NUMERIC_CHECK(cond, ...)                                \
    do {                                                              \
        if (!(cond)) throw ::merba::NumericalError(::merba::concat(__VA_ARGS__)); \
    } while (0)

// Global float width. Storage is always double; in F32 mode every op output
// and freshly created tensor is rounded to float32 so that values stay
// exactly representable in 32 bits (and thus round-trip through f32 files).
enum class Dtype : uint8_t { F32 = 0, F64 = 1 };

Dtype default_dtype();
void set_default_dtype(Dtype d);

// RAII override, used heavily by tests and the gradcheck suite.
struct DtypeScope {
    explicit DtypeScope(Dtype d) : prev_(default_dtype()) { set_default_dtype(d); }
    ~DtypeScope() { set_default_dtype(prev_); }
  private:
    Dtype prev_;
};

// xoshiro256++ with splitmix64 seeding. Hand-rolled so that streams are
// bit-identical across standard libraries.
class Rng {
  public:
    explicit Rng(uint64_t seed);
    uint64_t next_u64();
    // uniform in [0, 1)
    double uniform();
    double uniform(double lo, double hi);
    // standard normal via Box-Muller
    double normal();
    // uniform integer in [0, n)
    uint64_t next_below(uint64_t n);
    // deterministic Fisher-Yates
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    uint64_t s_[4];
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Worker cap: min(MERBA_THREADS, hardware_concurrency), at least 1.
int max_threads();

// Splits [0, n) into contiguous chunks, one per worker. Results must be
// written to disjoint locations; the partition is deterministic but the
// chunking depends on the worker count, so cross-chunk reductions must be
// ordered by the caller.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body);

}  // namespace merba
