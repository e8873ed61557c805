#pragma once

#include <atomic>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace maskgrid {

struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape mismatch between tensor operands.
struct dim_error : error {
    using error::error;
};

// Invalid argument values: out-of-range ids, empty inputs, bad config.
struct input_error : error {
    using error::error;
};

struct io_error : error {
    using error::error;
};

struct checkpoint_error : error {
    using error::error;
};

// NaN/Inf reached a place that requires finite values.
struct numeric_error : error {
    using error::error;
};

namespace nk {

// Debug-mode finite checks on every op output. Off by default: the checks
// cost a full pass over the data in hot loops.
inline std::atomic<bool> g_debug_checks{false};

inline void set_debug_checks(bool on) { g_debug_checks.store(on, std::memory_order_relaxed); }
inline bool debug_checks() { return g_debug_checks.load(std::memory_order_relaxed); }

}  // namespace nk

// Worker thread cap: MASKGRID_THREADS env var, else hardware concurrency.
int worker_threads();

}  // namespace maskgrid
