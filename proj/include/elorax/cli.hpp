#pragma once

#include <cstddef>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

namespace elorax {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 2;
inline constexpr int kExitNumerical = 3;

/// Runs one invocation. `args` excludes the program name. Results go to
/// `out`, progress and diagnostics to `err`. Never throws.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Worker count from ELORAX_THREADS (default: hardware concurrency, min 1).
std::size_t worker_count();

/// Runs fn(0..count-1) on up to worker_count() threads. Each index is handled
/// exactly once; callers write results into per-index slots.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn);

}  // namespace elorax
