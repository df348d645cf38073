#pragma once

#include <cstddef>
#include <functional>

namespace nifm {

/// Resolves a requested thread count: > 0 is taken as is, otherwise
/// NIFM_THREADS, otherwise the hardware concurrency.
int resolve_threads(int requested);

/// Runs body(i) for i in [0, count) on up to `threads` workers. Work items are
/// handed out by index, so results written per index are independent of the
/// thread count. Exceptions from the body are rethrown (first one wins).
void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)>& body);

}  // namespace nifm
