#pragma once

#include <cstddef>
#include <functional>

namespace mixflow {

// Worker cap: MIXFLOW_THREADS when set, hardware concurrency otherwise.
std::size_t worker_count();

// Runs body(i) for i in [0, n). Each index writes only its own output slot,
// so results are independent of the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace mixflow
