#pragma once

#include <cstddef>
#include <functional>

namespace sfpose {

// Process-wide cap on worker threads (the CLI's --threads). 0 means
// hardware concurrency.
void set_max_threads(std::size_t n);
std::size_t max_threads();

// Runs body(i) for i in [0, n) on up to max_threads() threads. Iterations
// must be independent; the first exception thrown is rethrown here.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace sfpose
