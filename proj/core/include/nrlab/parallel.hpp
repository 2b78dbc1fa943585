#pragma once

#include <cstddef>
#include <functional>

namespace nrlab {

// Worker-pool size used by every parallel loop. 0 selects the hardware
// concurrency.
void set_num_threads(std::size_t n);
std::size_t num_threads();

// Runs body(i) for i in [0, n). Each index is processed exactly once; results
// must be written to index-addressed slots so output order never depends on
// scheduling. The first exception thrown by a body is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace nrlab
