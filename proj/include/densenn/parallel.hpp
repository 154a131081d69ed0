#pragma once

#include <cstddef>
#include <functional>

namespace densenn {

// Runs fn(i) for every i in [0, n). Work items must write disjoint outputs;
// results are then independent of scheduling and thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

// Caps worker threads for the whole process. 0 restores the default
// (all available cores).
void set_thread_limit(std::size_t threads);
std::size_t thread_limit();

}  // namespace densenn
