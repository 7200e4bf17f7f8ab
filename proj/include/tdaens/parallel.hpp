#pragma once

#include <cstddef>
#include <functional>

namespace tdaens {

/// Runs fn(0) .. fn(n_tasks - 1) on up to `jobs` threads. Tasks are claimed
/// dynamically, so callers must make each task's output depend only on its
/// index. The first exception thrown by any task is rethrown after all
/// threads join.
void parallel_for(std::size_t n_tasks, std::size_t jobs, const std::function<void(std::size_t)>& fn);

}  // namespace tdaens
