#pragma once

#include <functional>

namespace loft::par {

enum class Mode { Serial, Parallel };

// Process-wide execution mode; defaults to Parallel when built with OpenMP.
Mode mode();
void set_mode(Mode m);
int worker_count();

// Runs fn(i) for i in [0, n). Every job must write only to its own output
// slot, so results are byte-identical in both modes; only wall time changes.
// The first exception thrown by a job is rethrown on the calling thread.
void parallel_for(int n, const std::function<void(int)>& fn);

}  // namespace loft::par
