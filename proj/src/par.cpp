#include "loft/par.hpp"

#include <atomic>
#include <exception>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace loft::par {

namespace {
Mode g_mode = Mode::Parallel;
}

Mode mode() { return g_mode; }
void set_mode(Mode m) { g_mode = m; }

int worker_count() {
#ifdef _OPENMP
    if (g_mode == Mode::Parallel) return omp_get_max_threads();
#endif
    return 1;
}

void parallel_for(int n, const std::function<void(int)>& fn) {
    if (n <= 0) return;
#ifdef _OPENMP
    if (g_mode == Mode::Parallel && n > 1) {
        std::exception_ptr err = nullptr;
        std::atomic<bool> failed{false};
#pragma omp parallel for schedule(dynamic, 1)
        for (int i = 0; i < n; ++i) {
            if (failed.load(std::memory_order_relaxed)) continue;
            try {
                fn(i);
            } catch (...) {
#pragma omp critical(loft_par_err)
                {
                    if (!err) err = std::current_exception();
                }
                failed.store(true, std::memory_order_relaxed);
            }
        }
        if (err) std::rethrow_exception(err);
        return;
    }
#endif
    for (int i = 0; i < n; ++i) fn(i);
}

}  // namespace loft::par
