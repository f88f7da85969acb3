#include "dc/common.hpp"

#include <algorithm>
#include <atomic>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace dc {

const char* error_code_name(ErrorCode c) {
    switch (c) {
        case ErrorCode::dimension: return "E_DIM";
        case ErrorCode::config: return "E_CONFIG";
        case ErrorCode::cache: return "E_CACHE";
        case ErrorCode::format: return "E_FORMAT";
        case ErrorCode::io: return "E_IO";
        case ErrorCode::usage: return "E_USAGE";
        case ErrorCode::eval: return "E_EVAL";
        case ErrorCode::numeric: return "E_NUMERIC";
    }
    return "E_UNKNOWN";
}

static std::atomic<int> g_threads{0};

static int default_threads() {
    if (const char* env = std::getenv("DC_THREADS")) {
        int n = std::atoi(env);
        if (n > 0)
            return n;
    }
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void set_threads(int n) {
    g_threads.store(n < 0 ? 0 : n);
}

int threads() {
    int n = g_threads.load();
    if (n == 0)
        n = default_threads();
    return std::max(1, n);
}

void parallel_chunks(int64_t n, void* ctx, void (*body)(void*, int64_t, int64_t)) {
    if (n <= 0)
        return;
    // Chunk grid fixed by n alone; workers only pick up chunks.
    const int64_t chunk = std::max<int64_t>(1, (n + 63) / 64);
    const int64_t nchunks = (n + chunk - 1) / chunk;
    const int nw = threads();
    const bool par = nw > 1 && nchunks > 1;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(nw) if (par)
#endif
    for (int64_t c = 0; c < nchunks; ++c) {
        const int64_t b = c * chunk;
        const int64_t e = std::min<int64_t>(n, b + chunk);
        body(ctx, b, e);
    }
    (void)par;
}

}  // namespace dc
