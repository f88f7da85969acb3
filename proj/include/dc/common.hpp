#ifndef DC_COMMON_HPP
#define DC_COMMON_HPP

#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace dc {

enum class ErrorCode {
    dimension,
    config,
    cache,
    format,
    io,
    usage,
    eval,
    numeric,
};

const char* error_code_name(ErrorCode c);

struct Error : std::runtime_error {
    ErrorCode code;
    Error(ErrorCode c, const std::string& msg) : std::runtime_error(msg), code(c) {}
};

[[noreturn]] inline void fail(ErrorCode c, const std::string& msg) {
    throw Error(c, msg);
}

inline void require(bool cond, ErrorCode c, const std::string& msg) {
    if (!cond)
        fail(c, msg);
}

// Worker cap for the OpenMP kernels. 0 = library default (env DC_THREADS,
// falling back to the hardware count). Kernels are deterministic for any
// setting: every output element keeps a fixed serial accumulation order.
void set_threads(int n);
int threads();

// Static-chunked parallel loop. body(begin, end) covers [begin, end).
// Chunk boundaries depend only on n, never on the worker count, so
// reductions that combine per-chunk partials stay bit-stable.
void parallel_chunks(int64_t n, void* ctx, void (*body)(void*, int64_t, int64_t));

template <typename F>
void parallel_for(int64_t n, F&& body) {
    struct Shim {
        F* f;
    } shim{&body};
    parallel_chunks(n, &shim, [](void* ctx, int64_t b, int64_t e) {
        (*static_cast<Shim*>(ctx)->f)(b, e);
    });
}

}  // namespace dc

#endif  // DC_COMMON_HPP
