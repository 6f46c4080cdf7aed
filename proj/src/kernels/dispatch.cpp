#include <atomic>
#include <cstdlib>
#include <cstring>

#include "mrf/error.hpp"
#include "mrf/kernels.hpp"

namespace mrf::kernels {
namespace {

bool cpu_has_avx2() {
#if defined(MRF_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

Backend pick_initial() {
    if (const char* env = std::getenv("MRF_KERNELS")) {
        if (std::strcmp(env, "scalar") == 0) return Backend::scalar;
        if (std::strcmp(env, "avx2") == 0) {
            if (!cpu_has_avx2())
                raise(Err::ConfigError, "MRF_KERNELS=avx2 but CPU/build lacks AVX2+FMA");
            return Backend::avx2;
        }
        raise(Err::ConfigError, std::string("unknown MRF_KERNELS value: ") + env);
    }
    return cpu_has_avx2() ? Backend::avx2 : Backend::scalar;
}

std::atomic<Backend>& current() {
    static std::atomic<Backend> b{pick_initial()};
    return b;
}

} // namespace

bool backend_supported(Backend b) {
    switch (b) {
        case Backend::scalar: return true;
        case Backend::avx2: return cpu_has_avx2();
    }
    return false;
}

Backend active_backend() { return current().load(std::memory_order_relaxed); }

void set_backend(Backend b) {
    if (!backend_supported(b))
        raise(Err::ConfigError, std::string("backend not supported here: ") + backend_name(b));
    current().store(b, std::memory_order_relaxed);
}

const char* backend_name(Backend b) {
    switch (b) {
        case Backend::scalar: return "scalar";
        case Backend::avx2: return "avx2";
    }
    return "?";
}

const KernelTable& table_for(Backend b) {
#if defined(MRF_HAVE_AVX2)
    if (b == Backend::avx2) return avx2_table;
#endif
    (void)b;
    return scalar_table;
}

const KernelTable& table() { return table_for(active_backend()); }

} // namespace mrf::kernels
