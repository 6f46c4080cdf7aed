#pragma once

#include <cstddef>

namespace mrf::kernels {

// Runtime-dispatched inner loops. Every kernel has a scalar reference
// implementation and an AVX2+FMA variant; the dispatch table is filled once at
// startup from CPUID, overridable via the MRF_KERNELS env var ("scalar",
// "avx2") or set_backend(). A given process sticks to one backend, so results
// are reproducible run to run on the same machine.

enum class Backend { scalar, avx2 };

Backend active_backend();
bool backend_supported(Backend b);
void set_backend(Backend b); // throws Error(ConfigError) if unsupported
const char* backend_name(Backend b);

struct KernelTable {
    double (*dot)(const double* x, const double* y, std::size_t n);
    void (*axpy)(double a, const double* x, double* y, std::size_t n);
    void (*scal)(double a, double* x, std::size_t n);
    double (*sum)(const double* x, std::size_t n);
    double (*sumsq)(const double* x, std::size_t n);
    double (*vmax)(const double* x, std::size_t n);
    // s = m*s + (1-m)*p
    void (*ema_blend)(double m, const double* p, double* s, std::size_t n);
    // decoupled-weight-decay adaptive-moment step; bc1/bc2 are the bias
    // corrections 1-beta^t
    void (*adamw_step)(std::size_t n, double* p, const double* g, double* m1, double* m2,
                       double lr, double beta1, double beta2, double bc1, double bc2,
                       double eps, double wd);
};

const KernelTable& table();
const KernelTable& table_for(Backend b); // direct access, used by equivalence tests

inline double dot(const double* x, const double* y, std::size_t n) { return table().dot(x, y, n); }
inline void axpy(double a, const double* x, double* y, std::size_t n) { table().axpy(a, x, y, n); }
inline void scal(double a, double* x, std::size_t n) { table().scal(a, x, n); }
inline double sum(const double* x, std::size_t n) { return table().sum(x, n); }
inline double sumsq(const double* x, std::size_t n) { return table().sumsq(x, n); }
inline double vmax(const double* x, std::size_t n) { return table().vmax(x, n); }
inline void ema_blend(double m, const double* p, double* s, std::size_t n) {
    table().ema_blend(m, p, s, n);
}
inline void adamw_step(std::size_t n, double* p, const double* g, double* m1, double* m2,
                       double lr, double beta1, double beta2, double bc1, double bc2, double eps,
                       double wd) {
    table().adamw_step(n, p, g, m1, m2, lr, beta1, beta2, bc1, bc2, eps, wd);
}

extern const KernelTable scalar_table;
#if defined(MRF_HAVE_AVX2)
extern const KernelTable avx2_table;
#endif

} // namespace mrf::kernels
