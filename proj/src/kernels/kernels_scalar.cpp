#include <cmath>
#include <cstddef>

#include "mrf/kernels.hpp"

// Reference kernels. Plain loops, no pairwise tricks, so the SIMD variants can
// be checked against them with tight tolerances.

namespace mrf::kernels {
namespace {

double dot_scalar(const double* x, const double* y, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
    return acc;
}

void axpy_scalar(double a, const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void scal_scalar(double a, double* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) x[i] *= a;
}

double sum_scalar(const double* x, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += x[i];
    return acc;
}

double sumsq_scalar(const double* x, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += x[i] * x[i];
    return acc;
}

double vmax_scalar(const double* x, std::size_t n) {
    double m = x[0];
    for (std::size_t i = 1; i < n; ++i)
        if (x[i] > m) m = x[i];
    return m;
}

void ema_blend_scalar(double m, const double* p, double* s, std::size_t n) {
    const double om = 1.0 - m;
    for (std::size_t i = 0; i < n; ++i) s[i] = m * s[i] + om * p[i];
}

void adamw_step_scalar(std::size_t n, double* p, const double* g, double* m1, double* m2,
                       double lr, double beta1, double beta2, double bc1, double bc2, double eps,
                       double wd) {
    const double ob1 = 1.0 - beta1;
    const double ob2 = 1.0 - beta2;
    const double decay = 1.0 - lr * wd;
    for (std::size_t i = 0; i < n; ++i) {
        m1[i] = beta1 * m1[i] + ob1 * g[i];
        m2[i] = beta2 * m2[i] + ob2 * g[i] * g[i];
        const double mhat = m1[i] / bc1;
        const double vhat = m2[i] / bc2;
        p[i] *= decay;
        p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

} // namespace

const KernelTable scalar_table = {
    dot_scalar, axpy_scalar,      scal_scalar,       sum_scalar,
    sumsq_scalar, vmax_scalar,    ema_blend_scalar,  adamw_step_scalar,
};

} // namespace mrf::kernels
