#if defined(MRF_HAVE_AVX2)

#include <cmath>
#include <cstddef>
#include <immintrin.h>

#include "mrf/kernels.hpp"

// AVX2+FMA variants, 4 doubles per lane. Accumulator layout and combine order
// are fixed, so results are deterministic for a given backend.

namespace mrf::kernels {
namespace {

inline double hsum(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d sh = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

double dot_avx2(const double* x, const double* y, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), acc1);
    }
    for (; i + 4 <= n; i += 4)
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
    double acc = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) acc += x[i] * y[i];
    return acc;
}

void axpy_avx2(double a, const double* x, double* y, std::size_t n) {
    const __m256d va = _mm256_set1_pd(a);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d vy = _mm256_loadu_pd(y + i);
        vy = _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), vy);
        _mm256_storeu_pd(y + i, vy);
    }
    for (; i < n; ++i) y[i] += a * x[i];
}

void scal_avx2(double a, double* x, std::size_t n) {
    const __m256d va = _mm256_set1_pd(a);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(x + i, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
    for (; i < n; ++i) x[i] *= a;
}

double sum_avx2(const double* x, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(x + i));
    double acc = hsum(acc0);
    for (; i < n; ++i) acc += x[i];
    return acc;
}

double sumsq_avx2(const double* x, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d v = _mm256_loadu_pd(x + i);
        acc0 = _mm256_fmadd_pd(v, v, acc0);
    }
    double acc = hsum(acc0);
    for (; i < n; ++i) acc += x[i] * x[i];
    return acc;
}

double vmax_avx2(const double* x, std::size_t n) {
    std::size_t i = 0;
    double m;
    if (n >= 4) {
        __m256d vm = _mm256_loadu_pd(x);
        for (i = 4; i + 4 <= n; i += 4) vm = _mm256_max_pd(vm, _mm256_loadu_pd(x + i));
        __m128d lo = _mm256_castpd256_pd128(vm);
        __m128d hi = _mm256_extractf128_pd(vm, 1);
        lo = _mm_max_pd(lo, hi);
        __m128d sh = _mm_unpackhi_pd(lo, lo);
        m = _mm_cvtsd_f64(_mm_max_sd(lo, sh));
    } else {
        m = x[0];
        i = 1;
    }
    for (; i < n; ++i)
        if (x[i] > m) m = x[i];
    return m;
}

void ema_blend_avx2(double m, const double* p, double* s, std::size_t n) {
    const __m256d vm = _mm256_set1_pd(m);
    const __m256d vom = _mm256_set1_pd(1.0 - m);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d vs = _mm256_mul_pd(vm, _mm256_loadu_pd(s + i));
        _mm256_storeu_pd(s + i, _mm256_fmadd_pd(vom, _mm256_loadu_pd(p + i), vs));
    }
    const double om = 1.0 - m;
    for (; i < n; ++i) s[i] = m * s[i] + om * p[i];
}

void adamw_step_avx2(std::size_t n, double* p, const double* g, double* m1, double* m2,
                     double lr, double beta1, double beta2, double bc1, double bc2, double eps,
                     double wd) {
    const __m256d vb1 = _mm256_set1_pd(beta1);
    const __m256d vb2 = _mm256_set1_pd(beta2);
    const __m256d vob1 = _mm256_set1_pd(1.0 - beta1);
    const __m256d vob2 = _mm256_set1_pd(1.0 - beta2);
    const __m256d vibc1 = _mm256_set1_pd(1.0 / bc1);
    const __m256d vibc2 = _mm256_set1_pd(1.0 / bc2);
    const __m256d veps = _mm256_set1_pd(eps);
    const __m256d vlr = _mm256_set1_pd(lr);
    const __m256d vdecay = _mm256_set1_pd(1.0 - lr * wd);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d vg = _mm256_loadu_pd(g + i);
        __m256d vm1 = _mm256_fmadd_pd(vob1, vg, _mm256_mul_pd(vb1, _mm256_loadu_pd(m1 + i)));
        __m256d vm2 = _mm256_fmadd_pd(vob2, _mm256_mul_pd(vg, vg),
                                      _mm256_mul_pd(vb2, _mm256_loadu_pd(m2 + i)));
        _mm256_storeu_pd(m1 + i, vm1);
        _mm256_storeu_pd(m2 + i, vm2);
        const __m256d mhat = _mm256_mul_pd(vm1, vibc1);
        const __m256d vhat = _mm256_mul_pd(vm2, vibc2);
        const __m256d denom = _mm256_add_pd(_mm256_sqrt_pd(vhat), veps);
        __m256d vp = _mm256_mul_pd(_mm256_loadu_pd(p + i), vdecay);
        vp = _mm256_sub_pd(vp, _mm256_div_pd(_mm256_mul_pd(vlr, mhat), denom));
        _mm256_storeu_pd(p + i, vp);
    }
    const double ob1 = 1.0 - beta1;
    const double ob2 = 1.0 - beta2;
    for (; i < n; ++i) {
        m1[i] = beta1 * m1[i] + ob1 * g[i];
        m2[i] = beta2 * m2[i] + ob2 * g[i] * g[i];
        const double mhat = m1[i] / bc1;
        const double vhat = m2[i] / bc2;
        p[i] *= 1.0 - lr * wd;
        p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

} // namespace

const KernelTable avx2_table = {
    dot_avx2, axpy_avx2,  scal_avx2,      sum_avx2,
    sumsq_avx2, vmax_avx2, ema_blend_avx2, adamw_step_avx2,
};

} // namespace mrf::kernels

#endif // MRF_HAVE_AVX2
