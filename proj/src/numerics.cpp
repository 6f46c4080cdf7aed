#include <algorithm>
#include <cstdlib>
#include <thread>

#include "mrf/kernels.hpp"
#include "mrf/numerics.hpp"

namespace mrf {

Matrix l2_normalize_rows(const Matrix& m) {
    Matrix out = m;
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double norm = std::sqrt(kernels::sumsq(m.row(i), m.cols));
        if (norm < 1e-12)
            raise(Err::ZeroRow, "row " + std::to_string(i) + " has norm " + std::to_string(norm));
        kernels::scal(1.0 / norm, out.row(i), m.cols);
    }
    return out;
}

Matrix l2_normalize_rows_backward(const Matrix& raw, const Matrix& grad_normalized) {
    if (!raw.same_shape(grad_normalized))
        raise(Err::DimMismatch, "raw and gradient shapes differ");
    Matrix grad(raw.rows, raw.cols);
    for (std::size_t i = 0; i < raw.rows; ++i) {
        const double norm = std::sqrt(kernels::sumsq(raw.row(i), raw.cols));
        if (norm < 1e-12) raise(Err::ZeroRow, "row " + std::to_string(i));
        const double inv = 1.0 / norm;
        // y = x/|x|;  dx = (g - (g.y) y) / |x|
        const double gy = kernels::dot(grad_normalized.row(i), raw.row(i), raw.cols) * inv;
        for (std::size_t j = 0; j < raw.cols; ++j) {
            const double y = raw(i, j) * inv;
            grad(i, j) = (grad_normalized(i, j) - gy * y) * inv;
        }
    }
    return grad;
}

Matrix cosine_similarity(const Matrix& a, const Matrix& b) {
    if (a.cols != b.cols)
        raise(Err::DimMismatch, "feature dims differ: " + std::to_string(a.cols) + " vs " +
                                    std::to_string(b.cols));
    Matrix sims(a.rows, b.rows);
    parallel_for(a.rows, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i)
            for (std::size_t j = 0; j < b.rows; ++j)
                sims(i, j) = kernels::dot(a.row(i), b.row(j), a.cols);
    });
    return sims;
}

double log_sum_exp(std::span<const double> v) {
    if (v.empty()) raise(Err::EmptyInput, "log_sum_exp of empty vector");
    const double m = kernels::vmax(v.data(), v.size());
    double acc = 0.0;
    for (double x : v) acc += std::exp(x - m);
    return m + std::log(acc);
}

std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> x, double eps) {
    std::vector<double> point(x.begin(), x.end());
    std::vector<double> grad(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = point[i];
        point[i] = orig + eps;
        const double fp = f(point);
        point[i] = orig - eps;
        const double fm = f(point);
        point[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            raise(Err::NonFinite, "evaluation at coordinate " + std::to_string(i));
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    return grad;
}

void matmul_nn(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate) {
    if (a.cols != b.rows) raise(Err::DimMismatch, "matmul_nn inner dims");
    if (c.rows != a.rows || c.cols != b.cols) c = Matrix(a.rows, b.cols);
    else if (!accumulate) c.fill(0.0);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t k = 0; k < a.cols; ++k)
            kernels::axpy(a(i, k), b.row(k), c.row(i), b.cols);
}

void matmul_nt(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate) {
    if (a.cols != b.cols) raise(Err::DimMismatch, "matmul_nt inner dims");
    if (c.rows != a.rows || c.cols != b.rows) {
        c = Matrix(a.rows, b.rows);
        accumulate = false;
    }
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < b.rows; ++j) {
            const double d = kernels::dot(a.row(i), b.row(j), a.cols);
            c(i, j) = accumulate ? c(i, j) + d : d;
        }
}

void matmul_tn(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate) {
    if (a.rows != b.rows) raise(Err::DimMismatch, "matmul_tn inner dims");
    if (c.rows != a.cols || c.cols != b.cols) c = Matrix(a.cols, b.cols);
    else if (!accumulate) c.fill(0.0);
    for (std::size_t m = 0; m < a.rows; ++m)
        for (std::size_t k = 0; k < a.cols; ++k)
            kernels::axpy(a(m, k), b.row(m), c.row(k), b.cols);
}

bool all_finite(std::span<const double> v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

std::size_t worker_count() {
    static const std::size_t n = [] {
        if (const char* env = std::getenv("MRF_THREADS")) {
            const long v = std::strtol(env, nullptr, 10);
            if (v >= 1) return static_cast<std::size_t>(v);
        }
        const unsigned hw = std::thread::hardware_concurrency();
        return static_cast<std::size_t>(hw ? hw : 1);
    }();
    return n;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body) {
    const std::size_t workers = std::min(worker_count(), n);
    if (workers <= 1 || n < 256) {
        body(0, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    const std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t lo = w * chunk;
        const std::size_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&body, lo, hi] { body(lo, hi); });
    }
    for (auto& t : pool) t.join();
}

} // namespace mrf
