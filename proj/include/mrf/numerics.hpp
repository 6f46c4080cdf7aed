#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "mrf/error.hpp"
#include "mrf/matrix.hpp"

namespace mrf {

// ---- normalization ----

// Scales every row to unit Euclidean norm. Throws ZeroRow if a row norm is
// below 1e-12.
Matrix l2_normalize_rows(const Matrix& m);

// Gradient of y = x/||x|| applied row-wise: given the raw input and the
// upstream gradient w.r.t. y, returns the gradient w.r.t. x.
Matrix l2_normalize_rows_backward(const Matrix& raw, const Matrix& grad_normalized);

// ---- similarity ----

// (i,j) = dot(a_i, b_j). Inputs are expected row-normalized; only the shared
// dimension is checked.
Matrix cosine_similarity(const Matrix& a, const Matrix& b);

// ---- stable reductions ----

double log_sum_exp(std::span<const double> v);

// ---- gradient oracle ----

// Central differences, one evaluation pair per coordinate. The function is
// handed a mutable copy of x. Throws NonFinite if any evaluation is not finite.
std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> x, double eps = 1e-5);

// ---- activations ----

inline double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440));
}

inline double gelu_grad(double x) {
    const double phi = std::exp(-0.5 * x * x) * 0.39894228040143267794; // N(0,1) pdf
    return 0.5 * (1.0 + std::erf(x * 0.70710678118654752440)) + x * phi;
}

// ---- dense products (row-major, built on the kernel layer) ----

// C (m x n) = A (m x k) * B (k x n); accumulate adds into C instead of overwriting
void matmul_nn(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate = false);
// C (m x n) = A (m x k) * B^T (n x k)
void matmul_nt(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate = false);
// C (k x n) = A^T (m x k) * B (m x n)
void matmul_tn(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate = false);

// ---- misc helpers ----

bool all_finite(std::span<const double> v);

// chunked index loop; worker count capped by MRF_THREADS (serial when 1)
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body);
std::size_t worker_count();

} // namespace mrf
