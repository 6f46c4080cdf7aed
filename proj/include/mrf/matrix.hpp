#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

#include "mrf/error.hpp"

namespace mrf {

// Dense row-major matrix of doubles. The universal currency between modules.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    static Matrix of(std::initializer_list<std::initializer_list<double>> init) {
        Matrix m;
        m.rows = init.size();
        m.cols = m.rows ? init.begin()->size() : 0;
        m.data.reserve(m.rows * m.cols);
        for (const auto& row : init) {
            if (row.size() != m.cols)
                raise(Err::DimMismatch, "ragged initializer");
            m.data.insert(m.data.end(), row.begin(), row.end());
        }
        return m;
    }

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    double* row(std::size_t i) { return data.data() + i * cols; }
    const double* row(std::size_t i) const { return data.data() + i * cols; }

    std::span<double> row_span(std::size_t i) { return {row(i), cols}; }
    std::span<const double> row_span(std::size_t i) const { return {row(i), cols}; }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }
};

} // namespace mrf
