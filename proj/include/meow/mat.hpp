#pragma once

#include <cstddef>
#include <vector>

#include "meow/error.hpp"
#include "meow/rng.hpp"

namespace meow {

// Dense row-major matrix. 1-D parameters (biases, norm gains) are stored as
// a single row.
template <typename Real>
struct Mat {
    size_t rows = 0;
    size_t cols = 0;
    std::vector<Real> v;

    Mat() = default;
    Mat(size_t r, size_t c) : rows(r), cols(c), v(r * c, Real(0)) {}

    Real* row(size_t i) { return v.data() + i * cols; }
    const Real* row(size_t i) const { return v.data() + i * cols; }

    Real& at(size_t i, size_t j) { return v[i * cols + j]; }
    Real at(size_t i, size_t j) const { return v[i * cols + j]; }

    size_t size() const { return v.size(); }
    bool empty() const { return v.empty(); }

    void fill(Real x) { std::fill(v.begin(), v.end(), x); }

    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

template <typename Real>
Mat<Real> randn_mat(size_t rows, size_t cols, Rng& rng, double stddev = 1.0) {
    Mat<Real> m(rows, cols);
    for (auto& x : m.v) x = static_cast<Real>(rng.normal() * stddev);
    return m;
}

using MatF = Mat<float>;
using MatD = Mat<double>;

}  // namespace meow
