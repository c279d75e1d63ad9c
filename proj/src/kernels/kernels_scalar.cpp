#include <cstddef>
#include <cstring>

#include "kernel_table.hpp"

// Reference kernels. Plain sequential loops, accumulation strictly in index
// order; the SIMD backends must stay numerically close to these and the
// equivalence suite checks that they do.

namespace meow::kernels {
namespace {

template <typename Real>
Real dot_impl(const Real* a, const Real* b, size_t n) {
    Real acc = Real(0);
    for (size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

template <typename Real>
Real l2sq_impl(const Real* a, const Real* b, size_t n) {
    Real acc = Real(0);
    for (size_t i = 0; i < n; ++i) {
        const Real d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

template <typename Real>
void axpy_impl(Real alpha, const Real* x, Real* y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename Real>
void scale_impl(Real alpha, Real* x, size_t n) {
    for (size_t i = 0; i < n; ++i) x[i] *= alpha;
}

template <typename Real>
void matmul_nn_rows(const Real* a, const Real* b, Real* c, size_t i0, size_t i1,
                    size_t k, size_t n) {
    for (size_t i = i0; i < i1; ++i) {
        Real* crow = c + i * n;
        std::memset(crow, 0, n * sizeof(Real));
        const Real* arow = a + i * k;
        for (size_t kk = 0; kk < k; ++kk) {
            axpy_impl(arow[kk], b + kk * n, crow, n);
        }
    }
}

template <typename Real>
void matmul_nt_rows(const Real* a, const Real* b, Real* c, size_t i0, size_t i1,
                    size_t k, size_t n) {
    for (size_t i = i0; i < i1; ++i) {
        const Real* arow = a + i * k;
        Real* crow = c + i * n;
        for (size_t j = 0; j < n; ++j) crow[j] = dot_impl(arow, b + j * k, k);
    }
}

template <typename Real>
void matmul_tn_rows(const Real* a, const Real* b, Real* c, size_t i0, size_t i1,
                    size_t k, size_t n, size_t m) {
    for (size_t i = i0; i < i1; ++i) {
        Real* crow = c + i * n;
        std::memset(crow, 0, n * sizeof(Real));
        for (size_t r = 0; r < k; ++r) {
            axpy_impl(a[r * m + i], b + r * n, crow, n);
        }
    }
}

}  // namespace

const KernelTable& scalar_table() {
    static const KernelTable t = {
        &dot_impl<float>,
        &dot_impl<double>,
        &l2sq_impl<float>,
        &l2sq_impl<double>,
        &axpy_impl<float>,
        &axpy_impl<double>,
        &scale_impl<float>,
        &scale_impl<double>,
        &matmul_nn_rows<float>,
        &matmul_nn_rows<double>,
        &matmul_nt_rows<float>,
        &matmul_nt_rows<double>,
        &matmul_tn_rows<float>,
        &matmul_tn_rows<double>,
    };
    return t;
}

}  // namespace meow::kernels
