#include <cstddef>
#include <cstring>
#include <immintrin.h>

#include "kernel_table.hpp"

// AVX2+FMA variants. Accumulation order is fixed per problem size (lane
// structure depends only on n/k), so results are deterministic run to run on
// a given backend; cross-backend agreement is tolerance-checked, not bitwise.

namespace meow::kernels {
namespace {

inline float hsum8(__m256 v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    __m128 shuf = _mm_movehdup_ps(lo);
    __m128 sums = _mm_add_ps(lo, shuf);
    shuf = _mm_movehl_ps(shuf, sums);
    sums = _mm_add_ss(sums, shuf);
    return _mm_cvtss_f32(sums);
}

inline double hsum4(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d shuf = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, shuf));
}

float dot_f(const float* a, const float* b, size_t n) {
    __m256 acc0 = _mm256_setzero_ps();
    __m256 acc1 = _mm256_setzero_ps();
    __m256 acc2 = _mm256_setzero_ps();
    __m256 acc3 = _mm256_setzero_ps();
    size_t i = 0;
    for (; i + 32 <= n; i += 32) {
        acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
        acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 8), _mm256_loadu_ps(b + i + 8), acc1);
        acc2 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 16), _mm256_loadu_ps(b + i + 16), acc2);
        acc3 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 24), _mm256_loadu_ps(b + i + 24), acc3);
    }
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
    }
    float sum = hsum8(_mm256_add_ps(_mm256_add_ps(acc0, acc1), _mm256_add_ps(acc2, acc3)));
    for (; i < n; ++i) sum += a[i] * b[i];
    return sum;
}

double dot_d(const double* a, const double* b, size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
    }
    for (; i + 4 <= n; i += 4) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    }
    double sum = hsum4(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) sum += a[i] * b[i];
    return sum;
}

float l2sq_f(const float* a, const float* b, size_t n) {
    __m256 acc0 = _mm256_setzero_ps();
    __m256 acc1 = _mm256_setzero_ps();
    size_t i = 0;
    for (; i + 16 <= n; i += 16) {
        __m256 d0 = _mm256_sub_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i));
        __m256 d1 = _mm256_sub_ps(_mm256_loadu_ps(a + i + 8), _mm256_loadu_ps(b + i + 8));
        acc0 = _mm256_fmadd_ps(d0, d0, acc0);
        acc1 = _mm256_fmadd_ps(d1, d1, acc1);
    }
    for (; i + 8 <= n; i += 8) {
        __m256 d = _mm256_sub_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i));
        acc0 = _mm256_fmadd_ps(d, d, acc0);
    }
    float sum = hsum8(_mm256_add_ps(acc0, acc1));
    for (; i < n; ++i) {
        const float d = a[i] - b[i];
        sum += d * d;
    }
    return sum;
}

double l2sq_d(const double* a, const double* b, size_t n) {
    __m256d acc = _mm256_setzero_pd();
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d d = _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i));
        acc = _mm256_fmadd_pd(d, d, acc);
    }
    double sum = hsum4(acc);
    for (; i < n; ++i) {
        const double d = a[i] - b[i];
        sum += d * d;
    }
    return sum;
}

void axpy_f(float alpha, const float* x, float* y, size_t n) {
    const __m256 av = _mm256_set1_ps(alpha);
    size_t i = 0;
    for (; i + 16 <= n; i += 16) {
        _mm256_storeu_ps(y + i, _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i),
                                                _mm256_loadu_ps(y + i)));
        _mm256_storeu_ps(y + i + 8, _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i + 8),
                                                    _mm256_loadu_ps(y + i + 8)));
    }
    for (; i + 8 <= n; i += 8) {
        _mm256_storeu_ps(y + i, _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i),
                                                _mm256_loadu_ps(y + i)));
    }
    for (; i < n; ++i) y[i] += alpha * x[i];
}

void axpy_d(double alpha, const double* x, double* y, size_t n) {
    const __m256d av = _mm256_set1_pd(alpha);
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(y + i, _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i),
                                                _mm256_loadu_pd(y + i)));
    }
    for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale_f(float alpha, float* x, size_t n) {
    const __m256 av = _mm256_set1_ps(alpha);
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        _mm256_storeu_ps(x + i, _mm256_mul_ps(av, _mm256_loadu_ps(x + i)));
    }
    for (; i < n; ++i) x[i] *= alpha;
}

void scale_d(double alpha, double* x, size_t n) {
    const __m256d av = _mm256_set1_pd(alpha);
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(x + i, _mm256_mul_pd(av, _mm256_loadu_pd(x + i)));
    }
    for (; i < n; ++i) x[i] *= alpha;
}

// Register-blocked rank-1 updates: for each row of A, a block of C columns is
// kept in registers while k streams by. Per-element accumulation order is k-
// ascending regardless of block shape, so a one-row call matches the same row
// of a batched call bit for bit.
void matmul_nn_f(const float* a, const float* b, float* c, size_t i0, size_t i1,
                 size_t k, size_t n) {
    for (size_t i = i0; i < i1; ++i) {
        const float* arow = a + i * k;
        float* crow = c + i * n;
        size_t j = 0;
        for (; j + 32 <= n; j += 32) {
            __m256 c0 = _mm256_setzero_ps();
            __m256 c1 = _mm256_setzero_ps();
            __m256 c2 = _mm256_setzero_ps();
            __m256 c3 = _mm256_setzero_ps();
            for (size_t kk = 0; kk < k; ++kk) {
                const __m256 av = _mm256_set1_ps(arow[kk]);
                const float* brow = b + kk * n + j;
                c0 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow), c0);
                c1 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + 8), c1);
                c2 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + 16), c2);
                c3 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + 24), c3);
            }
            _mm256_storeu_ps(crow + j, c0);
            _mm256_storeu_ps(crow + j + 8, c1);
            _mm256_storeu_ps(crow + j + 16, c2);
            _mm256_storeu_ps(crow + j + 24, c3);
        }
        for (; j + 8 <= n; j += 8) {
            __m256 c0 = _mm256_setzero_ps();
            for (size_t kk = 0; kk < k; ++kk) {
                c0 = _mm256_fmadd_ps(_mm256_set1_ps(arow[kk]),
                                     _mm256_loadu_ps(b + kk * n + j), c0);
            }
            _mm256_storeu_ps(crow + j, c0);
        }
        for (; j < n; ++j) {
            float acc = 0.0f;
            for (size_t kk = 0; kk < k; ++kk) acc += arow[kk] * b[kk * n + j];
            crow[j] = acc;
        }
    }
}

void matmul_nn_d(const double* a, const double* b, double* c, size_t i0, size_t i1,
                 size_t k, size_t n) {
    for (size_t i = i0; i < i1; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        size_t j = 0;
        for (; j + 8 <= n; j += 8) {
            __m256d c0 = _mm256_setzero_pd();
            __m256d c1 = _mm256_setzero_pd();
            for (size_t kk = 0; kk < k; ++kk) {
                const __m256d av = _mm256_set1_pd(arow[kk]);
                const double* brow = b + kk * n + j;
                c0 = _mm256_fmadd_pd(av, _mm256_loadu_pd(brow), c0);
                c1 = _mm256_fmadd_pd(av, _mm256_loadu_pd(brow + 4), c1);
            }
            _mm256_storeu_pd(crow + j, c0);
            _mm256_storeu_pd(crow + j + 4, c1);
        }
        for (; j < n; ++j) {
            double acc = 0.0;
            for (size_t kk = 0; kk < k; ++kk) acc += arow[kk] * b[kk * n + j];
            crow[j] = acc;
        }
    }
}

void matmul_nt_f(const float* a, const float* b, float* c, size_t i0, size_t i1,
                 size_t k, size_t n) {
    for (size_t i = i0; i < i1; ++i) {
        const float* arow = a + i * k;
        float* crow = c + i * n;
        for (size_t j = 0; j < n; ++j) crow[j] = dot_f(arow, b + j * k, k);
    }
}

void matmul_nt_d(const double* a, const double* b, double* c, size_t i0, size_t i1,
                 size_t k, size_t n) {
    for (size_t i = i0; i < i1; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (size_t j = 0; j < n; ++j) crow[j] = dot_d(arow, b + j * k, k);
    }
}

void matmul_tn_f(const float* a, const float* b, float* c, size_t i0, size_t i1,
                 size_t k, size_t n, size_t m) {
    for (size_t i = i0; i < i1; ++i) {
        float* crow = c + i * n;
        std::memset(crow, 0, n * sizeof(float));
        for (size_t r = 0; r < k; ++r) {
            axpy_f(a[r * m + i], b + r * n, crow, n);
        }
    }
}

void matmul_tn_d(const double* a, const double* b, double* c, size_t i0, size_t i1,
                 size_t k, size_t n, size_t m) {
    for (size_t i = i0; i < i1; ++i) {
        double* crow = c + i * n;
        std::memset(crow, 0, n * sizeof(double));
        for (size_t r = 0; r < k; ++r) {
            axpy_d(a[r * m + i], b + r * n, crow, n);
        }
    }
}

}  // namespace

const KernelTable& avx2_table() {
    static const KernelTable t = {
        &dot_f,       &dot_d,       &l2sq_f,      &l2sq_d,      &axpy_f,
        &axpy_d,      &scale_f,     &scale_d,     &matmul_nn_f, &matmul_nn_d,
        &matmul_nt_f, &matmul_nt_d, &matmul_tn_f, &matmul_tn_d,
    };
    return t;
}

}  // namespace meow::kernels
