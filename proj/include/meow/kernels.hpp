#pragma once

#include <cstddef>
#include <functional>

namespace meow::kernels {

// Scalar kernels are the reference semantics; the AVX2 variants are selected
// at runtime when the CPU supports them and are held to the scalar results by
// the equivalence tests in tests/test_kernels.cpp.
//
// Row contract: every matmul computes each output row as a pure function of
// the corresponding input row(s), with a fixed accumulation order that does
// not depend on how many rows the call covers. Incremental decoding relies on
// matmul(m=1) being bitwise identical to the same row of a batched call.
enum class Backend {
    scalar,
    avx2,
};

const char* backend_name(Backend b);
bool cpu_supports(Backend b);
Backend active_backend();
void set_backend(Backend b);  // throws ConfigError if unsupported on this CPU

// ---- vector kernels ----
float dot(const float* a, const float* b, size_t n);
double dot(const double* a, const double* b, size_t n);

// squared Euclidean distance
float l2sq(const float* a, const float* b, size_t n);
double l2sq(const double* a, const double* b, size_t n);

// y += alpha * x
void axpy(float alpha, const float* x, float* y, size_t n);
void axpy(double alpha, const double* x, double* y, size_t n);

// x *= alpha
void scale(float alpha, float* x, size_t n);
void scale(double alpha, double* x, size_t n);

// ---- matrix kernels (row-major) ----
// C[m x n] = A[m x k] * B[k x n]
void matmul_nn(const float* a, const float* b, float* c, size_t m, size_t k, size_t n);
void matmul_nn(const double* a, const double* b, double* c, size_t m, size_t k, size_t n);

// C[m x n] = A[m x k] * B^T, B stored [n x k]
void matmul_nt(const float* a, const float* b, float* c, size_t m, size_t k, size_t n);
void matmul_nt(const double* a, const double* b, double* c, size_t m, size_t k, size_t n);

// C[m x n] = A^T * B, A stored [k x m], B stored [k x n]
void matmul_tn(const float* a, const float* b, float* c, size_t m, size_t k, size_t n);
void matmul_tn(const double* a, const double* b, double* c, size_t m, size_t k, size_t n);

// ---- worker pool ----
// Splits [0, n) into contiguous chunks. Chunk boundaries depend only on n and
// the configured thread count, and every chunk writes disjoint state, so
// results are identical for any worker count.
void parallel_for(size_t n, const std::function<void(size_t begin, size_t end)>& fn);
size_t thread_count();
void set_thread_count(size_t n);

}  // namespace meow::kernels
