#pragma once

#include <cstddef>

namespace meow::kernels {

// One slot per dispatched kernel. Each backend fills a static instance.
// matmul entries compute rows [i0, i1) of C so the dispatcher can partition
// work across the pool; tn additionally needs m, the row stride of A.
struct KernelTable {
    float (*dot_f)(const float*, const float*, size_t);
    double (*dot_d)(const double*, const double*, size_t);
    float (*l2sq_f)(const float*, const float*, size_t);
    double (*l2sq_d)(const double*, const double*, size_t);
    void (*axpy_f)(float, const float*, float*, size_t);
    void (*axpy_d)(double, const double*, double*, size_t);
    void (*scale_f)(float, float*, size_t);
    void (*scale_d)(double, double*, size_t);
    void (*matmul_nn_f)(const float*, const float*, float*, size_t i0, size_t i1,
                        size_t k, size_t n);
    void (*matmul_nn_d)(const double*, const double*, double*, size_t i0, size_t i1,
                        size_t k, size_t n);
    void (*matmul_nt_f)(const float*, const float*, float*, size_t i0, size_t i1,
                        size_t k, size_t n);
    void (*matmul_nt_d)(const double*, const double*, double*, size_t i0, size_t i1,
                        size_t k, size_t n);
    void (*matmul_tn_f)(const float*, const float*, float*, size_t i0, size_t i1,
                        size_t k, size_t n, size_t m);
    void (*matmul_tn_d)(const double*, const double*, double*, size_t i0, size_t i1,
                        size_t k, size_t n, size_t m);
};

const KernelTable& scalar_table();
const KernelTable& avx2_table();  // only valid if cpu_has_avx2()
bool cpu_has_avx2();

}  // namespace meow::kernels
