#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "meow/kernels.hpp"
#include "meow/rng.hpp"

using namespace meow;
namespace k = meow::kernels;

namespace {

std::vector<float> random_vec(size_t n, Rng& rng) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    return v;
}

std::vector<double> random_vec_d(size_t n, Rng& rng) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal();
    return v;
}

bool close_rel(double a, double b, double tol) {
    return std::abs(a - b) <= tol * std::max({1.0, std::abs(a), std::abs(b)});
}

struct BackendGuard {
    k::Backend saved = k::active_backend();
    ~BackendGuard() { k::set_backend(saved); }
};

}  // namespace

TEST_CASE("backend dispatch is consistent with cpu support") {
    CHECK(k::cpu_supports(k::Backend::scalar));
    const k::Backend active = k::active_backend();
    CHECK(k::cpu_supports(active));
    BackendGuard guard;
    k::set_backend(k::Backend::scalar);
    CHECK(k::active_backend() == k::Backend::scalar);
}

TEST_CASE("scalar dot/l2sq/axpy basics") {
    BackendGuard guard;
    k::set_backend(k::Backend::scalar);
    const float a[] = {1.0f, 2.0f, 3.0f};
    const float b[] = {4.0f, -5.0f, 6.0f};
    CHECK(k::dot(a, b, 3) == doctest::Approx(12.0f));
    CHECK(k::l2sq(a, b, 3) == doctest::Approx(9.0f + 49.0f + 9.0f));
    float y[] = {1.0f, 1.0f, 1.0f};
    k::axpy(2.0f, a, y, 3);
    CHECK(y[0] == 3.0f);
    CHECK(y[2] == 7.0f);
}

TEST_CASE("avx2 kernels match scalar within tolerance") {
    if (!k::cpu_supports(k::Backend::avx2)) {
        MESSAGE("AVX2 unavailable; skipping equivalence checks");
        return;
    }
    BackendGuard guard;
    Rng rng(7);
    // Sizes cover unrolled bodies and ragged tails.
    for (const size_t n : {1UL, 3UL, 7UL, 8UL, 17UL, 31UL, 32UL, 33UL, 100UL, 257UL}) {
        const auto a = random_vec(n, rng);
        const auto b = random_vec(n, rng);
        k::set_backend(k::Backend::scalar);
        const float d_s = k::dot(a.data(), b.data(), n);
        const float l_s = k::l2sq(a.data(), b.data(), n);
        auto y_s = random_vec(n, rng);
        auto y_v = y_s;
        k::axpy(0.37f, a.data(), y_s.data(), n);

        k::set_backend(k::Backend::avx2);
        const float d_v = k::dot(a.data(), b.data(), n);
        const float l_v = k::l2sq(a.data(), b.data(), n);
        k::axpy(0.37f, a.data(), y_v.data(), n);

        CHECK(close_rel(d_s, d_v, 1e-5));
        CHECK(close_rel(l_s, l_v, 1e-5));
        for (size_t i = 0; i < n; ++i) CHECK(close_rel(y_s[i], y_v[i], 1e-6));

        const auto ad = random_vec_d(n, rng);
        const auto bd = random_vec_d(n, rng);
        k::set_backend(k::Backend::scalar);
        const double dd_s = k::dot(ad.data(), bd.data(), n);
        k::set_backend(k::Backend::avx2);
        const double dd_v = k::dot(ad.data(), bd.data(), n);
        CHECK(close_rel(dd_s, dd_v, 1e-13));
    }
}

TEST_CASE("matmul variants match a naive triple loop on both backends") {
    Rng rng(11);
    const size_t m = 9, kk = 37, n = 21;
    const auto a = random_vec(m * kk, rng);
    const auto b = random_vec(kk * n, rng);
    const auto bt = random_vec(n * kk, rng);  // for nt
    const auto at = random_vec(kk * m, rng);  // for tn

    std::vector<float> naive_nn(m * n, 0.0f), naive_nt(m * n, 0.0f), naive_tn(m * n, 0.0f);
    for (size_t i = 0; i < m; ++i) {
        for (size_t j = 0; j < n; ++j) {
            double s1 = 0, s2 = 0, s3 = 0;
            for (size_t r = 0; r < kk; ++r) {
                s1 += double(a[i * kk + r]) * b[r * n + j];
                s2 += double(a[i * kk + r]) * bt[j * kk + r];
                s3 += double(at[r * m + i]) * b[r * n + j];
            }
            naive_nn[i * n + j] = static_cast<float>(s1);
            naive_nt[i * n + j] = static_cast<float>(s2);
            naive_tn[i * n + j] = static_cast<float>(s3);
        }
    }

    BackendGuard guard;
    for (const auto backend : {k::Backend::scalar, k::Backend::avx2}) {
        if (!k::cpu_supports(backend)) continue;
        k::set_backend(backend);
        std::vector<float> c(m * n);
        k::matmul_nn(a.data(), b.data(), c.data(), m, kk, n);
        for (size_t i = 0; i < m * n; ++i) CHECK(close_rel(c[i], naive_nn[i], 1e-5));
        k::matmul_nt(a.data(), bt.data(), c.data(), m, kk, n);
        for (size_t i = 0; i < m * n; ++i) CHECK(close_rel(c[i], naive_nt[i], 1e-5));
        k::matmul_tn(at.data(), b.data(), c.data(), m, kk, n);
        for (size_t i = 0; i < m * n; ++i) CHECK(close_rel(c[i], naive_tn[i], 1e-5));
    }
}

TEST_CASE("matmul rows are pure row functions: batched == one-row calls bitwise") {
    Rng rng(23);
    const size_t m = 13, kk = 29, n = 31;
    const auto a = random_vec(m * kk, rng);
    const auto b = random_vec(kk * n, rng);

    BackendGuard guard;
    for (const auto backend : {k::Backend::scalar, k::Backend::avx2}) {
        if (!k::cpu_supports(backend)) continue;
        k::set_backend(backend);
        std::vector<float> batched(m * n), single(n);
        k::matmul_nn(a.data(), b.data(), batched.data(), m, kk, n);
        for (size_t i = 0; i < m; ++i) {
            k::matmul_nn(a.data() + i * kk, b.data(), single.data(), 1, kk, n);
            for (size_t j = 0; j < n; ++j) {
                CHECK(batched[i * n + j] == single[j]);  // bitwise
            }
        }
        const auto bt = random_vec(n * kk, rng);
        k::matmul_nt(a.data(), bt.data(), batched.data(), m, kk, n);
        for (size_t i = 0; i < m; ++i) {
            k::matmul_nt(a.data() + i * kk, bt.data(), single.data(), 1, kk, n);
            for (size_t j = 0; j < n; ++j) {
                CHECK(batched[i * n + j] == single[j]);
            }
        }
    }
}

TEST_CASE("results do not depend on worker count") {
    Rng rng(31);
    const size_t m = 64, kk = 48, n = 40;
    const auto a = random_vec(m * kk, rng);
    const auto b = random_vec(kk * n, rng);
    const size_t saved = k::thread_count();
    std::vector<float> c1(m * n), c2(m * n);
    k::set_thread_count(1);
    k::matmul_nn(a.data(), b.data(), c1.data(), m, kk, n);
    k::set_thread_count(4);
    k::matmul_nn(a.data(), b.data(), c2.data(), m, kk, n);
    k::set_thread_count(saved);
    CHECK(c1 == c2);  // bitwise
}

TEST_CASE("parallel_for covers the range exactly once") {
    std::vector<int> hits(1000, 0);
    k::parallel_for(hits.size(), [&](size_t b, size_t e) {
        for (size_t i = b; i < e; ++i) ++hits[i];
    });
    for (int h : hits) CHECK(h == 1);
}
