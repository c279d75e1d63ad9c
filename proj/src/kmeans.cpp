#include "meow/kmeans.hpp"

#include <cmath>

#include "meow/error.hpp"
#include "meow/kernels.hpp"
#include "meow/rng.hpp"

namespace meow {

size_t nearest_centroid(const float* x, const MatF& centroids) {
    size_t best = 0;
    float best_d = kernels::l2sq(x, centroids.row(0), centroids.cols);
    for (size_t j = 1; j < centroids.rows; ++j) {
        const float d = kernels::l2sq(x, centroids.row(j), centroids.cols);
        if (d < best_d) {
            best_d = d;
            best = j;
        }
    }
    return best;
}

namespace {

void assign_all(const MatF& points, const MatF& centroids,
                std::vector<int32_t>& assignment, std::vector<float>& dist) {
    kernels::parallel_for(points.rows, [&](size_t b, size_t e) {
        for (size_t i = b; i < e; ++i) {
            const size_t j = nearest_centroid(points.row(i), centroids);
            assignment[i] = static_cast<int32_t>(j);
            dist[i] = kernels::l2sq(points.row(i), centroids.row(j), points.cols);
        }
    });
}

MatF init_plus_plus(const MatF& points, size_t k, Rng& rng) {
    const size_t n = points.rows;
    const size_t dim = points.cols;
    MatF centroids(k, dim);
    std::vector<float> d2(n);

    size_t first = static_cast<size_t>(rng.below(n));
    std::copy_n(points.row(first), dim, centroids.row(0));
    kernels::parallel_for(n, [&](size_t b, size_t e) {
        for (size_t i = b; i < e; ++i) {
            d2[i] = kernels::l2sq(points.row(i), centroids.row(0), dim);
        }
    });

    for (size_t c = 1; c < k; ++c) {
        double total = 0.0;
        for (float d : d2) total += d;
        size_t pick;
        if (total <= 0.0) {
            pick = static_cast<size_t>(rng.below(n));
        } else {
            const double r = rng.uniform() * total;
            double acc = 0.0;
            pick = n - 1;
            for (size_t i = 0; i < n; ++i) {
                acc += d2[i];
                if (acc >= r) {
                    pick = i;
                    break;
                }
            }
        }
        std::copy_n(points.row(pick), dim, centroids.row(c));
        kernels::parallel_for(n, [&](size_t b, size_t e) {
            for (size_t i = b; i < e; ++i) {
                d2[i] = std::min(d2[i],
                                 kernels::l2sq(points.row(i), centroids.row(c), dim));
            }
        });
    }
    return centroids;
}

}  // namespace

KMeansResult kmeans(const MatF& points, size_t k, uint64_t seed, size_t max_iters) {
    if (k == 0) throw DomainError("kmeans: k must be >= 1");
    if (points.rows < k) {
        throw InsufficientDataError("kmeans: need at least k points, have " +
                                    std::to_string(points.rows) + " for k=" +
                                    std::to_string(k));
    }
    const size_t n = points.rows;
    const size_t dim = points.cols;
    Rng rng(seed);

    KMeansResult res;
    res.centroids = init_plus_plus(points, k, rng);
    res.assignment.assign(n, 0);
    std::vector<float> dist(n, 0.0f);
    std::vector<int32_t> prev;

    std::vector<double> sums(k * dim);
    std::vector<size_t> counts(k);

    for (size_t iter = 0; iter < max_iters; ++iter) {
        assign_all(points, res.centroids, res.assignment, dist);
        if (res.assignment == prev) break;
        prev = res.assignment;

        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(counts.begin(), counts.end(), size_t{0});
        for (size_t i = 0; i < n; ++i) {
            const size_t c = static_cast<size_t>(res.assignment[i]);
            ++counts[c];
            const float* p = points.row(i);
            double* s = sums.data() + c * dim;
            for (size_t d = 0; d < dim; ++d) s[d] += p[d];
        }
        // Reseed empty clusters to the farthest point, lowest cluster index
        // first; each stolen point is taken out of the running.
        for (size_t c = 0; c < k; ++c) {
            if (counts[c] != 0) continue;
            size_t far = 0;
            float far_d = -1.0f;
            for (size_t i = 0; i < n; ++i) {
                if (dist[i] > far_d) {
                    far_d = dist[i];
                    far = i;
                }
            }
            std::copy_n(points.row(far), dim, res.centroids.row(c));
            dist[far] = -2.0f;
            counts[c] = 1;
            const float* p = points.row(far);
            double* s = sums.data() + c * dim;
            for (size_t d = 0; d < dim; ++d) s[d] = p[d];
            // The stolen point leaves its old cluster's mean.
            const size_t old = static_cast<size_t>(res.assignment[far]);
            if (old != c && counts[old] > 1) {
                --counts[old];
                double* so = sums.data() + old * dim;
                for (size_t d = 0; d < dim; ++d) so[d] -= p[d];
            }
            res.assignment[far] = static_cast<int32_t>(c);
        }
        for (size_t c = 0; c < k; ++c) {
            float* cr = res.centroids.row(c);
            const double* s = sums.data() + c * dim;
            const double inv = 1.0 / static_cast<double>(counts[c]);
            for (size_t d = 0; d < dim; ++d) cr[d] = static_cast<float>(s[d] * inv);
        }
    }

    assign_all(points, res.centroids, res.assignment, dist);
    res.inertia = 0.0;
    for (float d : dist) res.inertia += d;
    return res;
}

}  // namespace meow
