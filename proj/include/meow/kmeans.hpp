#pragma once

#include <cstdint>
#include <vector>

#include "meow/mat.hpp"

namespace meow {

struct KMeansResult {
    MatF centroids;                   // [k x dim]
    std::vector<int32_t> assignment;  // per point, lowest-index tie-break
    double inertia = 0.0;             // sum of squared distances
};

// Lloyd's algorithm with k-means++ initialization. Empty clusters are
// reseeded to the point farthest from its assigned centroid. Deterministic
// given the seed; distance scans may run on the worker pool.
KMeansResult kmeans(const MatF& points, size_t k, uint64_t seed,
                    size_t max_iters = 25);

// Index of the nearest centroid by squared Euclidean distance; ties break to
// the lowest index.
size_t nearest_centroid(const float* x, const MatF& centroids);

}  // namespace meow
