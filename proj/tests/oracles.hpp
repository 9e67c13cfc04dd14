// SPDX-License-Identifier: Apache-2.0
//
// Test-only reference implementations. These stay independent of the
// library paths they verify: the nearest scan is a plain double loop, the
// clustering oracle is textbook Lloyd iteration with restarts, and the
// chi-squared bound is a frozen critical value.

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "diveq/rng.hpp"
#include "diveq/tensor.hpp"

namespace oracles {

// Exhaustive nearest-row scan, written independently of diveq::nearest.
inline std::vector<std::size_t> brute_nearest(const diveq::Tensor& points,
                                              const diveq::Tensor& rows) {
    std::vector<std::size_t> out(points.rows());
    for (std::size_t i = 0; i < points.rows(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t best_j = 0;
        for (std::size_t j = 0; j < rows.rows(); ++j) {
            double sq = 0.0;
            for (std::size_t c = 0; c < points.cols(); ++c) {
                const double d = points.at(i, c) - rows.at(j, c);
                sq += d * d;
            }
            if (sq < best) {
                best = sq;
                best_j = j;
            }
        }
        out[i] = best_j;
    }
    return out;
}

// Mean squared distance of every point to its nearest centroid.
inline double scan_distortion(const diveq::Tensor& points, const diveq::Tensor& centroids) {
    double acc = 0.0;
    for (std::size_t i = 0; i < points.rows(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < centroids.rows(); ++j) {
            double sq = 0.0;
            for (std::size_t c = 0; c < points.cols(); ++c) {
                const double d = points.at(i, c) - centroids.at(j, c);
                sq += d * d;
            }
            best = std::min(best, sq);
        }
        acc += best;
    }
    return acc / static_cast<double>(points.rows());
}

struct LloydResult {
    diveq::Tensor centroids;
    double distortion = std::numeric_limits<double>::infinity();
};

// Lloyd iteration to convergence from a random-subset init; best of
// `restarts` attempts.
inline LloydResult lloyd_kmeans(const diveq::Tensor& points, std::size_t k,
                                std::size_t restarts, std::uint64_t seed) {
    const std::size_t n = points.rows(), d = points.cols();
    diveq::Rng rng(seed);
    LloydResult best;
    for (std::size_t attempt = 0; attempt < restarts; ++attempt) {
        // Distinct random rows as the initial centroids.
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + rng.integer(n - i);
            std::swap(order[i], order[j]);
        }
        diveq::Tensor centroids({k, d});
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t c = 0; c < d; ++c) centroids.at(i, c) = points.at(order[i], c);

        double prev = std::numeric_limits<double>::infinity();
        for (int iter = 0; iter < 500; ++iter) {
            const std::vector<std::size_t> assign = brute_nearest(points, centroids);
            diveq::Tensor sums({k, d});
            std::vector<std::size_t> counts(k, 0);
            for (std::size_t i = 0; i < n; ++i) {
                ++counts[assign[i]];
                for (std::size_t c = 0; c < d; ++c)
                    sums.at(assign[i], c) += points.at(i, c);
            }
            for (std::size_t j = 0; j < k; ++j) {
                if (counts[j] == 0) {
                    // Re-seed an empty centroid from a random point.
                    const std::size_t pick = rng.integer(n);
                    for (std::size_t c = 0; c < d; ++c) centroids.at(j, c) = points.at(pick, c);
                    continue;
                }
                for (std::size_t c = 0; c < d; ++c)
                    centroids.at(j, c) = sums.at(j, c) / static_cast<double>(counts[j]);
            }
            const double current = scan_distortion(points, centroids);
            if (std::abs(prev - current) < 1e-12) break;
            prev = current;
        }
        const double final_distortion = scan_distortion(points, centroids);
        if (final_distortion < best.distortion) {
            best.distortion = final_distortion;
            best.centroids = centroids;
        }
    }
    return best;
}

// Upper critical values of the chi-squared distribution at significance
// 0.01 (so observed < value means p > 0.01), indexed by degrees of freedom.
inline double chi2_critical_p01(std::size_t dof) {
    static const double table[] = {0.0,    6.635,  9.210,  11.345, 13.277, 15.086,
                                   16.812, 18.475, 20.090, 21.666, 23.209};
    return table[dof];
}

inline diveq::Tensor random_tensor(std::vector<std::size_t> shape, diveq::Rng& rng,
                                   double lo = -2.0, double hi = 2.0) {
    diveq::Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

}  // namespace oracles
