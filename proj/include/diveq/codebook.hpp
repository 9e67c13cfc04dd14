// SPDX-License-Identifier: Apache-2.0
//
// Codebook storage, exhaustive nearest-codeword search, usage statistics,
// dithered (segment-interpolated) codebooks, and checkpoint I/O.
//
// nearest / usage_stats / dither are read-only and safe to call
// concurrently. Anything that mutates a codebook (training updates,
// replacement, usage recording) follows a single-writer contract.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diveq/rng.hpp"
#include "diveq/tensor.hpp"

namespace diveq {

struct Codebook {
    Tensor vectors;                           // K x D, trainable
    Tensor ema_g;                             // K x D moving-average numerators
    std::vector<double> ema_h;                // length-K moving-average counts
    std::vector<std::uint64_t> usage_counts;  // assignments since last reset
    bool has_ema = false;

    std::size_t size() const { return vectors.rows(); }
    std::size_t dim() const { return vectors.cols(); }

    static Codebook init(Tensor vectors);
};

struct UsageStats {
    std::vector<double> probs;   // empirical usage probabilities
    double entropy = 0.0;        // natural log
    double perplexity = 1.0;     // exp(entropy)
    double usage_fraction = 0.0; // fraction of codewords with nonzero count
    bool no_data = false;        // total count was zero
};

// Per-batch interpolations between consecutive codewords: point j lies at
// (1 - lambda_j) * c_j + lambda_j * c_{j+1}.
struct DitheredCodebook {
    Tensor points;               // (K-1) x D
    std::vector<double> lambdas; // length K-1, each in [0, 1)
};

struct NearestResult {
    std::vector<std::size_t> indices;
    std::vector<double> distances;  // Euclidean distance to the winner
};

// Exhaustive scan; ties broken toward the lowest index. An empty batch
// yields empty outputs.
NearestResult nearest(const Tensor& z_batch, const Codebook& codebook);
NearestResult nearest_rows(const Tensor& z_batch, const Tensor& rows);

DitheredCodebook dither(const Codebook& codebook, Rng& rng);

UsageStats usage_stats(const Codebook& codebook);
UsageStats usage_stats_from_counts(const std::vector<std::uint64_t>& counts);

// Bumps usage counters for one batch of assignments.
void record_usage(Codebook& codebook, const std::vector<std::size_t>& indices);

// Binary checkpoint: magic "DIVEQCB1", then K and D as little-endian u64,
// a one-byte flag marking whether moving-average state follows, the K*D
// vector entries as little-endian f64, the K usage counts as u64, and --
// when flagged -- the moving-average state in the same layout. Round-trips
// are bit-exact.
void save_checkpoint(const Codebook& codebook, const std::string& path);
Codebook load_checkpoint(const std::string& path);

}  // namespace diveq
