// SPDX-License-Identifier: Apache-2.0
//
// Quantization-quality and codebook-health metrics, rate-distortion
// aggregation, and raw-vector snapshot export for external embedding tools.
//
// Entropy conventions differ on purpose: perplexity (codebook.hpp) uses the
// natural log, while distortion-per-bit uses base 2. The two never share an
// implementation.

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "diveq/codebook.hpp"
#include "diveq/tensor.hpp"

namespace diveq {

struct MetricsRecord {
    std::size_t iteration = 0;
    std::size_t epoch = 0;
    double total_loss = 0.0;
    double reconstruction = 0.0;
    double codebook_term = 0.0;
    double commitment_term = 0.0;
    double kl_term = 0.0;
    double distortion = 0.0;
    double perplexity = 1.0;
    double usage_fraction = 0.0;
    double distortion_per_bit = 0.0;  // +inf when usage entropy is zero
    double lr = 0.0;
    double tau = 0.0;  // 0 when not annealing
    std::size_t replaced_count = 0;
};

// Mean squared quantization error over a batch. Errors on an empty batch.
double distortion(const Tensor& z_batch, const Tensor& hard_points);

struct DistortionPerBit {
    double value = 0.0;
    bool infinite = false;  // usage entropy was zero (single codeword)
};
// distortion / base-2 usage entropy.
DistortionPerBit distortion_per_bit(double dist, const UsageStats& usage);

// Base-2 entropy of a usage distribution; deliberately separate from the
// natural-log entropy inside UsageStats.
double usage_entropy_bits(const UsageStats& usage);

struct RatePoint {
    unsigned bitrate = 0;
    double mean_distortion = 0.0;
    std::vector<double> per_seed;
    bool violation = false;  // distortion increased vs the previous bitrate
};
struct RateDistortionTable {
    std::vector<RatePoint> points;          // sorted by bitrate
    std::vector<unsigned> flagged_bitrates; // monotonicity violations
};
RateDistortionTable rate_distortion_table(
    std::vector<std::pair<unsigned, std::vector<double>>> runs);

// Writes codebook rows (role 1) followed by latent rows (role 0) in the
// dataset file layout, with one role byte per row appended after the vector
// block.
void export_alignment_snapshot(const Codebook& codebook, const Tensor& latents,
                               const std::string& path);
struct AlignmentSnapshot {
    Tensor vectors;
    std::vector<std::uint8_t> roles;
};
AlignmentSnapshot load_alignment_snapshot(const std::string& path);

// CSV stream with the fixed column set documented in the README.
std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRecord& r);
void write_metrics_csv(const std::vector<MetricsRecord>& records, const std::string& path);

}  // namespace diveq
