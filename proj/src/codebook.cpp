// SPDX-License-Identifier: Apache-2.0

#include "diveq/codebook.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "diveq/detail/serialize.hpp"
#include "diveq/errors.hpp"

namespace diveq {

Codebook Codebook::init(Tensor vectors) {
    if (vectors.rank() != 2 || vectors.rows() < 1 || vectors.cols() < 1) {
        throw shape_error("codebook: need a K x D matrix with K >= 1, got " +
                          vectors.shape_str());
    }
    Codebook cb;
    cb.ema_g = Tensor({vectors.rows(), vectors.cols()}, 0.0);
    cb.ema_h.assign(vectors.rows(), 0.0);
    cb.usage_counts.assign(vectors.rows(), 0);
    cb.vectors = std::move(vectors);
    return cb;
}

NearestResult nearest_rows(const Tensor& z_batch, const Tensor& rows) {
    if (z_batch.rank() != 2 || rows.rank() != 2) {
        throw shape_error("nearest: expected matrices, got " + z_batch.shape_str() +
                          " and " + rows.shape_str());
    }
    if (z_batch.cols() != rows.cols()) {
        throw shape_error("nearest: dimension mismatch " + z_batch.shape_str() + " vs " +
                          rows.shape_str());
    }
    NearestResult result;
    const std::size_t n = z_batch.rows(), k = rows.rows(), d = rows.cols();
    result.indices.resize(n);
    result.distances.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        double best_sq = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < k; ++j) {
            const double sq = squared_distance(z_batch.row(i), rows.row(j), d);
            if (sq < best_sq) {
                best_sq = sq;
                best = j;
            }
        }
        result.indices[i] = best;
        result.distances[i] = std::sqrt(best_sq);
    }
    return result;
}

NearestResult nearest(const Tensor& z_batch, const Codebook& codebook) {
    return nearest_rows(z_batch, codebook.vectors);
}

DitheredCodebook dither(const Codebook& codebook, Rng& rng) {
    const std::size_t k = codebook.size(), d = codebook.dim();
    if (k < 2) {
        throw shape_error("dither: needs at least two codewords, have " + std::to_string(k));
    }
    DitheredCodebook out;
    out.points = Tensor({k - 1, d});
    out.lambdas.resize(k - 1);
    for (std::size_t j = 0; j + 1 < k; ++j) {
        const double lambda = rng.uniform();
        out.lambdas[j] = lambda;
        const double* a = codebook.vectors.row(j);
        const double* b = codebook.vectors.row(j + 1);
        for (std::size_t c = 0; c < d; ++c) {
            out.points.data[j * d + c] = (1.0 - lambda) * a[c] + lambda * b[c];
        }
    }
    return out;
}

UsageStats usage_stats_from_counts(const std::vector<std::uint64_t>& counts) {
    UsageStats stats;
    stats.probs.assign(counts.size(), 0.0);
    std::uint64_t total = 0;
    std::size_t used = 0;
    for (std::uint64_t c : counts) {
        total += c;
        if (c > 0) ++used;
    }
    if (total == 0) {
        stats.no_data = true;
        stats.entropy = 0.0;
        stats.perplexity = 1.0;
        stats.usage_fraction = 0.0;
        return stats;
    }
    double entropy = 0.0;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        const double p = static_cast<double>(counts[i]) / static_cast<double>(total);
        stats.probs[i] = p;
        if (p > 0.0) entropy -= p * std::log(p);
    }
    stats.entropy = entropy;
    stats.perplexity = std::exp(entropy);
    stats.usage_fraction =
        static_cast<double>(used) / static_cast<double>(counts.size());
    return stats;
}

UsageStats usage_stats(const Codebook& codebook) {
    return usage_stats_from_counts(codebook.usage_counts);
}

void record_usage(Codebook& codebook, const std::vector<std::size_t>& indices) {
    for (std::size_t idx : indices) {
        if (idx >= codebook.size()) {
            throw shape_error("record_usage: index " + std::to_string(idx) +
                              " out of range for K=" + std::to_string(codebook.size()));
        }
        ++codebook.usage_counts[idx];
    }
}

namespace {

constexpr char kMagic[8] = {'D', 'I', 'V', 'E', 'Q', 'C', 'B', '1'};

using detail::put_f64;
using detail::put_u64;

std::uint64_t get_u64(std::istream& is) { return detail::get_u64(is, "checkpoint"); }
double get_f64(std::istream& is) { return detail::get_f64(is, "checkpoint"); }

}  // namespace

void save_checkpoint(const Codebook& codebook, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw io_error("checkpoint: cannot open for writing: " + path);
    os.write(kMagic, 8);
    put_u64(os, codebook.size());
    put_u64(os, codebook.dim());
    const char flag = codebook.has_ema ? 1 : 0;
    os.write(&flag, 1);
    for (double v : codebook.vectors.data) put_f64(os, v);
    for (std::uint64_t c : codebook.usage_counts) put_u64(os, c);
    if (codebook.has_ema) {
        for (double v : codebook.ema_g.data) put_f64(os, v);
        for (double v : codebook.ema_h) put_f64(os, v);
    }
    if (!os) throw io_error("checkpoint: write failed: " + path);
}

Codebook load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("checkpoint: cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0) {
        throw io_error("checkpoint: malformed header: " + path);
    }
    const std::uint64_t k = get_u64(is);
    const std::uint64_t d = get_u64(is);
    if (k == 0 || d == 0) {
        throw io_error("checkpoint: invalid dimensions K=" + std::to_string(k) +
                       " D=" + std::to_string(d));
    }
    char flag = 0;
    is.read(&flag, 1);
    if (!is) throw io_error("checkpoint: truncated file");

    Tensor vectors({static_cast<std::size_t>(k), static_cast<std::size_t>(d)});
    for (double& v : vectors.data) v = get_f64(is);
    Codebook cb = Codebook::init(std::move(vectors));
    for (std::uint64_t& c : cb.usage_counts) c = get_u64(is);
    if (flag == 1) {
        cb.has_ema = true;
        for (double& v : cb.ema_g.data) v = get_f64(is);
        for (double& v : cb.ema_h) {
            v = get_f64(is);
            if (v < 0.0) throw io_error("checkpoint: negative moving-average count");
        }
    } else if (flag != 0) {
        throw io_error("checkpoint: unknown flag byte");
    }
    return cb;
}

}  // namespace diveq
