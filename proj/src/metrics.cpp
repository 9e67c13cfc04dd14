// SPDX-License-Identifier: Apache-2.0

#include "diveq/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>

#include "diveq/detail/serialize.hpp"
#include "diveq/errors.hpp"

namespace diveq {

double distortion(const Tensor& z_batch, const Tensor& hard_points) {
    if (!z_batch.same_shape(hard_points)) {
        throw shape_error("distortion: " + z_batch.shape_str() + " vs " +
                          hard_points.shape_str());
    }
    if (z_batch.rows() == 0) {
        throw shape_error("distortion: empty batch");
    }
    double acc = 0.0;
    for (std::size_t r = 0; r < z_batch.rows(); ++r)
        acc += squared_distance(z_batch.row(r), hard_points.row(r), z_batch.cols());
    return acc / static_cast<double>(z_batch.rows());
}

double usage_entropy_bits(const UsageStats& usage) {
    double h = 0.0;
    for (double p : usage.probs) {
        if (p > 0.0) h -= p * std::log2(p);
    }
    return h;
}

DistortionPerBit distortion_per_bit(double dist, const UsageStats& usage) {
    if (usage.no_data) {
        throw shape_error("distortion_per_bit: usage stats carry no data");
    }
    const double bits = usage_entropy_bits(usage);
    DistortionPerBit out;
    if (bits == 0.0) {
        out.value = std::numeric_limits<double>::infinity();
        out.infinite = true;
        return out;
    }
    out.value = dist / bits;
    return out;
}

RateDistortionTable rate_distortion_table(
    std::vector<std::pair<unsigned, std::vector<double>>> runs) {
    if (runs.size() < 2) {
        throw config_error("rate_distortion_table: need at least two bitrates");
    }
    std::sort(runs.begin(), runs.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    RateDistortionTable table;
    for (const auto& [bitrate, values] : runs) {
        if (values.empty()) {
            throw config_error("rate_distortion_table: bitrate " + std::to_string(bitrate) +
                               " has no runs");
        }
        RatePoint p;
        p.bitrate = bitrate;
        p.per_seed = values;
        double acc = 0.0;
        for (double v : values) acc += v;
        p.mean_distortion = acc / static_cast<double>(values.size());
        table.points.push_back(std::move(p));
    }
    for (std::size_t i = 1; i < table.points.size(); ++i) {
        if (table.points[i].mean_distortion > table.points[i - 1].mean_distortion) {
            table.points[i].violation = true;
            table.flagged_bitrates.push_back(table.points[i].bitrate);
        }
    }
    return table;
}

namespace {
constexpr char kDatasetMagic[8] = {'D', 'I', 'V', 'E', 'Q', 'D', 'S', '1'};
}

void export_alignment_snapshot(const Codebook& codebook, const Tensor& latents,
                               const std::string& path) {
    const std::size_t d = codebook.dim();
    if (latents.rows() > 0 && latents.cols() != d) {
        throw shape_error("alignment snapshot: latent dim " + latents.shape_str() +
                          " vs codebook dim " + std::to_string(d));
    }
    const std::size_t n = codebook.size() + latents.rows();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw io_error("alignment snapshot: cannot open for writing: " + path);
    os.write(kDatasetMagic, 8);
    detail::put_u64(os, n);
    detail::put_u64(os, d);
    for (double v : codebook.vectors.data) detail::put_f64(os, v);
    for (double v : latents.data) detail::put_f64(os, v);
    // Role column, one byte per row: 1 = codeword, 0 = latent.
    for (std::size_t i = 0; i < codebook.size(); ++i) os.put(1);
    for (std::size_t i = 0; i < latents.rows(); ++i) os.put(0);
    if (!os) throw io_error("alignment snapshot: write failed: " + path);
}

AlignmentSnapshot load_alignment_snapshot(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("alignment snapshot: cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kDatasetMagic, 8) != 0) {
        throw io_error("alignment snapshot: malformed header: " + path);
    }
    const std::uint64_t n = detail::get_u64(is, "alignment snapshot");
    const std::uint64_t d = detail::get_u64(is, "alignment snapshot");
    AlignmentSnapshot out;
    out.vectors = Tensor({static_cast<std::size_t>(n), static_cast<std::size_t>(d)});
    for (double& v : out.vectors.data) v = detail::get_f64(is, "alignment snapshot");
    out.roles.resize(n);
    is.read(reinterpret_cast<char*>(out.roles.data()), static_cast<std::streamsize>(n));
    if (!is) throw io_error("alignment snapshot: truncated roles: " + path);
    return out;
}

std::string metrics_csv_header() {
    return "iteration,epoch,total_loss,recon,codebook_term,commitment_term,kl_term,"
           "distortion,perplexity,usage_fraction,distortion_per_bit,lr,tau,replaced_count";
}

namespace {

void append_double(std::string& out, double v) {
    if (std::isinf(v)) {
        out += v > 0 ? "inf" : "-inf";
        return;
    }
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out += buf;
}

}  // namespace

std::string metrics_csv_row(const MetricsRecord& r) {
    std::string out;
    out += std::to_string(r.iteration);
    out += ',';
    out += std::to_string(r.epoch);
    for (double v : {r.total_loss, r.reconstruction, r.codebook_term, r.commitment_term,
                     r.kl_term, r.distortion, r.perplexity, r.usage_fraction,
                     r.distortion_per_bit, r.lr, r.tau}) {
        out += ',';
        append_double(out, v);
    }
    out += ',';
    out += std::to_string(r.replaced_count);
    return out;
}

void write_metrics_csv(const std::vector<MetricsRecord>& records, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw io_error("metrics: cannot open for writing: " + path);
    os << metrics_csv_header() << '\n';
    for (const MetricsRecord& r : records) os << metrics_csv_row(r) << '\n';
    if (!os) throw io_error("metrics: write failed: " + path);
}

}  // namespace diveq
