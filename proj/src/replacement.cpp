// SPDX-License-Identifier: Apache-2.0

#include "diveq/replacement.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "diveq/errors.hpp"

namespace diveq {

const char* replacement_kind_name(ReplacementKind k) {
    return k == ReplacementKind::NSVQ_UNIFORM ? "nsvq_uniform" : "importance";
}

ReplacementKind replacement_kind_from_name(const std::string& name) {
    if (name == "nsvq_uniform") return ReplacementKind::NSVQ_UNIFORM;
    if (name == "importance") return ReplacementKind::IMPORTANCE;
    throw config_error("replacement.kind: unknown kind '" + name + "'");
}

void ReplacementPolicy::validate() const {
    if (!(discard_threshold > 0.0 && discard_threshold < 1.0)) {
        throw config_error("replacement.discard_threshold: must lie in (0, 1)");
    }
    if (phase1_period < 1 || phase2_period < 1) {
        throw config_error("replacement.period: periods must be >= 1");
    }
    if (perturbation_scale <= 0.0) {
        throw config_error("replacement.perturbation_scale: must be > 0");
    }
}

bool should_replace(std::size_t iter, std::size_t total_iters,
                    const ReplacementPolicy& policy) {
    if (iter > total_iters) {
        throw config_error("should_replace: iter " + std::to_string(iter) +
                           " beyond total " + std::to_string(total_iters));
    }
    if (iter == 0) return false;
    if (total_iters >= policy.stop_margin && iter > total_iters - policy.stop_margin) {
        return false;
    }
    const std::size_t period =
        iter <= policy.phase1_end ? policy.phase1_period : policy.phase2_period;
    return iter % period == 0;
}

namespace {

// Mean nearest-neighbor distance among the given rows; the perturbation
// scale falls back to an absolute value when fewer than two rows exist.
double mean_neighbor_distance(const Tensor& vectors,
                              const std::vector<std::size_t>& rows) {
    if (rows.size() < 2) return 1.0;
    const std::size_t d = vectors.cols();
    double acc = 0.0;
    for (std::size_t a : rows) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t b : rows) {
            if (a == b) continue;
            best = std::min(best, squared_distance(vectors.row(a), vectors.row(b), d));
        }
        acc += std::sqrt(best);
    }
    return acc / static_cast<double>(rows.size());
}

bool rows_equal(const Tensor& m, std::size_t a, std::size_t b) {
    const std::size_t d = m.cols();
    for (std::size_t c = 0; c < d; ++c) {
        if (m.data[a * d + c] != m.data[b * d + c]) return false;
    }
    return true;
}

}  // namespace

std::vector<std::size_t> replace(Codebook& codebook, const ReplacementPolicy& policy,
                                 Rng& rng) {
    policy.validate();
    const std::size_t k = codebook.size(), d = codebook.dim();
    std::uint64_t total = 0;
    for (std::uint64_t c : codebook.usage_counts) total += c;

    std::vector<std::size_t> active;
    std::vector<std::size_t> dead;
    for (std::size_t j = 0; j < k; ++j) {
        const double share =
            total == 0 ? 0.0
                       : static_cast<double>(codebook.usage_counts[j]) /
                             static_cast<double>(total);
        if (share < policy.discard_threshold) {
            dead.push_back(j);
        } else {
            active.push_back(j);
        }
    }
    if (dead.empty()) {
        std::fill(codebook.usage_counts.begin(), codebook.usage_counts.end(), 0);
        return {};
    }
    if (active.empty()) {
        throw runtime_abort("replacement: total collapse, no active codewords");
    }

    // Donor sampling: cumulative usage mass for importance, plain index
    // draw for the uniform rule.
    std::vector<double> cumulative(active.size(), 0.0);
    double mass = 0.0;
    for (std::size_t i = 0; i < active.size(); ++i) {
        mass += static_cast<double>(codebook.usage_counts[active[i]]);
        cumulative[i] = mass;
    }

    const double sigma =
        policy.perturbation_scale * mean_neighbor_distance(codebook.vectors, active);

    for (std::size_t idx : dead) {
        std::size_t donor;
        if (policy.kind == ReplacementKind::IMPORTANCE) {
            const double u = rng.uniform() * mass;
            donor = active[std::lower_bound(cumulative.begin(), cumulative.end(), u) -
                           cumulative.begin()];
        } else {
            donor = active[rng.integer(active.size())];
        }
        for (int attempt = 0; attempt < 100; ++attempt) {
            for (std::size_t c = 0; c < d; ++c) {
                codebook.vectors.data[idx * d + c] =
                    codebook.vectors.data[donor * d + c] + sigma * rng.normal();
            }
            bool duplicate = false;
            for (std::size_t j = 0; j < k && !duplicate; ++j) {
                if (j != idx && rows_equal(codebook.vectors, idx, j)) duplicate = true;
            }
            if (!duplicate) break;
            if (attempt == 99) {
                throw numeric_error("replacement: could not separate replaced codeword");
            }
        }
        if (codebook.has_ema) {
            // Restart moving averages at the new location.
            for (std::size_t c = 0; c < d; ++c)
                codebook.ema_g.data[idx * d + c] = codebook.vectors.data[idx * d + c];
            codebook.ema_h[idx] = 1.0;
        }
    }
    std::fill(codebook.usage_counts.begin(), codebook.usage_counts.end(), 0);
    return dead;
}

}  // namespace diveq
