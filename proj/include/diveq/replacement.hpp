// SPDX-License-Identifier: Apache-2.0
//
// Codebook-replacement policies: periodic reinitialization of under-used
// codewords from active ones, either with uniformly chosen donors or with
// donors sampled proportionally to their usage counts.

#pragma once

#include <cstdint>
#include <vector>

#include "diveq/codebook.hpp"
#include "diveq/rng.hpp"

namespace diveq {

enum class ReplacementKind { NSVQ_UNIFORM, IMPORTANCE };

const char* replacement_kind_name(ReplacementKind k);
ReplacementKind replacement_kind_from_name(const std::string& name);

struct ReplacementPolicy {
    ReplacementKind kind = ReplacementKind::IMPORTANCE;
    double discard_threshold = 0.01;   // usage share below which a codeword dies
    std::size_t phase1_end = 2000;     // iteration where the dense phase ends
    std::size_t phase1_period = 100;
    std::size_t phase2_period = 500;
    std::size_t stop_margin = 1000;    // no replacements this close to the end
    double perturbation_scale = 0.1;   // relative to codebook geometry

    void validate() const;  // throws config_error naming the field
};

// True iff `iter` (1-based) hits the active phase period and is not within
// stop_margin of total_iters.
bool should_replace(std::size_t iter, std::size_t total_iters,
                    const ReplacementPolicy& policy);

// Overwrites codewords whose usage share is below the discard threshold
// with a perturbed donor, resets all usage counts, and returns the replaced
// indices. Throws runtime_abort("total collapse") when no codeword is
// active.
std::vector<std::size_t> replace(Codebook& codebook, const ReplacementPolicy& policy,
                                 Rng& rng);

}  // namespace diveq
