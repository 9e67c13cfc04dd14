// SPDX-License-Identifier: Apache-2.0
//
// Reproducible experiment runner: JSON config parsing and validation,
// experiment dispatch, CSV/JSON artifact output. Re-running a config with
// the same seeds reproduces every metrics CSV byte for byte.

#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "diveq/data.hpp"
#include "diveq/harness.hpp"
#include "diveq/quantizers.hpp"
#include "diveq/replacement.hpp"

namespace diveq {

enum class ExperimentKind {
    CODEBOOK_DIRECT,
    AUTOENCODER,
    RD_SWEEP,
    REPLACEMENT_RACE,
    SIGMA_ABLATION,
    RVQ_SWEEP,
};

const char* experiment_kind_name(ExperimentKind k);
ExperimentKind experiment_kind_from_name(const std::string& name);

struct ExperimentConfig {
    ExperimentKind kind = ExperimentKind::CODEBOOK_DIRECT;
    std::string output_dir = "runs/out";
    std::vector<std::uint64_t> seeds = {1};
    std::size_t workers = 1;
    std::size_t codebook_size = 8;  // K for non-sweep experiments

    DatasetSpec dataset;
    QuantizerConfig quantizer;
    TrainingSchedule schedule;
    std::optional<ReplacementPolicy> replacement;
    AutoencoderArch arch;

    std::vector<unsigned> bitrates;   // sweep kinds; K = 2^B
    std::vector<double> sigma_grid;   // sigma ablation
    std::string sigma_trainer = "direct";  // sigma ablation: "direct" or "autoencoder"
    std::size_t rvq_stages = 3;

    nlohmann::json raw;  // original document, copied into each run directory
};

struct ValidationIssue {
    std::string path;
    std::string message;
    bool error = true;  // false marks a warning
};

// Full schema and cross-field validation without running anything.
std::vector<ValidationIssue> validate_config(const nlohmann::json& doc);

// Parses after validation; throws config_error on the first hard issue.
ExperimentConfig parse_config(const nlohmann::json& doc);
ExperimentConfig load_config_file(const std::string& path);

// Executes the experiment and writes all artifacts under output_dir.
void run_experiment(const ExperimentConfig& config);

nlohmann::json issues_to_json(const std::vector<ValidationIssue>& issues);

}  // namespace diveq
