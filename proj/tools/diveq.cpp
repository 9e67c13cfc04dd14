// SPDX-License-Identifier: Apache-2.0
//
// Experiment CLI. Exit codes: 0 success, 2 config error, 3 runtime abort,
// 4 I/O error.

#include <cstdio>
#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "diveq/data.hpp"
#include "diveq/errors.hpp"
#include "diveq/experiment.hpp"
#include "diveq/metrics.hpp"
#include "diveq/version.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;
constexpr int kExitIo = 4;

int run_command(const std::string& config_path, const std::string& out_override,
                long long seed_override, int workers_override) {
    diveq::ExperimentConfig cfg = diveq::load_config_file(config_path);
    if (!out_override.empty()) cfg.output_dir = out_override;
    if (seed_override >= 0) {
        cfg.seeds = {static_cast<std::uint64_t>(seed_override)};
    }
    if (workers_override > 0) cfg.workers = static_cast<std::size_t>(workers_override);
    diveq::run_experiment(cfg);
    std::cout << "wrote artifacts to " << cfg.output_dir << "\n";
    return kExitOk;
}

int validate_command(const std::string& config_path) {
    std::ifstream is(config_path);
    if (!is) throw diveq::io_error("config: cannot open: " + config_path);
    nlohmann::json doc;
    try {
        is >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw diveq::config_error("config: invalid JSON: " + std::string(e.what()));
    }
    const auto issues = diveq::validate_config(doc);
    std::cout << diveq::issues_to_json(issues).dump(2) << "\n";
    for (const auto& issue : issues) {
        if (issue.error) return kExitConfig;
    }
    return kExitOk;
}

int export_snapshot_command(const std::string& checkpoint_path, const std::string& data_path,
                            const std::string& out_path, std::size_t sample) {
    const diveq::Codebook codebook = diveq::load_checkpoint(checkpoint_path);
    diveq::Tensor latents({0, codebook.dim()});
    if (!data_path.empty()) {
        diveq::Tensor loaded = diveq::load_dataset(data_path);
        const std::size_t rows = std::min(sample, loaded.rows());
        latents = diveq::Tensor({rows, loaded.cols()});
        std::copy_n(loaded.data.data(), rows * loaded.cols(), latents.data.data());
    }
    diveq::export_alignment_snapshot(codebook, latents, out_path);
    std::cout << "wrote " << out_path << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"vector-quantization experiment runner"};
    app.set_version_flag("--version", diveq::kVersion);
    app.require_subcommand(1);

    std::string config_path;
    std::string out_override;
    long long seed_override = -1;
    int workers_override = 0;

    CLI::App* run = app.add_subcommand("run", "execute an experiment config");
    run->add_option("--config", config_path, "JSON experiment config")->required();
    run->add_option("--out", out_override, "override the output directory");
    run->add_option("--seed-override", seed_override, "replace the seed list");
    run->add_option("--workers", workers_override, "parallel run slots");

    std::string validate_path;
    CLI::App* validate = app.add_subcommand("validate", "check a config without running");
    validate->add_option("--config", validate_path, "JSON experiment config")->required();

    std::string checkpoint_path, data_path, snapshot_out;
    std::size_t sample = 2048;
    CLI::App* snapshot =
        app.add_subcommand("export-snapshot", "write a codebook/latent alignment snapshot");
    snapshot->add_option("--checkpoint", checkpoint_path, "codebook checkpoint")->required();
    snapshot->add_option("--data", data_path, "dataset file providing latent rows");
    snapshot->add_option("--out", snapshot_out, "output path")->required();
    snapshot->add_option("--sample", sample, "max latent rows to include");

    try {
        app.parse(argc, argv);
        if (run->parsed()) {
            return run_command(config_path, out_override, seed_override, workers_override);
        }
        if (validate->parsed()) {
            return validate_command(validate_path);
        }
        if (snapshot->parsed()) {
            return export_snapshot_command(checkpoint_path, data_path, snapshot_out, sample);
        }
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    } catch (const diveq::config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const diveq::io_error& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitIo;
    } catch (const diveq::runtime_abort& e) {
        std::cerr << "runtime abort: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}
