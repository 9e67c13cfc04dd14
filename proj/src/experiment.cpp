// SPDX-License-Identifier: Apache-2.0

#include "diveq/experiment.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <thread>

#include "diveq/errors.hpp"
#include "diveq/metrics.hpp"
#include "diveq/version.hpp"

namespace diveq {

namespace fs = std::filesystem;
using nlohmann::json;

const char* experiment_kind_name(ExperimentKind k) {
    switch (k) {
        case ExperimentKind::CODEBOOK_DIRECT: return "codebook_direct";
        case ExperimentKind::AUTOENCODER: return "autoencoder";
        case ExperimentKind::RD_SWEEP: return "rd_sweep";
        case ExperimentKind::REPLACEMENT_RACE: return "replacement_race";
        case ExperimentKind::SIGMA_ABLATION: return "sigma_ablation";
        case ExperimentKind::RVQ_SWEEP: return "rvq_sweep";
    }
    return "?";
}

ExperimentKind experiment_kind_from_name(const std::string& name) {
    for (ExperimentKind k :
         {ExperimentKind::CODEBOOK_DIRECT, ExperimentKind::AUTOENCODER,
          ExperimentKind::RD_SWEEP, ExperimentKind::REPLACEMENT_RACE,
          ExperimentKind::SIGMA_ABLATION, ExperimentKind::RVQ_SWEEP}) {
        if (name == experiment_kind_name(k)) return k;
    }
    throw config_error("experiment: unknown kind '" + name + "'");
}

// -- parsing -----------------------------------------------------------------

namespace {

struct IssueCollector {
    std::vector<ValidationIssue>* issues;

    void error(const std::string& path, const std::string& message) {
        if (issues) issues->push_back({path, message, true});
    }
    void warning(const std::string& path, const std::string& message) {
        if (issues) issues->push_back({path, message, false});
    }
    bool has_errors() const {
        if (!issues) return false;
        for (const ValidationIssue& i : *issues)
            if (i.error) return true;
        return false;
    }
};

template <typename T>
bool fetch(const json& obj, const std::string& key, const std::string& path, T& out,
           IssueCollector& issues, bool required = false) {
    if (!obj.contains(key)) {
        if (required) issues.error(path, "missing required field");
        return false;
    }
    try {
        out = obj.at(key).get<T>();
        return true;
    } catch (const json::exception& e) {
        issues.error(path, std::string("bad type: ") + e.what());
        return false;
    }
}

void parse_dataset(const json& doc, DatasetSpec& spec, IssueCollector& issues) {
    if (!doc.contains("dataset")) {
        issues.error("dataset", "missing required section");
        return;
    }
    const json& d = doc.at("dataset");
    std::string kind;
    if (fetch(d, "kind", "dataset.kind", kind, issues, true)) {
        try {
            spec.kind = dataset_kind_from_name(kind);
        } catch (const config_error& e) {
            issues.error("dataset.kind", e.what());
        }
    }
    fetch(d, "dims", "dataset.dims", spec.dims, issues);
    fetch(d, "size", "dataset.size", spec.size, issues);
    fetch(d, "seed", "dataset.seed", spec.seed, issues);
    fetch(d, "components", "dataset.components", spec.components, issues);
    fetch(d, "radius", "dataset.radius", spec.radius, issues);
    fetch(d, "component_std", "dataset.component_std", spec.component_std, issues);
    fetch(d, "ring_radius", "dataset.ring_radius", spec.ring_radius, issues);
    fetch(d, "ring_noise", "dataset.ring_noise", spec.ring_noise, issues);
    fetch(d, "image_side", "dataset.image_side", spec.image_side, issues);
    try {
        spec.validate();
    } catch (const config_error& e) {
        issues.error("dataset", e.what());
    }
}

void parse_quantizer(const json& doc, QuantizerConfig& q, IssueCollector& issues) {
    if (!doc.contains("quantizer")) {
        issues.error("quantizer", "missing required section");
        return;
    }
    const json& d = doc.at("quantizer");
    std::string method;
    if (fetch(d, "method", "quantizer.method", method, issues, true)) {
        try {
            q.method = method_from_name(method);
        } catch (const config_error& e) {
            issues.error("quantizer.method", e.what());
        }
    }
    fetch(d, "sigma2", "quantizer.sigma2", q.sigma2, issues);
    fetch(d, "alpha", "quantizer.alpha", q.alpha, issues);
    fetch(d, "beta", "quantizer.beta", q.beta, issues);
    fetch(d, "gamma", "quantizer.gamma", q.gamma, issues);
    fetch(d, "phi", "quantizer.phi", q.phi, issues);
    fetch(d, "tau_start", "quantizer.tau_start", q.tau.tau_start, issues);
    fetch(d, "tau_min", "quantizer.tau_min", q.tau.tau_min, issues);
    fetch(d, "rng_seed", "quantizer.rng_seed", q.rng_seed, issues);
    try {
        q.validate();
    } catch (const config_error& e) {
        // The validate message already carries the field path.
        issues.error(e.what(), "invalid value");
    }
}

void parse_schedule(const json& doc, TrainingSchedule& s, QuantizerConfig& q,
                    IssueCollector& issues) {
    if (!doc.contains("schedule")) {
        issues.error("schedule", "missing required section");
        return;
    }
    const json& d = doc.at("schedule");
    fetch(d, "epochs", "schedule.epochs", s.epochs, issues);
    fetch(d, "batch_size", "schedule.batch_size", s.batch_size, issues);
    fetch(d, "learning_rate", "schedule.learning_rate", s.learning_rate, issues);
    fetch(d, "lr_milestones", "schedule.lr_milestones", s.lr_milestones, issues);
    fetch(d, "optimizer", "schedule.optimizer", s.optimizer, issues);
    fetch(d, "sf_warmup", "schedule.sf_warmup", s.sf_warmup, issues);
    fetch(d, "sf_init_window", "schedule.sf_init_window", s.sf_init_window, issues);
    q.tau.n_epochs = s.epochs;  // the annealing horizon is the training length
    try {
        s.validate();
    } catch (const config_error& e) {
        issues.error(e.what(), "invalid value");
    }
}

void parse_replacement(const json& doc, std::optional<ReplacementPolicy>& policy,
                       IssueCollector& issues) {
    if (!doc.contains("replacement") || doc.at("replacement").is_null()) return;
    const json& d = doc.at("replacement");
    ReplacementPolicy p;
    std::string kind;
    if (fetch(d, "kind", "replacement.kind", kind, issues)) {
        try {
            p.kind = replacement_kind_from_name(kind);
        } catch (const config_error& e) {
            issues.error("replacement.kind", e.what());
        }
    }
    fetch(d, "discard_threshold", "replacement.discard_threshold", p.discard_threshold,
          issues);
    fetch(d, "phase1_end", "replacement.phase1_end", p.phase1_end, issues);
    fetch(d, "phase1_period", "replacement.phase1_period", p.phase1_period, issues);
    fetch(d, "phase2_period", "replacement.phase2_period", p.phase2_period, issues);
    fetch(d, "stop_margin", "replacement.stop_margin", p.stop_margin, issues);
    fetch(d, "perturbation_scale", "replacement.perturbation_scale", p.perturbation_scale,
          issues);
    try {
        p.validate();
    } catch (const config_error& e) {
        issues.error(e.what(), "invalid value");
    }
    policy = p;
}

void parse_arch(const json& doc, AutoencoderArch& arch, IssueCollector& issues) {
    if (!doc.contains("autoencoder")) return;
    const json& d = doc.at("autoencoder");
    fetch(d, "encoder_layers", "autoencoder.encoder_layers", arch.encoder_hidden, issues);
    fetch(d, "latent_dim", "autoencoder.latent_dim", arch.latent_dim, issues);
    fetch(d, "nonlinearity", "autoencoder.nonlinearity", arch.nonlinearity, issues);
    if (arch.nonlinearity != "tanh" && arch.nonlinearity != "relu") {
        issues.error("autoencoder.nonlinearity", "must be 'tanh' or 'relu'");
    }
    if (arch.latent_dim < 1) issues.error("autoencoder.latent_dim", "must be >= 1");
}

ExperimentConfig parse_impl(const json& doc, std::vector<ValidationIssue>* sink) {
    IssueCollector issues{sink};
    ExperimentConfig cfg;
    cfg.raw = doc;

    std::string kind;
    if (fetch(doc, "experiment", "experiment", kind, issues, true)) {
        try {
            cfg.kind = experiment_kind_from_name(kind);
        } catch (const config_error& e) {
            issues.error("experiment", e.what());
        }
    }
    fetch(doc, "output_dir", "output_dir", cfg.output_dir, issues);
    fetch(doc, "seeds", "seeds", cfg.seeds, issues);
    if (cfg.seeds.empty()) issues.error("seeds", "need at least one seed");
    fetch(doc, "workers", "workers", cfg.workers, issues);
    if (cfg.workers < 1) cfg.workers = 1;
    fetch(doc, "codebook_size", "codebook_size", cfg.codebook_size, issues);
    if (cfg.codebook_size < 1) issues.error("codebook_size", "must be >= 1");

    parse_dataset(doc, cfg.dataset, issues);
    parse_quantizer(doc, cfg.quantizer, issues);
    parse_schedule(doc, cfg.schedule, cfg.quantizer, issues);
    parse_replacement(doc, cfg.replacement, issues);
    parse_arch(doc, cfg.arch, issues);

    fetch(doc, "bitrates", "bitrates", cfg.bitrates, issues);
    fetch(doc, "sigma_grid", "sigma_grid", cfg.sigma_grid, issues);
    fetch(doc, "sigma_trainer", "sigma_trainer", cfg.sigma_trainer, issues);
    fetch(doc, "rvq_stages", "rvq_stages", cfg.rvq_stages, issues);
    if (cfg.sigma_trainer != "direct" && cfg.sigma_trainer != "autoencoder") {
        issues.error("sigma_trainer", "must be 'direct' or 'autoencoder'");
    }

    // Cross-field rules.
    if (cfg.kind == ExperimentKind::RD_SWEEP || cfg.kind == ExperimentKind::RVQ_SWEEP) {
        if (cfg.bitrates.empty()) {
            issues.error("bitrates", "sweep experiments need a bitrate list");
        }
        for (unsigned b : cfg.bitrates) {
            if (b < 1 || b > 24) issues.error("bitrates", "bitrates must lie in [1, 24]");
        }
    }
    if (cfg.kind == ExperimentKind::SIGMA_ABLATION) {
        if (cfg.sigma_grid.empty()) {
            issues.error("sigma_grid", "sigma ablation needs a sigma2 grid");
        }
        for (double s : cfg.sigma_grid) {
            if (!(s > 0.0)) issues.error("sigma_grid", "sigma2 values must be > 0");
        }
        if (cfg.quantizer.method != Method::DIVEQ &&
            cfg.quantizer.method != Method::SF_DIVEQ) {
            issues.error("quantizer.method",
                         "sigma ablation requires a directional-noise method");
        }
    }
    if (cfg.kind == ExperimentKind::RVQ_SWEEP && cfg.rvq_stages < 1) {
        issues.error("rvq_stages", "must be >= 1");
    }
    if (method_is_sf(cfg.quantizer.method) && cfg.replacement.has_value()) {
        issues.warning("replacement",
                       "space-filling methods never apply replacement; policy ignored");
    }
    return cfg;
}

}  // namespace

std::vector<ValidationIssue> validate_config(const json& doc) {
    std::vector<ValidationIssue> issues;
    parse_impl(doc, &issues);
    return issues;
}

ExperimentConfig parse_config(const json& doc) {
    std::vector<ValidationIssue> issues;
    ExperimentConfig cfg = parse_impl(doc, &issues);
    for (const ValidationIssue& issue : issues) {
        if (issue.error) {
            throw config_error(issue.path + ": " + issue.message);
        }
    }
    return cfg;
}

ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw io_error("config: cannot open: " + path);
    json doc;
    try {
        is >> doc;
    } catch (const json::exception& e) {
        throw config_error("config: invalid JSON: " + std::string(e.what()));
    }
    return parse_config(doc);
}

json issues_to_json(const std::vector<ValidationIssue>& issues) {
    json arr = json::array();
    for (const ValidationIssue& i : issues) {
        arr.push_back({{"path", i.path},
                       {"message", i.message},
                       {"severity", i.error ? "error" : "warning"}});
    }
    return arr;
}

// -- artifacts ------------------------------------------------------------------

namespace {

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw io_error("cannot open for writing: " + path.string());
    os << text;
    if (!os) throw io_error("write failed: " + path.string());
}

void write_run_provenance(const fs::path& dir, const ExperimentConfig& cfg,
                          std::uint64_t seed) {
    write_text(dir / "config.json", cfg.raw.dump(2) + "\n");
    json prov{{"seed", seed},
              {"version", kVersion},
              {"experiment", experiment_kind_name(cfg.kind)}};
    write_text(dir / "provenance.json", prov.dump(2) + "\n");
}

void write_snapshot(const fs::path& dir, const Codebook& codebook, const Tensor& sample) {
    const std::size_t rows = std::min<std::size_t>(sample.rows(), 2048);
    Tensor head({rows, sample.cols()});
    std::copy_n(sample.data.data(), rows * sample.cols(), head.data.data());
    export_alignment_snapshot(codebook, head, (dir / "snapshot.bin").string());
}

struct RunOutcome {
    std::uint64_t seed = 0;
    double final_distortion = 0.0;
    double test_mse = 0.0;
    MetricsRecord last;
    std::vector<MetricsRecord> metrics;
};

json outcome_summary(const RunOutcome& r) {
    return json{{"seed", r.seed},
                {"final_distortion", r.final_distortion},
                {"final_perplexity", r.last.perplexity},
                {"final_usage_fraction", r.last.usage_fraction},
                {"iterations", r.last.iteration}};
}

// Runs the jobs with at most `workers` threads; rethrows the first failure.
void run_parallel(std::vector<std::function<void()>>& jobs, std::size_t workers) {
    if (jobs.empty()) return;
    workers = std::min(workers, jobs.size());
    if (workers <= 1) {
        for (auto& job : jobs) job();
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&]() {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= jobs.size()) return;
                try {
                    jobs[i]();
                } catch (...) {
                    std::lock_guard<std::mutex> lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                    return;
                }
            }
        });
    }
    for (std::thread& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

RunOutcome run_direct_once(const ExperimentConfig& cfg, const Tensor& data, std::size_t K,
                           const QuantizerConfig& quantizer,
                           const ReplacementPolicy* policy, std::uint64_t seed,
                           CodebookInit init, const fs::path& dir) {
    fs::create_directories(dir);
    DirectTrainResult trained =
        train_codebook_direct(data, K, quantizer, cfg.schedule, policy, seed, init);
    write_metrics_csv(trained.metrics, (dir / "metrics.csv").string());
    save_checkpoint(trained.codebook, (dir / "codebook.cbk").string());
    write_snapshot(dir, trained.codebook, data);
    write_run_provenance(dir, cfg, seed);

    RunOutcome out;
    out.seed = seed;
    out.final_distortion = trained.final_distortion;
    out.last = trained.metrics.back();
    out.metrics = std::move(trained.metrics);
    write_text(dir / "summary.json",
               outcome_summary(out).dump(2) + "\n");
    return out;
}

}  // namespace

void run_experiment(const ExperimentConfig& cfg) {
    const Dataset dataset = generate(cfg.dataset);
    const fs::path out_root(cfg.output_dir);
    fs::create_directories(out_root);
    const ReplacementPolicy* policy =
        cfg.replacement.has_value() ? &cfg.replacement.value() : nullptr;

    switch (cfg.kind) {
        case ExperimentKind::CODEBOOK_DIRECT: {
            std::vector<RunOutcome> outcomes(cfg.seeds.size());
            std::vector<std::function<void()>> jobs;
            for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
                jobs.push_back([&, i]() {
                    const std::uint64_t seed = cfg.seeds[i];
                    outcomes[i] = run_direct_once(
                        cfg, dataset.train, cfg.codebook_size, cfg.quantizer, policy, seed,
                        CodebookInit::DATA_SAMPLE,
                        out_root / ("seed_" + std::to_string(seed)));
                });
            }
            run_parallel(jobs, cfg.workers);
            json summary = json::array();
            for (const RunOutcome& o : outcomes) summary.push_back(outcome_summary(o));
            write_text(out_root / "summary.json", summary.dump(2) + "\n");
            break;
        }

        case ExperimentKind::AUTOENCODER: {
            json summary = json::array();
            std::vector<json> entries(cfg.seeds.size());
            std::vector<std::function<void()>> jobs;
            for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
                jobs.push_back([&, i]() {
                    const std::uint64_t seed = cfg.seeds[i];
                    const fs::path dir = out_root / ("seed_" + std::to_string(seed));
                    fs::create_directories(dir);
                    AutoencoderTrainResult trained = train_autoencoder(
                        dataset.train, dataset.test, cfg.codebook_size, cfg.arch,
                        cfg.quantizer, cfg.schedule, policy, seed);
                    write_metrics_csv(trained.metrics, (dir / "metrics.csv").string());
                    save_checkpoint(trained.codebook, (dir / "codebook.cbk").string());
                    const Tensor latents = trained.encoder.apply(dataset.test);
                    write_snapshot(dir, trained.codebook, latents);
                    write_run_provenance(dir, cfg, seed);
                    json entry{{"seed", seed},
                               {"test_mse", trained.test_mse},
                               {"final_perplexity", trained.metrics.back().perplexity},
                               {"final_usage_fraction",
                                trained.metrics.back().usage_fraction}};
                    write_text(dir / "summary.json", entry.dump(2) + "\n");
                    entries[i] = std::move(entry);
                });
            }
            run_parallel(jobs, cfg.workers);
            for (json& e : entries) summary.push_back(std::move(e));
            write_text(out_root / "summary.json", summary.dump(2) + "\n");
            break;
        }

        case ExperimentKind::RD_SWEEP: {
            struct Cell {
                unsigned bitrate;
                std::uint64_t seed;
                double final_distortion = 0.0;
            };
            std::vector<Cell> cells;
            for (unsigned b : cfg.bitrates)
                for (std::uint64_t s : cfg.seeds) cells.push_back({b, s, 0.0});
            std::vector<std::function<void()>> jobs;
            for (std::size_t i = 0; i < cells.size(); ++i) {
                jobs.push_back([&, i]() {
                    Cell& cell = cells[i];
                    const std::size_t K = std::size_t{1} << cell.bitrate;
                    const fs::path dir =
                        out_root / ("b" + std::to_string(cell.bitrate) + "_seed" +
                                    std::to_string(cell.seed));
                    const RunOutcome out =
                        run_direct_once(cfg, dataset.train, K, cfg.quantizer, policy,
                                        cell.seed, CodebookInit::DATA_SAMPLE, dir);
                    cell.final_distortion = out.final_distortion;
                });
            }
            run_parallel(jobs, cfg.workers);

            std::vector<std::pair<unsigned, std::vector<double>>> runs;
            for (unsigned b : cfg.bitrates) {
                std::vector<double> per_seed;
                for (const Cell& c : cells)
                    if (c.bitrate == b) per_seed.push_back(c.final_distortion);
                runs.emplace_back(b, std::move(per_seed));
            }
            const RateDistortionTable table = rate_distortion_table(std::move(runs));
            std::string csv = "bitrate,codebook_size,mean_distortion,violation\n";
            json jpoints = json::array();
            for (const RatePoint& p : table.points) {
                csv += std::to_string(p.bitrate) + "," +
                       std::to_string(std::size_t{1} << p.bitrate) + "," +
                       fmt_double(p.mean_distortion) + "," +
                       (p.violation ? "1" : "0") + "\n";
                jpoints.push_back({{"bitrate", p.bitrate},
                                   {"mean_distortion", p.mean_distortion},
                                   {"per_seed", p.per_seed},
                                   {"violation", p.violation}});
            }
            write_text(out_root / "rd_table.csv", csv);
            write_text(out_root / "summary.json",
                       json{{"points", jpoints},
                            {"flagged_bitrates", table.flagged_bitrates}}
                               .dump(2) +
                           "\n");
            break;
        }

        case ExperimentKind::REPLACEMENT_RACE: {
            ReplacementPolicy base = cfg.replacement.value_or(ReplacementPolicy{});
            json races = json::array();
            for (std::uint64_t seed : cfg.seeds) {
                ReplacementPolicy importance = base;
                importance.kind = ReplacementKind::IMPORTANCE;
                ReplacementPolicy uniform = base;
                uniform.kind = ReplacementKind::NSVQ_UNIFORM;

                const RunOutcome a = run_direct_once(
                    cfg, dataset.train, cfg.codebook_size, cfg.quantizer, &importance,
                    seed, CodebookInit::COLLAPSED,
                    out_root / ("importance_seed" + std::to_string(seed)));
                const RunOutcome b = run_direct_once(
                    cfg, dataset.train, cfg.codebook_size, cfg.quantizer, &uniform, seed,
                    CodebookInit::COLLAPSED,
                    out_root / ("uniform_seed" + std::to_string(seed)));

                // Paired perplexity traces in one CSV.
                std::string csv = "iteration,perplexity_importance,perplexity_uniform\n";
                const std::size_t n = std::min(a.metrics.size(), b.metrics.size());
                for (std::size_t i = 0; i < n; ++i) {
                    csv += std::to_string(a.metrics[i].iteration) + "," +
                           fmt_double(a.metrics[i].perplexity) + "," +
                           fmt_double(b.metrics[i].perplexity) + "\n";
                }
                write_text(out_root / ("race_seed" + std::to_string(seed) + ".csv"), csv);

                const double target = 0.9 * static_cast<double>(cfg.codebook_size);
                auto crossing = [&](const std::vector<MetricsRecord>& m) -> json {
                    for (const MetricsRecord& r : m) {
                        if (r.perplexity >= target) return r.iteration;
                    }
                    return nullptr;
                };
                races.push_back({{"seed", seed},
                                 {"target_perplexity", target},
                                 {"importance_crossing", crossing(a.metrics)},
                                 {"uniform_crossing", crossing(b.metrics)}});
            }
            write_text(out_root / "summary.json",
                       json{{"races", races}}.dump(2) + "\n");
            break;
        }

        case ExperimentKind::SIGMA_ABLATION: {
            struct Cell {
                double sigma2;
                std::uint64_t seed;
                double final_distortion = 0.0;
                double test_mse = 0.0;
            };
            const bool use_autoencoder = cfg.sigma_trainer == "autoencoder";
            std::vector<Cell> cells;
            for (double s2 : cfg.sigma_grid)
                for (std::uint64_t s : cfg.seeds) cells.push_back({s2, s, 0.0, 0.0});
            std::vector<std::function<void()>> jobs;
            for (std::size_t i = 0; i < cells.size(); ++i) {
                jobs.push_back([&, i]() {
                    Cell& cell = cells[i];
                    QuantizerConfig q = cfg.quantizer;
                    q.sigma2 = cell.sigma2;
                    char label[32];
                    std::snprintf(label, sizeof(label), "sigma%g", cell.sigma2);
                    const fs::path dir =
                        out_root / (std::string(label) + "_seed" +
                                    std::to_string(cell.seed));
                    if (use_autoencoder) {
                        fs::create_directories(dir);
                        AutoencoderTrainResult trained = train_autoencoder(
                            dataset.train, dataset.test, cfg.codebook_size, cfg.arch, q,
                            cfg.schedule, policy, cell.seed);
                        write_metrics_csv(trained.metrics, (dir / "metrics.csv").string());
                        save_checkpoint(trained.codebook, (dir / "codebook.cbk").string());
                        write_run_provenance(dir, cfg, cell.seed);
                        cell.test_mse = trained.test_mse;
                        cell.final_distortion = trained.metrics.back().distortion;
                        write_text(dir / "summary.json",
                                   json{{"seed", cell.seed},
                                        {"sigma2", cell.sigma2},
                                        {"test_mse", trained.test_mse}}
                                           .dump(2) +
                                       "\n");
                    } else {
                        const RunOutcome out = run_direct_once(
                            cfg, dataset.train, cfg.codebook_size, q, policy, cell.seed,
                            CodebookInit::SPREAD_SAMPLE, dir);
                        cell.final_distortion = out.final_distortion;
                    }
                });
            }
            run_parallel(jobs, cfg.workers);

            std::string csv = use_autoencoder ? "sigma2,mean_distortion,mean_test_mse\n"
                                              : "sigma2,mean_distortion\n";
            json entries = json::array();
            for (double s2 : cfg.sigma_grid) {
                double acc = 0.0, acc_mse = 0.0;
                std::size_t count = 0;
                std::vector<double> per_seed;
                for (const Cell& c : cells) {
                    if (c.sigma2 == s2) {
                        acc += c.final_distortion;
                        acc_mse += c.test_mse;
                        per_seed.push_back(use_autoencoder ? c.test_mse
                                                           : c.final_distortion);
                        ++count;
                    }
                }
                const double mean_d = acc / static_cast<double>(count);
                const double mean_mse = acc_mse / static_cast<double>(count);
                csv += fmt_double(s2) + "," + fmt_double(mean_d);
                if (use_autoencoder) csv += "," + fmt_double(mean_mse);
                csv += "\n";
                json entry{{"sigma2", s2},
                           {"mean_distortion", mean_d},
                           {"per_seed", per_seed}};
                if (use_autoencoder) entry["mean_test_mse"] = mean_mse;
                entries.push_back(std::move(entry));
            }
            write_text(out_root / "sigma_table.csv", csv);
            write_text(out_root / "summary.json",
                       json{{"sigma", entries}}.dump(2) + "\n");
            break;
        }

        case ExperimentKind::RVQ_SWEEP: {
            struct Cell {
                unsigned bitrate;
                std::size_t stages;
                std::uint64_t seed;
                double final_distortion = 0.0;
            };
            std::vector<Cell> cells;
            for (unsigned b : cfg.bitrates)
                for (std::uint64_t s : cfg.seeds) {
                    cells.push_back({b, 1, s, 0.0});
                    cells.push_back({b, cfg.rvq_stages, s, 0.0});
                }
            std::vector<std::function<void()>> jobs;
            for (std::size_t i = 0; i < cells.size(); ++i) {
                jobs.push_back([&, i]() {
                    Cell& cell = cells[i];
                    const std::size_t K = std::size_t{1} << cell.bitrate;
                    const fs::path dir =
                        out_root / ("b" + std::to_string(cell.bitrate) + "_stages" +
                                    std::to_string(cell.stages) + "_seed" +
                                    std::to_string(cell.seed));
                    fs::create_directories(dir);
                    RvqTrainResult trained = train_codebook_rvq(
                        dataset.train, cell.stages, K, cfg.quantizer, cfg.schedule,
                        cell.seed);
                    write_metrics_csv(trained.metrics, (dir / "metrics.csv").string());
                    for (std::size_t s = 0; s < trained.codebooks.size(); ++s) {
                        save_checkpoint(trained.codebooks[s],
                                        (dir / ("codebook_stage" + std::to_string(s + 1) +
                                                ".cbk"))
                                            .string());
                    }
                    write_run_provenance(dir, cfg, cell.seed);
                    cell.final_distortion = trained.final_distortion;
                    write_text(dir / "summary.json",
                               json{{"seed", cell.seed},
                                    {"stages", cell.stages},
                                    {"bitrate", cell.bitrate},
                                    {"final_distortion", trained.final_distortion}}
                                       .dump(2) +
                                   "\n");
                });
            }
            run_parallel(jobs, cfg.workers);

            std::string csv = "bitrate,stages,mean_distortion\n";
            json entries = json::array();
            for (unsigned b : cfg.bitrates) {
                for (std::size_t stages : {std::size_t{1}, cfg.rvq_stages}) {
                    double acc = 0.0;
                    std::size_t count = 0;
                    for (const Cell& c : cells) {
                        if (c.bitrate == b && c.stages == stages) {
                            acc += c.final_distortion;
                            ++count;
                        }
                    }
                    if (count == 0) continue;
                    const double mean_d = acc / static_cast<double>(count);
                    csv += std::to_string(b) + "," + std::to_string(stages) + "," +
                           fmt_double(mean_d) + "\n";
                    entries.push_back(
                        {{"bitrate", b}, {"stages", stages}, {"mean_distortion", mean_d}});
                }
            }
            write_text(out_root / "rvq_table.csv", csv);
            write_text(out_root / "summary.json",
                       json{{"cells", entries}}.dump(2) + "\n");
            break;
        }
    }
}

}  // namespace diveq
