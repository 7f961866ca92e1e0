/*
 * beamdip command-line interface.
 *
 * Copyright 2026 the beamdip authors
 * Licensed under the terms of the Apache 2.0 License.
 * See LICENSE file in the project root for terms.
 */

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "beamdip/pipeline.hpp"

namespace {

// Exit codes: 0 success, 1 partial failures, 2 invalid config.
constexpr int kOk = 0;
constexpr int kPartial = 1;
constexpr int kBadConfig = 2;

struct CliOverrides {
    std::string config_file;
    std::vector<std::string> inputs;
    std::string out_dir;
    long seed = -1;
    int jobs = -1;
    int engine_threads = -1;
    long max_iters = -1;
    bool no_es = false;
    bool synthetic = false;
    bool export_snapshots = false;
    bool export_clusters = false;
    double cloud_floor = -1.0;
    std::string mask_mode;
    int kfold_k = -1;
    double noise_std = -1.0;
    long align_cap = -1;
};

void apply_overrides(beamdip::RunConfig& cfg, const CliOverrides& o) {
    if (!o.inputs.empty()) cfg.inputs = o.inputs;
    if (!o.out_dir.empty()) cfg.out_dir = o.out_dir;
    if (o.seed >= 0) {
        cfg.train.seed = static_cast<std::uint64_t>(o.seed);
        cfg.noise.seed = static_cast<std::uint64_t>(o.seed);
    }
    if (o.jobs > 0) cfg.jobs = o.jobs;
    if (o.engine_threads > 0) cfg.engine_threads = o.engine_threads;
    if (o.max_iters > 0) cfg.train.max_iters = o.max_iters;
    if (o.no_es) cfg.no_es = true;
    if (o.synthetic) cfg.use_synthetic = true;
    if (o.export_snapshots) cfg.export_snapshots = true;
    if (o.export_clusters) cfg.export_clusters = true;
    if (o.cloud_floor >= 0.0) cfg.cloud_floor = o.cloud_floor;
    if (!o.mask_mode.empty()) beamdip::apply_config_key(cfg, "train.mask_mode", o.mask_mode);
    if (o.kfold_k > 0) cfg.train.kfold_k = o.kfold_k;
    if (o.noise_std >= 0.0) cfg.noise.std = o.noise_std;
    if (o.align_cap > 0) cfg.align_cap = o.align_cap;
}

void add_common(CLI::App* cmd, CliOverrides& o) {
    cmd->add_option("--config", o.config_file, "flat key=value config file");
    cmd->add_option("--input,-i", o.inputs, "input grid files (.csv/.dat) or directories");
    cmd->add_option("--out,-o", o.out_dir, "output directory");
    cmd->add_option("--seed", o.seed, "master seed (train + noise)");
    cmd->add_option("--jobs", o.jobs, "concurrent images");
    cmd->add_option("--threads", o.engine_threads, "conv worker threads per run");
    cmd->add_option("--max-iters", o.max_iters, "training iteration cap");
    cmd->add_flag("--no-es", o.no_es, "disable early stopping");
    cmd->add_flag("--synthetic", o.synthetic, "use the configured synthetic beam as input");
    cmd->add_flag("--export-snapshots", o.export_snapshots, "write iteration snapshots as PGM");
    cmd->add_flag("--export-clusters", o.export_clusters,
                  "segment the restored image with dbscan/hdbscan");
    cmd->add_option("--cloud-floor", o.cloud_floor,
                    "intensity floor (fraction of max) for pixel-to-point conversion");
    cmd->add_option("--mask-mode", o.mask_mode, "random or kfold")
        ->check(CLI::IsMember({"random", "kfold"}));
    cmd->add_option("--kfold-k", o.kfold_k, "number of folds for kfold masks");
    cmd->add_option("--noise-std", o.noise_std, "synthetic gaussian noise std");
    cmd->add_option("--align-cap", o.align_cap, "iteration cap for the no-ES alignment run");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Unsupervised denoising of phase-space scan images"};
    app.require_subcommand(1);

    CliOverrides o;
    CLI::App* denoise = app.add_subcommand("denoise", "denoise images with the skip network");
    CLI::App* align = app.add_subcommand("align", "compare ES stop against the beam-area optimum");
    CLI::App* benchmark = app.add_subcommand("benchmark", "variational sweep over beam parameters");
    CLI::App* triage_cmd = app.add_subcommand("triage", "sort a directory into accept/reject");
    CLI::App* synth = app.add_subcommand("synth", "emit a synthetic clean/noisy image pair");
    for (CLI::App* cmd : {denoise, align, benchmark, triage_cmd, synth}) add_common(cmd, o);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kBadConfig;
    }

    beamdip::RunConfig cfg;
    try {
        if (!o.config_file.empty()) beamdip::load_config_file(cfg, o.config_file);
        apply_overrides(cfg, o);
        cfg.command = app.get_subcommands().front()->get_name();

        if (cfg.command == "denoise") {
            const auto outcome = beamdip::run_denoise(cfg);
            std::printf("denoise: %zu image(s), %d failure(s), summary at %s/summary.csv\n",
                        outcome.summaries.size(), outcome.failures, cfg.out_dir.c_str());
            return outcome.failures == 0 ? kOk : kPartial;
        }
        if (cfg.command == "align") {
            const auto rep = beamdip::run_align(cfg);
            std::printf("align: es_best_iter=%ld area_opt_iter=%ld rel_gap=%.4f%s\n",
                        rep.es_report.best_iter, rep.area_opt_iter, rep.rel_gap,
                        rep.monotone_trace ? " (monotone trace)" : "");
            return kOk;
        }
        if (cfg.command == "benchmark") {
            const auto cells = beamdip::run_benchmark(cfg);
            int failures = 0;
            for (const auto& c : cells)
                if (c.status != "ok") ++failures;
            std::printf("benchmark: %zu cell(s), %d failure(s), table at %s/benchmark.csv\n",
                        cells.size(), failures, cfg.out_dir.c_str());
            return failures == 0 ? kOk : kPartial;
        }
        if (cfg.command == "triage") {
            const auto entries = beamdip::run_triage(cfg);
            std::size_t kept = 0;
            for (const auto& e : entries) kept += e.accepted ? 1 : 0;
            std::printf("triage: kept %zu of %zu, manifest at %s/manifest.csv\n", kept,
                        entries.size(), cfg.out_dir.c_str());
            return kOk;
        }
        beamdip::run_synth(cfg);
        std::printf("synth: wrote clean/noisy pair to %s\n", cfg.out_dir.c_str());
        return kOk;
    } catch (const beamdip::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return e.code() == beamdip::errc::bad_config ? kBadConfig : kPartial;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kPartial;
    }
}
