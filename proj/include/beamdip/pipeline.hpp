/*
 * Run orchestration: config file handling, the denoise / align / benchmark /
 * triage / synth runners, and all file emission (CSV logs, grid exports,
 * portable graymaps).
 *
 * Copyright 2026 the beamdip authors
 * Licensed under the terms of the Apache 2.0 License.
 * See LICENSE file in the project root for terms.
 */

#ifndef BEAMDIP_PIPELINE_HPP
#define BEAMDIP_PIPELINE_HPP

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "beamdip/clustering.hpp"
#include "beamdip/core.hpp"
#include "beamdip/dipnet.hpp"
#include "beamdip/emittance.hpp"
#include "beamdip/image.hpp"
#include "beamdip/losses.hpp"
#include "beamdip/stopping.hpp"
#include "beamdip/synth.hpp"

namespace beamdip {

constexpr int kSchemaVersion = 1;

struct RunConfig {
    std::string command;  // denoise | align | benchmark | triage | synth
    std::vector<std::string> inputs;
    std::string out_dir = "out";
    std::string data_root;  // optional prefix for relative inputs
    bool use_synthetic = false;

    TrainConfig train;
    BeamSpec beam;
    NoiseSpec noise;
    TriagePolicy triage_policy;

    int jobs = 1;
    int engine_threads = 1;
    bool no_es = false;
    bool export_snapshots = false;
    long snapshot_every = 50;
    bool export_profiles = true;
    bool export_contours = true;
    bool export_heatmaps = true;
    bool export_clusters = false;  // dbscan/hdbscan segmentation of the restored image
    bool triage_copy = false;
    double cloud_floor = 0.05;     // image-to-cloud intensity floor (fraction of max)
    double cluster_eps_pitches = 2.0;  // dbscan eps in units of the larger pixel pitch
    int cluster_min_pts = 8;
    int cluster_min_size = 25;

    long align_cap = 3000;
    double bench_raw_threshold = 0.01;  // raw estimator mask fraction
    std::vector<double> bench_emittance_scale{0.5, 1.0, 2.0};
    std::vector<double> bench_peak_scale{0.5, 1.0, 2.0};
    std::vector<int> bench_grid{64, 128, 256};
    std::vector<double> bench_noise_std{0.02, 0.05, 0.1};
};

// ---------------------------------------------------------------------------
// Config file: flat `key=value` lines with dotted keys, '#' comments.
// Precedence is CLI > file > defaults; the CLI applies its flags after load.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline double to_double(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        fail(errc::bad_config, "bad numeric value for " + key + ": " + v);
    }
}

inline long to_long(const std::string& v, const std::string& key) {
    return static_cast<long>(to_double(v, key));
}

inline bool to_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    fail(errc::bad_config, "bad boolean for " + key + ": " + v);
}

inline std::vector<double> to_list(const std::string& v, const std::string& key) {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ';')) {
        tok = trim(tok);
        if (!tok.empty()) out.push_back(to_double(tok, key));
    }
    if (out.empty()) fail(errc::bad_config, "empty list for " + key);
    return out;
}

inline std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

inline void apply_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    using detail::to_bool;
    using detail::to_double;
    using detail::to_list;
    using detail::to_long;
    auto& t = cfg.train;
    if (key == "train.max_iters") t.max_iters = to_long(value, key);
    else if (key == "train.lr") t.lr = to_double(value, key);
    else if (key == "train.reg_noise_std") t.reg_noise_std = to_double(value, key);
    else if (key == "train.weight_floor") t.weight_floor = to_double(value, key);
    else if (key == "train.mask_fraction") t.mask_fraction = to_double(value, key);
    else if (key == "train.kfold_k") t.kfold_k = static_cast<int>(to_long(value, key));
    else if (key == "train.metric_interval") t.metric_interval = static_cast<int>(to_long(value, key));
    else if (key == "train.seed") t.seed = static_cast<std::uint64_t>(to_long(value, key));
    else if (key == "train.mask_mode") {
        if (value == "random") t.mask_mode = MaskMode::random;
        else if (value == "kfold") t.mask_mode = MaskMode::kfold;
        else fail(errc::bad_config, "mask_mode must be random or kfold");
    } else if (key == "loss.w_mse") t.loss_weights.w_mse = to_double(value, key);
    else if (key == "loss.w_mae") t.loss_weights.w_mae = to_double(value, key);
    else if (key == "loss.w_tv") t.loss_weights.w_tv = to_double(value, key);
    else if (key == "loss.w_gd") t.loss_weights.w_gd = to_double(value, key);
    else if (key == "es.enabled") t.es.enabled = to_bool(value, key);
    else if (key == "es.patience") t.es.patience = static_cast<int>(to_long(value, key));
    else if (key == "es.window") t.es.window = static_cast<int>(to_long(value, key));
    else if (key == "es.rel_improvement") t.es.rel_improvement = to_double(value, key);
    else if (key == "es.conjunction") t.es.conjunction = to_bool(value, key);
    else if (key == "es.mode") {
        if (value == "emv") t.es.mode = VarianceMode::emv;
        else if (value == "wmv") t.es.mode = VarianceMode::wmv;
        else fail(errc::bad_config, "es.mode must be emv or wmv");
    } else if (key == "net.scales") t.net.scales = static_cast<int>(to_long(value, key));
    else if (key == "net.down_filters") t.net.down_filters = static_cast<int>(to_long(value, key));
    else if (key == "net.up_filters") t.net.up_filters = static_cast<int>(to_long(value, key));
    else if (key == "net.skip_filters") t.net.skip_filters = static_cast<int>(to_long(value, key));
    else if (key == "net.activation_slope") t.net.activation_slope = to_double(value, key);
    else if (key == "beam.emittance") cfg.beam.emittance = to_double(value, key);
    else if (key == "beam.alpha") cfg.beam.alpha = to_double(value, key);
    else if (key == "beam.beta") cfg.beam.beta = to_double(value, key);
    else if (key == "beam.gamma") cfg.beam.gamma = to_double(value, key);
    else if (key == "beam.peak_intensity") cfg.beam.peak_intensity = to_double(value, key);
    else if (key == "beam.halo_amplitude_ratio") cfg.beam.halo_amplitude_ratio = to_double(value, key);
    else if (key == "beam.halo_sigma_scale") cfg.beam.halo_sigma_scale = to_double(value, key);
    else if (key == "beam.rows") cfg.beam.rows = static_cast<int>(to_long(value, key));
    else if (key == "beam.cols") cfg.beam.cols = static_cast<int>(to_long(value, key));
    else if (key == "beam.span_sigmas") cfg.beam.span_sigmas = to_double(value, key);
    else if (key == "beam.center_x") cfg.beam.center_x = to_double(value, key);
    else if (key == "beam.center_xp") cfg.beam.center_xp = to_double(value, key);
    else if (key == "noise.model") {
        if (value == "gaussian-additive") cfg.noise.model = NoiseModel::gaussian_additive;
        else if (value == "uniform-additive") cfg.noise.model = NoiseModel::uniform_additive;
        else if (value == "salt-pepper") cfg.noise.model = NoiseModel::salt_pepper;
        else if (value == "speckle") cfg.noise.model = NoiseModel::speckle;
        else if (value == "poisson") cfg.noise.model = NoiseModel::poisson;
        else fail(errc::bad_config, "unknown noise.model: " + value);
    } else if (key == "noise.mean") cfg.noise.mean = to_double(value, key);
    else if (key == "noise.std") cfg.noise.std = to_double(value, key);
    else if (key == "noise.amplitude") cfg.noise.amplitude = to_double(value, key);
    else if (key == "noise.fraction") cfg.noise.fraction = to_double(value, key);
    else if (key == "noise.scale") cfg.noise.scale = to_double(value, key);
    else if (key == "noise.seed") cfg.noise.seed = static_cast<std::uint64_t>(to_long(value, key));
    else if (key == "triage.min_peak_median_ratio")
        cfg.triage_policy.min_peak_median_ratio = to_double(value, key);
    else if (key == "triage.max_centroid_offset")
        cfg.triage_policy.max_centroid_offset = to_double(value, key);
    else if (key == "triage.occupied_fraction")
        cfg.triage_policy.occupied_fraction = to_double(value, key);
    else if (key == "triage.min_occupied_pixels")
        cfg.triage_policy.min_occupied_pixels = static_cast<std::size_t>(to_long(value, key));
    else if (key == "triage.copy_accepted") cfg.triage_copy = to_bool(value, key);
    else if (key == "run.out") cfg.out_dir = value;
    else if (key == "run.data_root") cfg.data_root = value;
    else if (key == "run.jobs") cfg.jobs = static_cast<int>(to_long(value, key));
    else if (key == "run.engine_threads") cfg.engine_threads = static_cast<int>(to_long(value, key));
    else if (key == "run.no_es") cfg.no_es = to_bool(value, key);
    else if (key == "run.synthetic") cfg.use_synthetic = to_bool(value, key);
    else if (key == "run.export_snapshots") cfg.export_snapshots = to_bool(value, key);
    else if (key == "run.snapshot_every") cfg.snapshot_every = to_long(value, key);
    else if (key == "run.export_profiles") cfg.export_profiles = to_bool(value, key);
    else if (key == "run.export_contours") cfg.export_contours = to_bool(value, key);
    else if (key == "run.export_heatmaps") cfg.export_heatmaps = to_bool(value, key);
    else if (key == "run.export_clusters") cfg.export_clusters = to_bool(value, key);
    else if (key == "run.cloud_floor") cfg.cloud_floor = to_double(value, key);
    else if (key == "run.cluster_eps_pitches") cfg.cluster_eps_pitches = to_double(value, key);
    else if (key == "run.cluster_min_pts") cfg.cluster_min_pts = static_cast<int>(to_long(value, key));
    else if (key == "run.cluster_min_size") cfg.cluster_min_size = static_cast<int>(to_long(value, key));
    else if (key == "align.cap") cfg.align_cap = to_long(value, key);
    else if (key == "bench.raw_threshold") cfg.bench_raw_threshold = to_double(value, key);
    else if (key == "bench.emittance_scale") cfg.bench_emittance_scale = to_list(value, key);
    else if (key == "bench.peak_scale") cfg.bench_peak_scale = to_list(value, key);
    else if (key == "bench.noise_std") cfg.bench_noise_std = to_list(value, key);
    else if (key == "bench.grid") {
        cfg.bench_grid.clear();
        for (double v : to_list(value, key)) cfg.bench_grid.push_back(static_cast<int>(v));
    } else fail(errc::bad_config, "unknown config key: " + key);
}

inline void load_config_file(RunConfig& cfg, const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(errc::bad_config, "cannot open config file: " + path);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        const std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            fail(errc::bad_config, "expected key=value at line " + std::to_string(line_no));
        apply_config_key(cfg, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
    }
}

// Canonical serialization; the digest ties a RunSummary to its exact config.
inline std::string serialize_config(const RunConfig& cfg) {
    std::map<std::string, std::string> kv;
    const auto& t = cfg.train;
    kv["train.max_iters"] = std::to_string(t.max_iters);
    kv["train.lr"] = detail::fmt(t.lr);
    kv["train.reg_noise_std"] = detail::fmt(t.reg_noise_std);
    kv["train.weight_floor"] = detail::fmt(t.weight_floor);
    kv["train.mask_fraction"] = detail::fmt(t.mask_fraction);
    kv["train.kfold_k"] = std::to_string(t.kfold_k);
    kv["train.metric_interval"] = std::to_string(t.metric_interval);
    kv["train.seed"] = std::to_string(t.seed);
    kv["train.mask_mode"] = t.mask_mode == MaskMode::random ? "random" : "kfold";
    kv["loss.w_mse"] = detail::fmt(t.loss_weights.w_mse);
    kv["loss.w_mae"] = detail::fmt(t.loss_weights.w_mae);
    kv["loss.w_tv"] = detail::fmt(t.loss_weights.w_tv);
    kv["loss.w_gd"] = detail::fmt(t.loss_weights.w_gd);
    kv["es.enabled"] = t.es.enabled ? "true" : "false";
    kv["es.patience"] = std::to_string(t.es.patience);
    kv["es.window"] = std::to_string(t.es.window);
    kv["es.rel_improvement"] = detail::fmt(t.es.rel_improvement);
    kv["es.conjunction"] = t.es.conjunction ? "true" : "false";
    kv["es.mode"] = t.es.mode == VarianceMode::emv ? "emv" : "wmv";
    kv["net.scales"] = std::to_string(t.net.scales);
    kv["net.down_filters"] = std::to_string(t.net.down_filters);
    kv["net.up_filters"] = std::to_string(t.net.up_filters);
    kv["net.skip_filters"] = std::to_string(t.net.skip_filters);
    kv["net.activation_slope"] = detail::fmt(t.net.activation_slope);
    kv["beam.emittance"] = detail::fmt(cfg.beam.emittance);
    kv["beam.alpha"] = detail::fmt(cfg.beam.alpha);
    kv["beam.beta"] = detail::fmt(cfg.beam.beta);
    kv["beam.gamma"] = detail::fmt(cfg.beam.gamma);
    kv["beam.peak_intensity"] = detail::fmt(cfg.beam.peak_intensity);
    kv["beam.halo_amplitude_ratio"] = detail::fmt(cfg.beam.halo_amplitude_ratio);
    kv["beam.halo_sigma_scale"] = detail::fmt(cfg.beam.halo_sigma_scale);
    kv["beam.rows"] = std::to_string(cfg.beam.rows);
    kv["beam.cols"] = std::to_string(cfg.beam.cols);
    kv["beam.span_sigmas"] = detail::fmt(cfg.beam.span_sigmas);
    kv["noise.model"] = noise_model_name(cfg.noise.model);
    kv["noise.mean"] = detail::fmt(cfg.noise.mean);
    kv["noise.std"] = detail::fmt(cfg.noise.std);
    kv["noise.amplitude"] = detail::fmt(cfg.noise.amplitude);
    kv["noise.fraction"] = detail::fmt(cfg.noise.fraction);
    kv["noise.scale"] = detail::fmt(cfg.noise.scale);
    kv["noise.seed"] = std::to_string(cfg.noise.seed);
    kv["run.no_es"] = cfg.no_es ? "true" : "false";
    kv["run.synthetic"] = cfg.use_synthetic ? "true" : "false";
    kv["align.cap"] = std::to_string(cfg.align_cap);
    std::string out;
    for (const auto& [k, v] : kv) {
        out += k;
        out += '=';
        out += v;
        out += '\n';
    }
    return out;
}

// FNV-1a 64.
inline std::string config_hash(const RunConfig& cfg) {
    const std::string s = serialize_config(cfg);
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001B3ull;
    }
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ---------------------------------------------------------------------------
// Emission helpers.
// ---------------------------------------------------------------------------

// Binary 8-bit portable graymap.
inline void save_pgm(const NormalizedImage& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(errc::io_error, "cannot open for writing: " + path);
    out << "P5\n" << img.cols << " " << img.rows << "\n255\n";
    const auto bytes = to_uint8(img);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(errc::io_error, "write failed: " + path);
}

inline void save_trainlog_csv(const TrainLog& log, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(errc::io_error, "cannot open for writing: " + path);
    out << "schema_version,iteration,MSE Loss,MAE Loss,TV Loss,GDL Loss,Total Loss,"
           "Pseudo Validation Loss,EMV Variance,Entropy,Laplacian Var,Tenengrad,"
           "Beam Area (Emittance),PSNR\n";
    for (const auto& r : log.rows) {
        out << kSchemaVersion << ',' << r.iteration << ',' << detail::fmt(r.mse) << ','
            << detail::fmt(r.mae) << ',' << detail::fmt(r.tv) << ',' << detail::fmt(r.gdl) << ','
            << detail::fmt(r.total) << ',' << detail::fmt(r.pvl) << ',' << detail::fmt(r.emv_var)
            << ',' << detail::fmt(r.entropy) << ',' << detail::fmt(r.lap_var) << ','
            << detail::fmt(r.tenengrad) << ',' << detail::fmt(r.beam_area) << ','
            << detail::fmt(r.psnr) << '\n';
    }
}

inline void save_profile_csv(const std::vector<double>& profile, const ScanImage& axes_src,
                             ProfileAxis axis, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(errc::io_error, "cannot open for writing: " + path);
    out << "schema_version,coordinate,intensity\n";
    for (std::size_t i = 0; i < profile.size(); ++i) {
        const double coord = axis == ProfileAxis::position ? axes_src.x_of(static_cast<int>(i))
                                                           : axes_src.xp_of(static_cast<int>(i));
        out << kSchemaVersion << ',' << detail::fmt(coord) << ',' << detail::fmt(profile[i]) << '\n';
    }
}

struct RunSummary {
    std::string image_id;
    std::string status = "ok";  // ok | error
    std::string message;
    int rows = 0, cols = 0;
    StopReport report;
    PhaseSpaceStats stats;
    TwissTriple tw;
    bool tw_valid = false;
    double beam_area = 0.0;
    double psnr_restored = std::numeric_limits<double>::quiet_NaN();
    double psnr_noisy = std::numeric_limits<double>::quiet_NaN();
    double seconds = 0.0;
    std::string cfg_hash;
};

inline void save_summary_csv(const std::vector<RunSummary>& rows, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(errc::io_error, "cannot open for writing: " + path);
    out << "schema_version,image,status,message,rows,cols,stop_trigger,best_iter,stop_iter,"
           "emv_peak_iter,best_pvl,max_var,rel_gap,mean_x,mean_xp,sigma_x,sigma_xp,emittance,"
           "alpha,beta,gamma,beam_area,psnr_restored,psnr_noisy,seconds,config_hash\n";
    for (const auto& s : rows) {
        std::string msg = s.message;
        for (char& ch : msg)
            if (ch == ',' || ch == '\n') ch = ';';
        out << kSchemaVersion << ',' << s.image_id << ',' << s.status << ',' << msg << ',' << s.rows
            << ',' << s.cols << ',' << stop_trigger_name(s.report.trigger) << ','
            << s.report.best_iter << ',' << s.report.stop_iter << ',' << s.report.emv_peak_iter
            << ',' << detail::fmt(s.report.best_pvl) << ',' << detail::fmt(s.report.max_var) << ','
            << detail::fmt(s.report.rel_gap) << ',' << detail::fmt(s.stats.mean_x) << ','
            << detail::fmt(s.stats.mean_xp) << ',' << detail::fmt(s.stats.sigma_x) << ','
            << detail::fmt(s.stats.sigma_xp) << ',' << detail::fmt(s.stats.emittance_rms) << ','
            << detail::fmt(s.tw_valid ? s.tw.alpha : 0.0) << ','
            << detail::fmt(s.tw_valid ? s.tw.beta : 0.0) << ','
            << detail::fmt(s.tw_valid ? s.tw.gamma : 0.0) << ',' << detail::fmt(s.beam_area) << ','
            << detail::fmt(s.psnr_restored) << ',' << detail::fmt(s.psnr_noisy) << ','
            << detail::fmt(s.seconds) << ',' << s.cfg_hash << '\n';
    }
}

// ---------------------------------------------------------------------------
// Runners.
// ---------------------------------------------------------------------------

inline std::string resolve_input(const RunConfig& cfg, const std::string& path) {
    std::string root = cfg.data_root;
    if (root.empty())
        if (const char* env = std::getenv("BEAMDIP_DATA_ROOT")) root = env;
    if (root.empty() || std::filesystem::path(path).is_absolute()) return path;
    return (std::filesystem::path(root) / path).string();
}

inline GridFormat format_of(const std::string& path) {
    return std::filesystem::path(path).extension() == ".dat" ? GridFormat::dat : GridFormat::csv;
}

// PSNR in the physical frame: mean squared error in mV^2 against the clean
// grid, peak = clean maximum.
inline double psnr_physical(const ScanImage& candidate, const ScanImage& clean) {
    if (candidate.rows != clean.rows || candidate.cols != clean.cols)
        fail(errc::shape_error, "psnr_physical shape mismatch");
    const double peak = *std::max_element(clean.intensities.begin(), clean.intensities.end());
    double mse = 0.0;
    for (std::size_t i = 0; i < clean.intensities.size(); ++i) {
        const double d = candidate.intensities[i] - clean.intensities[i];
        mse += d * d;
    }
    mse /= static_cast<double>(clean.intensities.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

namespace detail {

struct PreparedImage {
    std::string id;
    ScanImage noisy_scan;                 // shifted nonnegative
    NormalizedImage noisy;
    std::optional<NormalizedImage> gt;    // clean, mapped into the noisy frame
    std::optional<ScanImage> gt_phys;     // clean grid in physical units
};

// Maps the clean grid into the shifted-then-normalized frame of the noisy
// image so per-iteration PSNR compares like with like.
inline NormalizedImage gt_in_frame(const ScanImage& clean, const ScanImage& noisy_shifted,
                                   const NormalizedImage& noisy_norm) {
    NormalizedImage out = noisy_norm;
    const double span = noisy_norm.orig_max - noisy_norm.orig_min;
    for (std::size_t i = 0; i < clean.intensities.size(); ++i)
        out.values[i] =
            (clean.intensities[i] + noisy_shifted.shift_applied - noisy_norm.orig_min) / span;
    return out;
}

inline PreparedImage prepare_synthetic(const RunConfig& cfg) {
    PreparedImage p;
    p.id = "synthetic";
    GroundTruth gt = generate_beam(cfg.beam);
    const ScanImage noisy = add_noise(gt.clean, cfg.noise);
    p.noisy_scan = shift_nonnegative(noisy);
    p.noisy = normalize(p.noisy_scan);
    p.gt = gt_in_frame(gt.clean, p.noisy_scan, p.noisy);
    p.gt_phys = std::move(gt.clean);
    return p;
}

inline PreparedImage prepare_file(const RunConfig& cfg, const std::string& input) {
    PreparedImage p;
    p.id = std::filesystem::path(input).stem().string();
    const std::string path = resolve_input(cfg, input);
    p.noisy_scan = shift_nonnegative(load_scan(path, format_of(path)));
    p.noisy = normalize(p.noisy_scan);
    return p;
}

inline TrainConfig effective_train_config(const RunConfig& cfg) {
    TrainConfig t = cfg.train;
    if (cfg.no_es) t.es.enabled = false;
    return t;
}

}  // namespace detail

struct DenoiseOutcome {
    std::vector<RunSummary> summaries;
    int failures = 0;
};

// Denoise one prepared image and emit its files under out_dir/<id>/.
inline RunSummary denoise_one(const RunConfig& cfg, const detail::PreparedImage& img,
                              const std::string& out_dir) {
    namespace fs = std::filesystem;
    RunSummary summary;
    summary.image_id = img.id;
    summary.rows = img.noisy.rows;
    summary.cols = img.noisy.cols;
    summary.cfg_hash = config_hash(cfg);
    const auto t0 = std::chrono::steady_clock::now();

    const fs::path dir = fs::path(out_dir) / img.id;
    fs::create_directories(dir);

    TrainHooks hooks;
    if (cfg.export_snapshots) {
        const fs::path snap_dir = dir / "snapshots";
        fs::create_directories(snap_dir);
        hooks.snapshot_every = cfg.snapshot_every;
        hooks.snapshot_sink = [snap_dir](long iter, const NormalizedImage& im) {
            char name[32];
            std::snprintf(name, sizeof(name), "iter%06ld.pgm", iter);
            save_pgm(im, (snap_dir / name).string());
        };
    }

    const TrainConfig tcfg = detail::effective_train_config(cfg);
    const TrainResult res = train<float>(img.noisy, tcfg, img.gt ? &*img.gt : nullptr, hooks,
                                         cfg.engine_threads);
    summary.report = res.report;

    // Exports live in the physical frame: shift undone, negatives floored.
    ScanImage restored = detail::as_physical_scan(res.restored);
    restored.source_id = img.id + "-restored";
    save_scan(restored, (dir / "restored.csv").string(), GridFormat::csv);
    if (cfg.export_heatmaps) save_pgm(res.restored, (dir / "restored.pgm").string());
    save_trainlog_csv(res.log, (dir / "trainlog.csv").string());

    try {
        summary.stats = compute_stats(restored);
        summary.tw = twiss(summary.stats);
        summary.tw_valid = true;
    } catch (const Error&) {
        summary.tw_valid = false;
    }
    summary.beam_area = beam_area_metric(restored, 0.01);
    if (img.gt_phys) {
        summary.psnr_restored = psnr_physical(restored, *img.gt_phys);
        ScanImage noisy_phys = img.noisy_scan;
        for (double& v : noisy_phys.intensities) v -= img.noisy_scan.shift_applied;
        summary.psnr_noisy = psnr_physical(noisy_phys, *img.gt_phys);
    }

    if (cfg.export_profiles) {
        save_profile_csv(extract_profile(restored, ProfileAxis::position, false), restored,
                         ProfileAxis::position, (dir / "profile_position.csv").string());
        save_profile_csv(extract_profile(restored, ProfileAxis::angle, false), restored,
                         ProfileAxis::angle, (dir / "profile_angle.csv").string());
    }
    if (cfg.export_contours && summary.tw_valid) {
        std::ofstream out(dir / "contours.csv", std::ios::binary);
        out << "schema_version,n_sigma,x_mm,xp_mrad\n";
        for (int ns = 1; ns <= 3; ++ns) {
            const auto pts = nsigma_contour(summary.tw, summary.stats.emittance_rms,
                                            static_cast<double>(ns), 256, summary.stats.mean_x,
                                            summary.stats.mean_xp);
            for (const auto& [x, xp] : pts)
                out << kSchemaVersion << ',' << ns << ',' << detail::fmt(x) << ','
                    << detail::fmt(xp) << '\n';
        }
    }

    if (cfg.export_clusters) {
        const double peak =
            *std::max_element(restored.intensities.begin(), restored.intensities.end());
        const PointCloud cloud = image_to_cloud(restored, cfg.cloud_floor * peak);
        const double eps = cfg.cluster_eps_pitches * std::max(restored.x_step, restored.xp_step);
        const ClusterLabels db = dbscan(cloud, eps, cfg.cluster_min_pts);
        const ClusterLabels hdb = hdbscan(cloud, cfg.cluster_min_size);
        std::ofstream out(dir / "clusters.csv", std::ios::binary);
        out << "schema_version,x_mm,xp_mrad,intensity,dbscan_label,hdbscan_label\n";
        for (std::size_t i = 0; i < cloud.size(); ++i)
            out << kSchemaVersion << ',' << detail::fmt(cloud.points[i].x) << ','
                << detail::fmt(cloud.points[i].y) << ',' << detail::fmt(cloud.points[i].w) << ','
                << db.labels[i] << ',' << hdb.labels[i] << '\n';
    }

    summary.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return summary;
}

// Batch denoise: per-image failures are recorded and the batch continues.
inline DenoiseOutcome run_denoise(const RunConfig& cfg) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);

    std::vector<detail::PreparedImage> prepared;
    std::vector<RunSummary> failed;
    if (cfg.use_synthetic) {
        prepared.push_back(detail::prepare_synthetic(cfg));
    } else {
        if (cfg.inputs.empty()) fail(errc::bad_config, "denoise needs --input files or --synthetic");
        for (const auto& in : cfg.inputs) {
            try {
                prepared.push_back(detail::prepare_file(cfg, in));
            } catch (const std::exception& e) {
                RunSummary s;
                s.image_id = fs::path(in).stem().string();
                s.status = "error";
                s.message = e.what();
                s.cfg_hash = config_hash(cfg);
                failed.push_back(std::move(s));
            }
        }
    }

    DenoiseOutcome outcome;
    outcome.summaries.resize(prepared.size());
    std::atomic<std::size_t> next{0};
    std::atomic<int> failures{0};
    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= prepared.size()) return;
            try {
                outcome.summaries[i] = denoise_one(cfg, prepared[i], cfg.out_dir);
            } catch (const std::exception& e) {
                RunSummary s;
                s.image_id = prepared[i].id;
                s.status = "error";
                s.message = e.what();
                s.cfg_hash = config_hash(cfg);
                outcome.summaries[i] = std::move(s);
                failures.fetch_add(1);
            }
        }
    };
    const int jobs = std::max(1, std::min<int>(cfg.jobs, static_cast<int>(prepared.size())));
    if (jobs <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    outcome.failures = failures.load() + static_cast<int>(failed.size());
    for (auto& f : failed) outcome.summaries.push_back(std::move(f));
    save_summary_csv(outcome.summaries, (fs::path(cfg.out_dir) / "summary.csv").string());
    return outcome;
}

struct AlignReport {
    StopReport es_report;
    long area_opt_iter = 0;
    double rel_gap = 0.0;
    bool monotone_trace = false;  // no post-minimum rise found
    std::vector<std::pair<long, double>> area_trace;
    TrainLog long_log;  // full no-ES trace (carries PSNR on synthetic runs)
};

// One run with ES, one without ES to the cap; locates the beam-area local
// minimum preceding the rise and reports the relative gap to the ES best
// iteration.
inline AlignReport run_align(const RunConfig& cfg) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);
    const detail::PreparedImage img =
        cfg.use_synthetic || cfg.inputs.empty() ? detail::prepare_synthetic(cfg)
                                                : detail::prepare_file(cfg, cfg.inputs.front());

    TrainConfig with_es = detail::effective_train_config(cfg);
    with_es.es.enabled = true;
    const TrainResult es_run = train<float>(img.noisy, with_es, img.gt ? &*img.gt : nullptr, {},
                                            cfg.engine_threads);

    TrainConfig no_es = with_es;
    no_es.es.enabled = false;
    no_es.max_iters = cfg.align_cap;
    const TrainResult long_run = train<float>(img.noisy, no_es, img.gt ? &*img.gt : nullptr, {},
                                              cfg.engine_threads);

    AlignReport rep;
    rep.es_report = es_run.report;
    rep.long_log = long_run.log;
    for (const auto& row : long_run.log.rows) rep.area_trace.emplace_back(row.iteration, row.beam_area);

    // Centered moving average (+-5 evaluations) over positive-area entries,
    // then the median iteration of the near-minimal plateau: the trace drops
    // as the beam emerges, sits in a stable shallow-sloped region, and rises
    // again as noise is reinjected.  The plateau center marks the physical
    // optimum; a 20% band captures the stable region without bleeding into
    // the reinjection ramp.
    constexpr double kPlateauBand = 0.20;
    std::vector<std::pair<long, double>> clean;
    for (const auto& [it, a] : rep.area_trace)
        if (a > 0.0) clean.emplace_back(it, a);
    if (clean.size() < 3) {
        rep.monotone_trace = true;
        rep.area_opt_iter = rep.area_trace.empty() ? 0 : rep.area_trace.back().first;
    } else {
        std::vector<double> smooth(clean.size());
        for (std::size_t i = 0; i < clean.size(); ++i) {
            const std::size_t b = i >= 5 ? i - 5 : 0;
            const std::size_t e = std::min(clean.size() - 1, i + 5);
            double acc = 0.0;
            for (std::size_t j = b; j <= e; ++j) acc += clean[j].second;
            smooth[i] = acc / static_cast<double>(e - b + 1);
        }
        std::size_t arg = 0;
        for (std::size_t i = 1; i < smooth.size(); ++i)
            if (smooth[i] < smooth[arg]) arg = i;
        std::vector<std::size_t> plateau;
        for (std::size_t i = 0; i < smooth.size(); ++i)
            if (smooth[i] <= smooth[arg] * (1.0 + kPlateauBand)) plateau.push_back(i);
        rep.area_opt_iter = clean[plateau[plateau.size() / 2]].first;
        double later_max = smooth[arg];
        for (std::size_t i = arg + 1; i < smooth.size(); ++i) later_max = std::max(later_max, smooth[i]);
        rep.monotone_trace = !(later_max > smooth[arg] * (1.0 + kPlateauBand));
    }
    rep.rel_gap = std::abs(static_cast<double>(rep.es_report.best_iter - rep.area_opt_iter)) /
                  std::max(1.0, static_cast<double>(rep.area_opt_iter));

    {
        std::ofstream out(fs::path(cfg.out_dir) / "beam_area_trace.csv", std::ios::binary);
        out << "schema_version,iteration,beam_area\n";
        for (const auto& [it, a] : rep.area_trace)
            out << kSchemaVersion << ',' << it << ',' << detail::fmt(a) << '\n';
    }
    {
        std::ofstream out(fs::path(cfg.out_dir) / "align_report.csv", std::ios::binary);
        out << "schema_version,es_best_iter,es_stop_iter,area_opt_iter,rel_gap,monotone_trace\n";
        out << kSchemaVersion << ',' << rep.es_report.best_iter << ',' << rep.es_report.stop_iter
            << ',' << rep.area_opt_iter << ',' << detail::fmt(rep.rel_gap) << ','
            << (rep.monotone_trace ? "true" : "false") << '\n';
    }
    return rep;
}

struct BenchmarkCell {
    double emittance_scale = 1.0;
    double peak_scale = 1.0;
    int grid = 128;
    double noise_std = 0.05;
    std::string status = "ok";
    double psnr_noisy = 0.0;
    double psnr_dip = 0.0;
    double psnr_median = 0.0;
    double eps_true = 0.0;
    double eps_raw = 0.0;
    double eps_median = 0.0;
    double eps_dip = 0.0;
};

namespace detail {

// Emittance measured over pixels at or above `fraction` of the max.
inline double masked_emittance(const ScanImage& img, double fraction) {
    const double peak = *std::max_element(img.intensities.begin(), img.intensities.end());
    if (!(peak > 0.0)) return 0.0;
    std::vector<std::uint8_t> mask(img.pixel_count());
    for (std::size_t i = 0; i < mask.size(); ++i)
        mask[i] = img.intensities[i] >= fraction * peak && img.intensities[i] > 0.0;
    try {
        return compute_stats(img, &mask).emittance_rms;
    } catch (const Error&) {
        return 0.0;
    }
}

}  // namespace detail

inline BenchmarkCell run_benchmark_cell(const RunConfig& cfg, double escale, double pscale,
                                        int grid, double noise_std) {
    BenchmarkCell cell;
    cell.emittance_scale = escale;
    cell.peak_scale = pscale;
    cell.grid = grid;
    cell.noise_std = noise_std;

    BeamSpec spec = cfg.beam;
    spec.emittance *= escale;
    spec.gamma = (1.0 + spec.alpha * spec.alpha) / spec.beta;
    spec.peak_intensity *= pscale;
    spec.rows = spec.cols = grid;
    const GroundTruth gt = generate_beam(spec);

    NoiseSpec noise = cfg.noise;
    noise.model = NoiseModel::gaussian_additive;
    noise.mean = 0.0;
    noise.std = noise_std * spec.peak_intensity;
    const ScanImage noisy_raw = add_noise(gt.clean, noise);
    const ScanImage noisy = shift_nonnegative(noisy_raw);
    const NormalizedImage noisy_norm = normalize(noisy);

    cell.psnr_noisy = psnr_physical(noisy_raw, gt.clean);
    const ScanImage median3 = median_filter(noisy_raw, 3);
    cell.psnr_median = psnr_physical(median3, gt.clean);

    const NormalizedImage gt_frame = detail::gt_in_frame(gt.clean, noisy, noisy_norm);
    const TrainConfig tcfg = detail::effective_train_config(cfg);
    const TrainResult res = train<float>(noisy_norm, tcfg, &gt_frame, {}, cfg.engine_threads);
    const ScanImage restored = detail::as_physical_scan(res.restored);
    cell.psnr_dip = psnr_physical(restored, gt.clean);

    const double f = cfg.bench_raw_threshold;
    cell.eps_true = detail::masked_emittance(gt.clean, f);
    cell.eps_raw = detail::masked_emittance(noisy, f);  // shifted, pedestal kept
    cell.eps_median = detail::masked_emittance(median3, f);
    cell.eps_dip = detail::masked_emittance(restored, f);
    return cell;
}

// Full sweep over the declared grid; individual cell failures are recorded
// and the sweep continues.
inline std::vector<BenchmarkCell> run_benchmark(const RunConfig& cfg) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);
    std::vector<BenchmarkCell> cells;
    for (double es : cfg.bench_emittance_scale)
        for (double ps : cfg.bench_peak_scale)
            for (int g : cfg.bench_grid)
                for (double ns : cfg.bench_noise_std) {
                    try {
                        cells.push_back(run_benchmark_cell(cfg, es, ps, g, ns));
                    } catch (const std::exception& e) {
                        BenchmarkCell c;
                        c.emittance_scale = es;
                        c.peak_scale = ps;
                        c.grid = g;
                        c.noise_std = ns;
                        c.status = std::string("error: ") + e.what();
                        cells.push_back(std::move(c));
                    }
                }
    std::ofstream out(fs::path(cfg.out_dir) / "benchmark.csv", std::ios::binary);
    out << "schema_version,emittance_scale,peak_scale,grid,noise_std,status,psnr_noisy,psnr_dip,"
           "psnr_median,gain_dip,gain_median,eps_true,eps_raw,eps_median,eps_dip,err_raw,"
           "err_median,err_dip\n";
    for (const auto& c : cells) {
        std::string status = c.status;
        for (char& ch : status)
            if (ch == ',' || ch == '\n') ch = ';';
        auto rel_err = [&](double eps) {
            return c.eps_true > 0.0 ? std::abs(eps - c.eps_true) / c.eps_true : 0.0;
        };
        out << kSchemaVersion << ',' << detail::fmt(c.emittance_scale) << ','
            << detail::fmt(c.peak_scale) << ',' << c.grid << ',' << detail::fmt(c.noise_std) << ','
            << status << ',' << detail::fmt(c.psnr_noisy) << ',' << detail::fmt(c.psnr_dip) << ','
            << detail::fmt(c.psnr_median) << ',' << detail::fmt(c.psnr_dip - c.psnr_noisy) << ','
            << detail::fmt(c.psnr_median - c.psnr_noisy) << ',' << detail::fmt(c.eps_true) << ','
            << detail::fmt(c.eps_raw) << ',' << detail::fmt(c.eps_median) << ','
            << detail::fmt(c.eps_dip) << ',' << detail::fmt(rel_err(c.eps_raw)) << ','
            << detail::fmt(rel_err(c.eps_median)) << ',' << detail::fmt(rel_err(c.eps_dip)) << '\n';
    }
    return cells;
}

struct TriageEntry {
    std::string file;
    bool accepted = false;
    std::string reason;
};

// Directory triage: manifest row per file, optional copy of accepted files.
inline std::vector<TriageEntry> run_triage(const RunConfig& cfg) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);
    std::vector<std::string> files;
    for (const auto& input : cfg.inputs) {
        const std::string resolved = resolve_input(cfg, input);
        if (fs::is_directory(resolved)) {
            for (const auto& entry : fs::directory_iterator(resolved)) {
                const auto ext = entry.path().extension();
                if (entry.is_regular_file() && (ext == ".csv" || ext == ".dat"))
                    files.push_back(entry.path().string());
            }
        } else {
            files.push_back(resolved);
        }
    }
    std::sort(files.begin(), files.end());

    std::vector<TriageEntry> entries;
    for (const auto& f : files) {
        TriageEntry e;
        e.file = f;
        try {
            const ScanImage img = load_scan(f, format_of(f));
            const TriageResult r = triage(img, cfg.triage_policy);
            e.accepted = r.accepted;
            e.reason = triage_reason_name(r.reason);
        } catch (const std::exception&) {
            e.accepted = false;
            e.reason = "unreadable";
        }
        if (e.accepted && cfg.triage_copy) {
            const fs::path dst = fs::path(cfg.out_dir) / "accepted" / fs::path(f).filename();
            fs::create_directories(dst.parent_path());
            fs::copy_file(f, dst, fs::copy_options::overwrite_existing);
        }
        entries.push_back(std::move(e));
    }
    std::ofstream out(fs::path(cfg.out_dir) / "manifest.csv", std::ios::binary);
    out << "schema_version,file,decision,reason\n";
    for (const auto& e : entries)
        out << kSchemaVersion << ',' << e.file << ',' << (e.accepted ? "accept" : "reject") << ','
            << e.reason << '\n';
    return entries;
}

// Generates a clean/noisy synthetic pair plus a small metadata file.
inline void run_synth(const RunConfig& cfg) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);
    const GroundTruth gt = generate_beam(cfg.beam);
    const ScanImage noisy = add_noise(gt.clean, cfg.noise);
    save_scan(gt.clean, (fs::path(cfg.out_dir) / "clean.csv").string());
    save_scan(noisy, (fs::path(cfg.out_dir) / "noisy.csv").string());
    if (cfg.export_heatmaps) {
        save_pgm(normalize(gt.clean), (fs::path(cfg.out_dir) / "clean.pgm").string());
        save_pgm(normalize(noisy), (fs::path(cfg.out_dir) / "noisy.pgm").string());
    }
    const PhaseSpaceStats s = compute_stats(gt.clean);
    std::ofstream out(fs::path(cfg.out_dir) / "meta.csv", std::ios::binary);
    out << "schema_version,spec_emittance,measured_emittance,alpha,beta,gamma,peak,halo_ratio,"
           "halo_scale,noise_model,config_hash\n";
    out << kSchemaVersion << ',' << detail::fmt(cfg.beam.emittance) << ','
        << detail::fmt(s.emittance_rms) << ',' << detail::fmt(cfg.beam.alpha) << ','
        << detail::fmt(cfg.beam.beta) << ',' << detail::fmt(cfg.beam.gamma) << ','
        << detail::fmt(cfg.beam.peak_intensity) << ','
        << detail::fmt(cfg.beam.halo_amplitude_ratio) << ','
        << detail::fmt(cfg.beam.halo_sigma_scale) << ',' << noise_model_name(cfg.noise.model) << ','
        << config_hash(cfg) << '\n';
}

}  // namespace beamdip

#endif  // BEAMDIP_PIPELINE_HPP
