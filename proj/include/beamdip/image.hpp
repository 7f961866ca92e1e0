/*
 * Scan-image ingestion, normalization, classical spatial filters and the
 * triage sorter.
 *
 * Copyright 2026 the beamdip authors
 * Licensed under the terms of the Apache 2.0 License.
 * See LICENSE file in the project root for terms.
 */

#ifndef BEAMDIP_IMAGE_HPP
#define BEAMDIP_IMAGE_HPP

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "beamdip/core.hpp"

namespace beamdip {

// Calibrated 2D intensity grid.  Columns map to position x (mm), rows map to
// divergence x' (mrad), intensities are in mV.  Coordinates of pixel (r, c)
// are cell centers: x = x_origin + c * x_step, x' = xp_origin + r * xp_step.
struct ScanImage {
    int rows = 0;
    int cols = 0;
    double x_origin = 0.0;
    double x_step = 1.0;
    double xp_origin = 0.0;
    double xp_step = 1.0;
    std::vector<double> intensities;  // row-major, rows*cols
    double shift_applied = 0.0;       // mV added by shift_nonnegative, 0 if none
    std::string source_id;

    double& at(int r, int c) { return intensities[static_cast<std::size_t>(r) * cols + c]; }
    double at(int r, int c) const { return intensities[static_cast<std::size_t>(r) * cols + c]; }

    std::size_t pixel_count() const { return static_cast<std::size_t>(rows) * cols; }

    double x_of(int c) const { return x_origin + c * x_step; }
    double xp_of(int r) const { return xp_origin + r * xp_step; }

    void validate() const {
        if (rows < 2 || cols < 2) fail(errc::too_small, "grid must be at least 2x2");
        if (!(x_step > 0.0) || !(xp_step > 0.0)) fail(errc::bad_params, "axis steps must be positive");
        if (intensities.size() != pixel_count()) fail(errc::bad_params, "intensity buffer size mismatch");
    }
};

// Axis calibration carried alongside normalized pixel values so downstream
// physics metrics can be evaluated without the original ScanImage.
struct AxisCal {
    double x_origin = 0.0;
    double x_step = 1.0;
    double xp_origin = 0.0;
    double xp_step = 1.0;
};

struct NormalizedImage {
    int rows = 0;
    int cols = 0;
    std::vector<double> values;  // in [0, 1]
    double orig_min = 0.0;
    double orig_max = 0.0;
    bool degenerate = false;    // max == min
    double phys_offset = 0.0;   // shift_applied of the source grid; subtract to
                                // recover physical intensities
    AxisCal axes;

    std::size_t pixel_count() const { return static_cast<std::size_t>(rows) * cols; }

    // Physical (unshifted) intensity of pixel i.
    double physical(std::size_t i) const {
        return orig_min + values[i] * (orig_max - orig_min) - phys_offset;
    }
};

enum class GridFormat { csv, dat };

// Reflection index without edge repeat: -1 -> 1, n -> n-2.  Folds repeatedly
// so radii larger than the image still map inside.
inline int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * n - 2;
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

namespace detail {

inline std::string format_value(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline double parse_value(const std::string& tok, int line_no) {
    const char* begin = tok.c_str();
    char* end = nullptr;
    const double v = std::strtod(begin, &end);
    while (end && *end && std::isspace(static_cast<unsigned char>(*end))) ++end;
    if (end == begin || (end && *end != '\0'))
        fail(errc::parse_error, "non-numeric cell '" + tok + "' at line " + std::to_string(line_no));
    return v;
}

inline std::vector<std::string> split_fields(const std::string& line, bool whitespace) {
    std::vector<std::string> out;
    if (whitespace) {
        std::istringstream ss(line);
        std::string tok;
        while (ss >> tok) out.push_back(tok);
    } else {
        std::string tok;
        std::istringstream ss(line);
        while (std::getline(ss, tok, ',')) out.push_back(tok);
        if (!line.empty() && line.back() == ',') out.emplace_back();
    }
    return out;
}

inline std::string sanitize_id(const std::string& id) {
    std::string out = id;
    for (char& ch : out)
        if (ch == ',' || std::isspace(static_cast<unsigned char>(ch))) ch = '_';
    return out.empty() ? std::string("unnamed") : out;
}

}  // namespace detail

// Header line carries, in order:
//   rows, cols, x_origin, x_step, xp_origin, xp_step, shift_applied, source_id
// followed by `rows` lines of `cols` intensities.  The .dat layout is the
// same with whitespace separators.
inline void save_scan(const ScanImage& img, const std::string& path,
                      GridFormat fmt = GridFormat::csv) {
    img.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(errc::io_error, "cannot open for writing: " + path);
    const char sep = fmt == GridFormat::csv ? ',' : ' ';
    out << img.rows << sep << img.cols << sep << detail::format_value(img.x_origin) << sep
        << detail::format_value(img.x_step) << sep << detail::format_value(img.xp_origin) << sep
        << detail::format_value(img.xp_step) << sep << detail::format_value(img.shift_applied)
        << sep << detail::sanitize_id(img.source_id) << "\n";
    for (int r = 0; r < img.rows; ++r) {
        for (int c = 0; c < img.cols; ++c) {
            if (c) out << sep;
            out << detail::format_value(img.at(r, c));
        }
        out << "\n";
    }
    if (!out) fail(errc::io_error, "write failed: " + path);
}

inline ScanImage load_scan(const std::string& path, GridFormat fmt = GridFormat::csv) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(errc::io_error, "cannot open: " + path);
    const bool ws = fmt == GridFormat::dat;

    std::string line;
    if (!std::getline(in, line)) fail(errc::malformed_file, "empty file at line 1: " + path);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto header = detail::split_fields(line, ws);
    if (header.size() < 8)
        fail(errc::malformed_file, "header needs 8 fields at line 1, got " +
                                       std::to_string(header.size()));

    ScanImage img;
    img.rows = static_cast<int>(detail::parse_value(header[0], 1));
    img.cols = static_cast<int>(detail::parse_value(header[1], 1));
    if (img.rows < 2 || img.cols < 2) fail(errc::too_small, "grid must be at least 2x2");
    img.x_origin = detail::parse_value(header[2], 1);
    img.x_step = detail::parse_value(header[3], 1);
    img.xp_origin = detail::parse_value(header[4], 1);
    img.xp_step = detail::parse_value(header[5], 1);
    img.shift_applied = detail::parse_value(header[6], 1);
    img.source_id = header[7];

    img.intensities.reserve(img.pixel_count());
    for (int r = 0; r < img.rows; ++r) {
        const int line_no = r + 2;
        if (!std::getline(in, line))
            fail(errc::malformed_file, "missing row at line " + std::to_string(line_no));
        if (!line.empty() && line.back() == '\r') line.pop_back();
        auto cells = detail::split_fields(line, ws);
        if (static_cast<int>(cells.size()) != img.cols)
            fail(errc::malformed_file, "expected " + std::to_string(img.cols) + " cells, got " +
                                           std::to_string(cells.size()) + " at line " +
                                           std::to_string(line_no));
        for (const auto& cell : cells) img.intensities.push_back(detail::parse_value(cell, line_no));
    }
    img.validate();
    return img;
}

// Translates the grid so its minimum is exactly zero and records the offset.
// Idempotent: a second application adds shift 0 and keeps shift_applied.
inline ScanImage shift_nonnegative(const ScanImage& img) {
    ScanImage out = img;
    const double lo = *std::min_element(img.intensities.begin(), img.intensities.end());
    if (lo < 0.0) {
        const double shift = -lo;
        // v + (-lo) is exact at the minimum and never rounds negative elsewhere.
        for (double& v : out.intensities) v += shift;
        out.shift_applied = img.shift_applied + shift;
    }
    return out;
}

inline NormalizedImage normalize(const ScanImage& img) {
    img.validate();
    NormalizedImage out;
    out.rows = img.rows;
    out.cols = img.cols;
    out.phys_offset = img.shift_applied;
    out.axes = {img.x_origin, img.x_step, img.xp_origin, img.xp_step};
    const auto [lo_it, hi_it] = std::minmax_element(img.intensities.begin(), img.intensities.end());
    out.orig_min = *lo_it;
    out.orig_max = *hi_it;
    out.values.resize(img.pixel_count());
    if (out.orig_max == out.orig_min) {
        out.degenerate = true;
        std::fill(out.values.begin(), out.values.end(), 0.0);
        return out;
    }
    const double inv = 1.0 / (out.orig_max - out.orig_min);
    for (std::size_t i = 0; i < out.values.size(); ++i)
        out.values[i] = (img.intensities[i] - out.orig_min) * inv;
    return out;
}

// Inverse of normalize; degenerate images map back to the constant orig_min.
inline ScanImage denormalize(const NormalizedImage& norm, const std::string& source_id = "") {
    ScanImage out;
    out.rows = norm.rows;
    out.cols = norm.cols;
    out.x_origin = norm.axes.x_origin;
    out.x_step = norm.axes.x_step;
    out.xp_origin = norm.axes.xp_origin;
    out.xp_step = norm.axes.xp_step;
    out.source_id = source_id;
    out.intensities.resize(norm.pixel_count());
    const double span = norm.orig_max - norm.orig_min;
    for (std::size_t i = 0; i < out.intensities.size(); ++i)
        out.intensities[i] = norm.orig_min + norm.values[i] * span;
    return out;
}

// Round-half-away-from-zero, then clamp to [0, 255].
inline std::vector<std::uint8_t> to_uint8(const NormalizedImage& img) {
    std::vector<std::uint8_t> out(img.values.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = img.values[i] * 255.0;
        const double r = v >= 0.0 ? std::floor(v + 0.5) : std::ceil(v - 0.5);
        out[i] = static_cast<std::uint8_t>(std::clamp(r, 0.0, 255.0));
    }
    return out;
}

enum class ProfileAxis { position, angle };

// Marginal sum over the other axis; optionally peak-normalized to 1.
inline std::vector<double> extract_profile(const ScanImage& img, ProfileAxis axis,
                                           bool normalize_peak = false) {
    img.validate();
    std::vector<double> prof;
    if (axis == ProfileAxis::position) {
        prof.assign(img.cols, 0.0);
        for (int r = 0; r < img.rows; ++r)
            for (int c = 0; c < img.cols; ++c) prof[c] += img.at(r, c);
    } else {
        prof.assign(img.rows, 0.0);
        for (int r = 0; r < img.rows; ++r)
            for (int c = 0; c < img.cols; ++c) prof[r] += img.at(r, c);
    }
    if (normalize_peak) {
        const double peak = *std::max_element(prof.begin(), prof.end());
        if (peak == 0.0) fail(errc::zero_profile, "cannot peak-normalize an all-zero profile");
        for (double& v : prof) v /= peak;
    }
    return prof;
}

// Exact k x k median with reflected borders.
inline ScanImage median_filter(const ScanImage& img, int k) {
    img.validate();
    if (k < 3 || k % 2 == 0) fail(errc::bad_window, "window must be odd and >= 3");
    ScanImage out = img;
    const int half = k / 2;
    std::vector<double> window;
    window.reserve(static_cast<std::size_t>(k) * k);
    for (int r = 0; r < img.rows; ++r) {
        for (int c = 0; c < img.cols; ++c) {
            window.clear();
            for (int dr = -half; dr <= half; ++dr)
                for (int dc = -half; dc <= half; ++dc)
                    window.push_back(
                        img.at(reflect_index(r + dr, img.rows), reflect_index(c + dc, img.cols)));
            auto mid = window.begin() + window.size() / 2;
            std::nth_element(window.begin(), mid, window.end());
            out.at(r, c) = *mid;
        }
    }
    return out;
}

// Separable Gaussian smoothing, kernel radius ceil(3*sigma), reflected
// borders, 1D taps normalized to sum 1.
inline ScanImage gaussian_filter(const ScanImage& img, double sigma) {
    img.validate();
    if (!(sigma > 0.0)) fail(errc::bad_sigma, "sigma must be positive");
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> taps(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        taps[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        sum += taps[i + radius];
    }
    for (double& t : taps) t /= sum;

    ScanImage tmp = img;
    for (int r = 0; r < img.rows; ++r)
        for (int c = 0; c < img.cols; ++c) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += taps[i + radius] * img.at(r, reflect_index(c + i, img.cols));
            tmp.at(r, c) = acc;
        }
    ScanImage out = tmp;
    for (int r = 0; r < img.rows; ++r)
        for (int c = 0; c < img.cols; ++c) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += taps[i + radius] * tmp.at(reflect_index(r + i, img.rows), c);
            out.at(r, c) = acc;
        }
    return out;
}

// Pixels below the threshold go to zero; the rest pass through.
inline ScanImage threshold_denoise(const ScanImage& img, double threshold) {
    ScanImage out = img;
    for (double& v : out.intensities)
        if (v < threshold) v = 0.0;
    return out;
}

struct TriagePolicy {
    double min_peak_median_ratio = 5.0;
    double max_centroid_offset = 0.25;  // fraction of half-extent, per axis
    double occupied_fraction = 0.01;    // of max intensity
    std::size_t min_occupied_pixels = 50;
};

enum class TriageReason { accepted, no_beam, off_center, too_small };

inline const char* triage_reason_name(TriageReason r) {
    switch (r) {
        case TriageReason::accepted: return "accepted";
        case TriageReason::no_beam: return "no-beam";
        case TriageReason::off_center: return "off-center";
        case TriageReason::too_small: return "too-small";
    }
    return "unknown";
}

struct TriageResult {
    bool accepted = false;
    TriageReason reason = TriageReason::accepted;
};

// Deterministic accept/reject.  Checks run in order: no-beam (peak/median),
// off-center (intensity centroid vs grid center), too-small (occupied pixel
// count).  Analysis runs on an internally shifted copy.
inline TriageResult triage(const ScanImage& img, const TriagePolicy& policy = {}) {
    img.validate();
    const ScanImage shifted = shift_nonnegative(img);

    std::vector<double> sorted = shifted.intensities;
    std::sort(sorted.begin(), sorted.end());
    const double median = sorted[sorted.size() / 2];
    const double peak = sorted.back();
    if (peak <= 0.0) return {false, TriageReason::no_beam};
    const double ratio = median > 0.0 ? peak / median : std::numeric_limits<double>::infinity();
    if (ratio < policy.min_peak_median_ratio) return {false, TriageReason::no_beam};

    double total = 0.0, cx = 0.0, cxp = 0.0;
    for (int r = 0; r < shifted.rows; ++r)
        for (int c = 0; c < shifted.cols; ++c) {
            const double w = shifted.at(r, c);
            total += w;
            cx += w * shifted.x_of(c);
            cxp += w * shifted.xp_of(r);
        }
    if (total <= 0.0) return {false, TriageReason::no_beam};
    cx /= total;
    cxp /= total;
    const double half_x = 0.5 * (shifted.cols - 1) * shifted.x_step;
    const double half_xp = 0.5 * (shifted.rows - 1) * shifted.xp_step;
    const double mid_x = shifted.x_origin + half_x;
    const double mid_xp = shifted.xp_origin + half_xp;
    const double off_x = half_x > 0.0 ? std::abs(cx - mid_x) / half_x : 0.0;
    const double off_xp = half_xp > 0.0 ? std::abs(cxp - mid_xp) / half_xp : 0.0;
    if (std::max(off_x, off_xp) > policy.max_centroid_offset)
        return {false, TriageReason::off_center};

    const double floor = policy.occupied_fraction * peak;
    std::size_t occupied = 0;
    for (double v : shifted.intensities)
        if (v >= floor) ++occupied;
    if (occupied < policy.min_occupied_pixels) return {false, TriageReason::too_small};

    return {true, TriageReason::accepted};
}

}  // namespace beamdip

#endif  // BEAMDIP_IMAGE_HPP
