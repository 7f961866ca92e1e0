/*
 * Weighted phase-space moments, RMS emittance, Twiss parameters, ellipse
 * geometry and the beam-area training metric.
 *
 * Copyright 2026 the beamdip authors
 * Licensed under the terms of the Apache 2.0 License.
 * See LICENSE file in the project root for terms.
 */

#ifndef BEAMDIP_EMITTANCE_HPP
#define BEAMDIP_EMITTANCE_HPP

#include <cmath>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "beamdip/core.hpp"
#include "beamdip/image.hpp"

namespace beamdip {

struct PhaseSpaceStats {
    double mean_x = 0.0;    // mm
    double mean_xp = 0.0;   // mrad
    double var_x = 0.0;     // mm^2
    double var_xp = 0.0;    // mrad^2
    double cov_xxp = 0.0;   // mm*mrad (signed; stored directly, never rooted)
    double sigma_x = 0.0;   // mm
    double sigma_xp = 0.0;  // mrad
    double emittance_rms = 0.0;  // mm*mrad
    double total_intensity = 0.0;
};

struct TwissTriple {
    double alpha = 0.0;
    double beta = 1.0;
    double gamma = 1.0;
};

// Intensity-weighted first and second moments over the included pixels at
// their physical cell-center coordinates.  Negative discriminants from
// floating-point cancellation clamp the emittance to zero.
inline PhaseSpaceStats compute_stats(const ScanImage& img,
                                     const std::vector<std::uint8_t>* mask = nullptr) {
    img.validate();
    if (mask && mask->size() != img.pixel_count())
        fail(errc::shape_error, "mask size does not match image");

    double w_sum = 0.0, x_sum = 0.0, xp_sum = 0.0;
    double xx_sum = 0.0, xpxp_sum = 0.0, xxp_sum = 0.0;
    std::size_t i = 0;
    for (int r = 0; r < img.rows; ++r) {
        const double xp = img.xp_of(r);
        for (int c = 0; c < img.cols; ++c, ++i) {
            if (mask && !(*mask)[i]) continue;
            const double w = img.intensities[i];
            if (w == 0.0) continue;
            if (w < 0.0) fail(errc::bad_params, "compute_stats requires nonnegative intensities");
            const double x = img.x_of(c);
            w_sum += w;
            x_sum += w * x;
            xp_sum += w * xp;
            xx_sum += w * x * x;
            xpxp_sum += w * xp * xp;
            xxp_sum += w * x * xp;
        }
    }
    if (w_sum <= 0.0) fail(errc::empty_beam, "zero total intensity");

    PhaseSpaceStats s;
    s.total_intensity = w_sum;
    s.mean_x = x_sum / w_sum;
    s.mean_xp = xp_sum / w_sum;
    s.var_x = std::max(0.0, xx_sum / w_sum - s.mean_x * s.mean_x);
    s.var_xp = std::max(0.0, xpxp_sum / w_sum - s.mean_xp * s.mean_xp);
    s.cov_xxp = xxp_sum / w_sum - s.mean_x * s.mean_xp;
    s.sigma_x = std::sqrt(s.var_x);
    s.sigma_xp = std::sqrt(s.var_xp);
    s.emittance_rms = std::sqrt(std::max(0.0, s.var_x * s.var_xp - s.cov_xxp * s.cov_xxp));
    return s;
}

inline TwissTriple twiss(const PhaseSpaceStats& s) {
    if (!(s.emittance_rms > 0.0)) fail(errc::degenerate_emittance, "emittance is zero");
    return {-s.cov_xxp / s.emittance_rms, s.var_x / s.emittance_rms, s.var_xp / s.emittance_rms};
}

// Area of the N-sigma ellipse: pi * N^2 * emittance.
inline double ellipse_area(double emittance, double n_sigma) {
    if (emittance < 0.0) fail(errc::bad_params, "emittance must be nonnegative");
    if (!(n_sigma > 0.0)) fail(errc::bad_params, "n_sigma must be positive");
    return M_PI * n_sigma * n_sigma * emittance;
}

// Samples the contour gamma*x^2 + 2*alpha*x*x' + beta*x'^2 = N^2 * eps,
// centered at (cx, cxp).  Every vertex satisfies the quadratic form exactly
// (parametrization x = N*sqrt(eps*beta)*cos, x' = N*sqrt(eps/beta)*(sin - alpha*cos)).
inline std::vector<std::pair<double, double>> nsigma_contour(const TwissTriple& tw,
                                                             double emittance, double n_sigma,
                                                             int points, double cx = 0.0,
                                                             double cxp = 0.0) {
    if (!(emittance > 0.0) || !(tw.beta > 0.0))
        fail(errc::degenerate_emittance, "contour requires positive emittance and beta");
    if (points < 8) fail(errc::bad_params, "need at least 8 contour points");
    std::vector<std::pair<double, double>> out;
    out.reserve(points);
    const double a = n_sigma * std::sqrt(emittance * tw.beta);
    const double b = n_sigma * std::sqrt(emittance / tw.beta);
    for (int i = 0; i < points; ++i) {
        const double phi = 2.0 * M_PI * i / points;
        const double c = std::cos(phi), s = std::sin(phi);
        out.emplace_back(cx + a * c, cxp + b * (s - tw.alpha * c));
    }
    return out;
}

struct RadialProfile {
    std::vector<double> r_centers;                // sigma units
    std::vector<std::optional<double>> mean_intensity;  // absent for empty bins
};

// Bins pixels by the elliptical radius r = sqrt((g x^2 + 2a x x' + b x'^2)/eps)
// measured from the beam centroid; reports per-bin mean intensity.
inline RadialProfile radial_profile(const ScanImage& img, const PhaseSpaceStats& stats,
                                    const TwissTriple& tw, int bins, double r_max) {
    img.validate();
    if (!(stats.emittance_rms > 0.0)) fail(errc::degenerate_emittance, "emittance is zero");
    if (bins < 4) fail(errc::bad_params, "need at least 4 bins");
    if (!(r_max > 0.0)) fail(errc::bad_params, "r_max must be positive");

    RadialProfile prof;
    prof.r_centers.resize(bins);
    prof.mean_intensity.assign(bins, std::nullopt);
    std::vector<double> sums(bins, 0.0);
    std::vector<std::size_t> counts(bins, 0);
    const double bin_w = r_max / bins;
    for (int i = 0; i < bins; ++i) prof.r_centers[i] = (i + 0.5) * bin_w;

    for (int r = 0; r < img.rows; ++r) {
        const double xp = img.xp_of(r) - stats.mean_xp;
        for (int c = 0; c < img.cols; ++c) {
            const double x = img.x_of(c) - stats.mean_x;
            const double q = tw.gamma * x * x + 2.0 * tw.alpha * x * xp + tw.beta * xp * xp;
            const double rad = std::sqrt(std::max(0.0, q / stats.emittance_rms));
            if (rad >= r_max) continue;
            const int bin = std::min(bins - 1, static_cast<int>(rad / bin_w));
            sums[bin] += img.at(r, c);
            ++counts[bin];
        }
    }
    for (int i = 0; i < bins; ++i)
        if (counts[i] > 0) prof.mean_intensity[i] = sums[i] / counts[i];
    return prof;
}

// Training-loop safe beam-area index: stats restricted to pixels at or above
// a fraction of the max, then pi * emittance.  Returns 0 instead of erroring
// on empty/degenerate input.
inline double beam_area_metric(const ScanImage& img, double area_threshold_fraction = 0.01) {
    if (img.rows < 2 || img.cols < 2 || img.intensities.size() != img.pixel_count()) return 0.0;
    const double peak = *std::max_element(img.intensities.begin(), img.intensities.end());
    if (!(peak > 0.0)) return 0.0;
    const double floor = area_threshold_fraction * peak;
    std::vector<std::uint8_t> mask(img.pixel_count());
    for (std::size_t i = 0; i < mask.size(); ++i)
        mask[i] = img.intensities[i] >= floor && img.intensities[i] > 0.0;
    try {
        const PhaseSpaceStats s = compute_stats(img, &mask);
        return M_PI * s.emittance_rms;
    } catch (const Error&) {
        return 0.0;
    }
}

}  // namespace beamdip

#endif  // BEAMDIP_EMITTANCE_HPP
