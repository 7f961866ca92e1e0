/*
 * Synthetic ground-truth beams (bi-Gaussian core + scaled halo), parametric
 * noise corruption, and moment-matched noise-distribution fitting.
 *
 * Copyright 2026 the beamdip authors
 * Licensed under the terms of the Apache 2.0 License.
 * See LICENSE file in the project root for terms.
 */

#ifndef BEAMDIP_SYNTH_HPP
#define BEAMDIP_SYNTH_HPP

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "beamdip/core.hpp"
#include "beamdip/emittance.hpp"
#include "beamdip/image.hpp"

namespace beamdip {

// Phase-space beam description.  The grid spans center +/- span_sigmas in
// each coordinate's own sigma (sigma_x = sqrt(beta*eps), sigma_x' =
// sqrt(gamma*eps)); pixel coordinates are cell centers.
struct BeamSpec {
    double emittance = 0.5;  // mm*mrad
    double alpha = -0.4;
    double beta = 1.8;
    double gamma = 1.16 / 1.8;  // (1 + alpha^2) / beta
    double peak_intensity = 1.0;  // mV
    double halo_amplitude_ratio = 0.0;  // in [0, 1]
    double halo_sigma_scale = 2.5;      // >= 1
    int rows = 128;
    int cols = 128;
    double span_sigmas = 6.0;
    double center_x = 0.0;   // mm
    double center_xp = 0.0;  // mrad

    double sigma_x() const { return std::sqrt(beta * emittance); }
    double sigma_xp() const { return std::sqrt(gamma * emittance); }

    void validate() const {
        if (!(emittance > 0.0)) fail(errc::bad_params, "emittance must be positive");
        if (!(beta > 0.0) || !(gamma > 0.0)) fail(errc::bad_params, "beta and gamma must be positive");
        if (std::abs(beta * gamma - alpha * alpha - 1.0) > 1e-9)
            fail(errc::bad_params, "Twiss identity beta*gamma - alpha^2 == 1 violated");
        if (!(peak_intensity > 0.0)) fail(errc::bad_params, "peak_intensity must be positive");
        if (halo_amplitude_ratio < 0.0 || halo_amplitude_ratio > 1.0)
            fail(errc::bad_params, "halo_amplitude_ratio must lie in [0, 1]");
        if (halo_sigma_scale < 1.0) fail(errc::bad_params, "halo_sigma_scale must be >= 1");
        if (!(span_sigmas > 0.0)) fail(errc::bad_params, "span_sigmas must be positive");
    }
};

struct GroundTruth {
    ScanImage clean;
    BeamSpec spec;

    // Analytic mean intensity at elliptical radius r (sigma units).
    double radial_density(double r_sigma) const {
        const double core = std::exp(-0.5 * r_sigma * r_sigma);
        const double s2 = spec.halo_sigma_scale * spec.halo_sigma_scale;
        const double halo = std::exp(-0.5 * r_sigma * r_sigma / s2);
        return spec.peak_intensity * (core + spec.halo_amplitude_ratio * halo);
    }
};

// Evaluates peak * [exp(-q/(2 eps)) + halo_ratio * exp(-q/(2 eps s^2))] at
// pixel centers, q = gamma x^2 + 2 alpha x x' + beta x'^2 in centered
// coordinates.
inline GroundTruth generate_beam(const BeamSpec& spec) {
    spec.validate();
    if (spec.rows < 16 || spec.cols < 16) fail(errc::too_small, "grid must be at least 16x16");

    ScanImage img;
    img.rows = spec.rows;
    img.cols = spec.cols;
    const double half_x = spec.span_sigmas * spec.sigma_x();
    const double half_xp = spec.span_sigmas * spec.sigma_xp();
    img.x_origin = spec.center_x - half_x;
    img.x_step = 2.0 * half_x / (spec.cols - 1);
    img.xp_origin = spec.center_xp - half_xp;
    img.xp_step = 2.0 * half_xp / (spec.rows - 1);
    img.source_id = "synthetic";
    img.intensities.resize(img.pixel_count());

    const double inv_2eps = 0.5 / spec.emittance;
    const double s2 = spec.halo_sigma_scale * spec.halo_sigma_scale;
    std::size_t i = 0;
    for (int r = 0; r < spec.rows; ++r) {
        const double xp = img.xp_of(r) - spec.center_xp;
        for (int c = 0; c < spec.cols; ++c, ++i) {
            const double x = img.x_of(c) - spec.center_x;
            const double q = spec.gamma * x * x + 2.0 * spec.alpha * x * xp + spec.beta * xp * xp;
            const double core = std::exp(-q * inv_2eps);
            const double halo = spec.halo_amplitude_ratio > 0.0
                                    ? spec.halo_amplitude_ratio * std::exp(-q * inv_2eps / s2)
                                    : 0.0;
            img.intensities[i] = spec.peak_intensity * (core + halo);
        }
    }
    return {std::move(img), spec};
}

enum class NoiseModel { gaussian_additive, uniform_additive, salt_pepper, speckle, poisson };

inline const char* noise_model_name(NoiseModel m) {
    switch (m) {
        case NoiseModel::gaussian_additive: return "gaussian-additive";
        case NoiseModel::uniform_additive: return "uniform-additive";
        case NoiseModel::salt_pepper: return "salt-pepper";
        case NoiseModel::speckle: return "speckle";
        case NoiseModel::poisson: return "poisson";
    }
    return "unknown";
}

struct NoiseSpec {
    NoiseModel model = NoiseModel::gaussian_additive;
    double mean = 0.0;       // gaussian-additive offset
    double std = 0.05;       // gaussian-additive / speckle
    double amplitude = 0.05; // uniform-additive half-width
    double fraction = 0.01;  // salt-pepper corruption probability
    double scale = 0.01;     // poisson: intensity per count
    std::uint64_t seed = 0;

    void validate() const {
        switch (model) {
            case NoiseModel::gaussian_additive:
            case NoiseModel::speckle:
                if (std < 0.0) fail(errc::bad_params, "std must be nonnegative");
                break;
            case NoiseModel::uniform_additive:
                if (amplitude < 0.0) fail(errc::bad_params, "amplitude must be nonnegative");
                break;
            case NoiseModel::salt_pepper:
                if (fraction < 0.0 || fraction > 1.0)
                    fail(errc::bad_params, "fraction must lie in [0, 1]");
                break;
            case NoiseModel::poisson:
                if (!(scale > 0.0)) fail(errc::bad_params, "scale must be positive");
                break;
        }
    }
};

// Bit-reproducible for a fixed seed: pixels are visited in row-major order
// with one generator stream per call.
inline ScanImage add_noise(const ScanImage& img, const NoiseSpec& noise) {
    img.validate();
    noise.validate();
    ScanImage out = img;
    Rng rng(noise.seed, static_cast<std::uint64_t>(noise.model));
    switch (noise.model) {
        case NoiseModel::gaussian_additive:
            for (double& v : out.intensities) v += rng.normal(noise.mean, noise.std);
            break;
        case NoiseModel::uniform_additive:
            for (double& v : out.intensities) v += rng.uniform(-noise.amplitude, noise.amplitude);
            break;
        case NoiseModel::salt_pepper: {
            const auto [lo_it, hi_it] =
                std::minmax_element(img.intensities.begin(), img.intensities.end());
            const double lo = *lo_it, hi = *hi_it;
            for (double& v : out.intensities)
                if (rng.uniform() < noise.fraction) v = rng.uniform() < 0.5 ? lo : hi;
            break;
        }
        case NoiseModel::speckle:
            for (double& v : out.intensities) v *= 1.0 + rng.normal(0.0, noise.std);
            break;
        case NoiseModel::poisson:
            for (double& v : out.intensities)
                v = static_cast<double>(rng.poisson(std::max(v, 0.0) / noise.scale)) * noise.scale;
            break;
    }
    return out;
}

enum class FitFamily { gaussian, uniform, exponential, gamma, poisson };

inline const char* fit_family_name(FitFamily f) {
    switch (f) {
        case FitFamily::gaussian: return "gaussian";
        case FitFamily::uniform: return "uniform";
        case FitFamily::exponential: return "exponential";
        case FitFamily::gamma: return "gamma";
        case FitFamily::poisson: return "poisson";
    }
    return "unknown";
}

struct NoiseFit {
    FitFamily family;
    double p1 = 0.0;  // gaussian: mean | uniform: lo | exponential: rate | gamma: shape | poisson: rate
    double p2 = 0.0;  // gaussian: std  | uniform: hi | gamma: scale      | otherwise unused
    double gof = 0.0; // chi-square over 32 equal-probability bins
};

namespace detail {

// Regularized lower incomplete gamma P(a, x): series for x < a + 1,
// continued fraction otherwise.
inline double gamma_p(double a, double x) {
    if (x <= 0.0) return 0.0;
    if (x < a + 1.0) {
        double ap = a, sum = 1.0 / a, del = sum;
        for (int i = 0; i < 500; ++i) {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if (std::abs(del) < std::abs(sum) * 1e-15) break;
        }
        return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
    }
    double b = x + 1.0 - a, c = 1e308, d = 1.0 / b, h = d;
    for (int i = 1; i < 500; ++i) {
        const double an = -i * (i - a);
        b += 2.0;
        d = an * d + b;
        if (std::abs(d) < 1e-300) d = 1e-300;
        c = b + an / c;
        if (std::abs(c) < 1e-300) c = 1e-300;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < 1e-15) break;
    }
    return 1.0 - std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

inline double fit_cdf(const NoiseFit& fit, double x) {
    switch (fit.family) {
        case FitFamily::gaussian:
            return 0.5 * (1.0 + std::erf((x - fit.p1) / (fit.p2 * std::sqrt(2.0))));
        case FitFamily::uniform:
            if (x <= fit.p1) return 0.0;
            if (x >= fit.p2) return 1.0;
            return (x - fit.p1) / (fit.p2 - fit.p1);
        case FitFamily::exponential:
            return x <= 0.0 ? 0.0 : 1.0 - std::exp(-fit.p1 * x);
        case FitFamily::gamma:
            return x <= 0.0 ? 0.0 : gamma_p(fit.p1, x / fit.p2);
        case FitFamily::poisson:
            // Step CDF: P(K <= floor(x)) = Q(floor(x) + 1, lambda).
            return x < 0.0 ? 0.0 : 1.0 - gamma_p(std::floor(x) + 1.0, fit.p1);
    }
    return 0.0;
}

inline double fit_quantile(const NoiseFit& fit, double p, double lo, double hi) {
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        if (fit_cdf(fit, mid) < p)
            lo = mid;
        else
            hi = mid;
    }
    return 0.5 * (lo + hi);
}

}  // namespace detail

// Moment-matched fit plus a chi-square statistic over 32 equal-probability
// bins of the fitted distribution.  Positive-support families require
// nonnegative samples; shift first.
inline NoiseFit fit_noise_distribution(const std::vector<double>& samples, FitFamily family) {
    if (samples.size() < 30) fail(errc::bad_params, "need at least 30 samples");
    double mean = 0.0;
    for (double s : samples) mean += s;
    mean /= static_cast<double>(samples.size());
    double var = 0.0;
    for (double s : samples) var += (s - mean) * (s - mean);
    var /= static_cast<double>(samples.size());
    if (var == 0.0) fail(errc::degenerate_samples, "samples have zero variance");
    const double lo = *std::min_element(samples.begin(), samples.end());
    const bool positive_support = family == FitFamily::exponential ||
                                  family == FitFamily::gamma || family == FitFamily::poisson;
    if (positive_support && lo < 0.0)
        fail(errc::needs_shift, "positive-support family needs nonnegative samples");

    NoiseFit fit;
    fit.family = family;
    switch (family) {
        case FitFamily::gaussian:
            fit.p1 = mean;
            fit.p2 = std::sqrt(var);
            break;
        case FitFamily::uniform:
            fit.p1 = mean - std::sqrt(3.0 * var);
            fit.p2 = mean + std::sqrt(3.0 * var);
            break;
        case FitFamily::exponential:
            if (!(mean > 0.0)) fail(errc::degenerate_samples, "nonpositive mean");
            fit.p1 = 1.0 / mean;
            break;
        case FitFamily::gamma:
            if (!(mean > 0.0)) fail(errc::degenerate_samples, "nonpositive mean");
            fit.p1 = mean * mean / var;
            fit.p2 = var / mean;
            break;
        case FitFamily::poisson:
            if (!(mean > 0.0)) fail(errc::degenerate_samples, "nonpositive mean");
            fit.p1 = mean;
            break;
    }

    // Equal-probability bin edges by bisection on the fitted CDF.
    constexpr int kBins = 32;
    const double hi = *std::max_element(samples.begin(), samples.end());
    const double pad = 10.0 * (std::sqrt(var) + 1.0) + (hi - lo);
    std::vector<double> edges(kBins + 1);
    edges.front() = lo - pad;
    edges.back() = hi + pad;
    for (int j = 1; j < kBins; ++j)
        edges[j] = detail::fit_quantile(fit, static_cast<double>(j) / kBins, lo - pad, hi + pad);

    std::vector<std::size_t> counts(kBins, 0);
    for (double s : samples) {
        const auto it = std::upper_bound(edges.begin() + 1, edges.end() - 1, s);
        counts[static_cast<std::size_t>(it - (edges.begin() + 1))]++;
    }
    double chi2 = 0.0;
    const double n = static_cast<double>(samples.size());
    for (int j = 0; j < kBins; ++j) {
        const double p = detail::fit_cdf(fit, edges[j + 1]) - detail::fit_cdf(fit, edges[j]);
        if (p <= 1e-12) continue;
        const double expected = n * p;
        const double d = static_cast<double>(counts[j]) - expected;
        chi2 += d * d / expected;
    }
    fit.gof = chi2;
    return fit;
}

}  // namespace beamdip

#endif  // BEAMDIP_SYNTH_HPP
