/*
 * Composite training loss (weighted MSE + MAE + TV + GDL) with mask support,
 * plus the no-reference statistical metrics and PSNR.
 *
 * Copyright 2026 the beamdip authors
 * Licensed under the terms of the Apache 2.0 License.
 * See LICENSE file in the project root for terms.
 */

#ifndef BEAMDIP_LOSSES_HPP
#define BEAMDIP_LOSSES_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <utility>
#include <vector>

#include "beamdip/autodiff.hpp"
#include "beamdip/core.hpp"
#include "beamdip/image.hpp"

namespace beamdip {

struct LossWeights {
    double w_mse = 1.0;
    double w_mae = 0.5;
    double w_tv = 0.05;
    double w_gd = 0.1;

    void validate() const {
        if (w_mse < 0.0 || w_mae < 0.0 || w_tv < 0.0 || w_gd < 0.0)
            fail(errc::bad_params, "loss weights must be nonnegative");
        if (w_mse + w_mae + w_tv + w_gd <= 0.0)
            fail(errc::bad_params, "at least one loss weight must be positive");
    }
};

struct LossBreakdown {
    double mse = 0.0;
    double mae = 0.0;
    double tv = 0.0;
    double gdl = 0.0;
    double total = 0.0;
};

// w = floor + (1 - floor) * v: bright pixels approach weight 1, background
// stays at the floor.
inline std::vector<double> weight_map(const NormalizedImage& target, double floor) {
    if (floor < 0.0 || floor >= 1.0) fail(errc::bad_params, "floor must lie in [0, 1)");
    std::vector<double> w(target.values.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = floor + (1.0 - floor) * target.values[i];
    return w;
}

// Differentiable composite loss over the masked pixels of `out`:
//   mse  = mean over masked pixels of w * (out - target)^2
//   mae  = mean over masked pixels of |out - target|
//   tv   = mean over masked-adjacent forward-difference pairs of |d out|
//   gdl  = mean over the same pairs of |d out - d target|
// Pairs require both endpoints masked.  All accumulation in double.
template <class T>
inline std::pair<Var, LossBreakdown> composite_loss(Tape<T>& tape, Var out,
                                                    const std::vector<T>& target,
                                                    const std::vector<double>& pixel_weights,
                                                    const std::vector<std::uint8_t>& mask,
                                                    const LossWeights& lw, int rows, int cols) {
    lw.validate();
    const auto& os = tape.shape(out);
    std::size_t numel = 1;
    for (int d : os) numel *= static_cast<std::size_t>(d);
    const std::size_t n_px = static_cast<std::size_t>(rows) * cols;
    if (numel != n_px || target.size() != n_px || mask.size() != n_px ||
        pixel_weights.size() != n_px)
        fail(errc::shape_error, "composite_loss size mismatch");

    std::size_t n_mask = 0;
    for (auto m : mask) n_mask += m ? 1 : 0;
    if (n_mask == 0) fail(errc::empty_mask, "no pixels selected");

    std::size_t n_pairs = 0;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            const std::size_t i = static_cast<std::size_t>(r) * cols + c;
            if (!mask[i]) continue;
            if (c + 1 < cols && mask[i + 1]) ++n_pairs;
            if (r + 1 < rows && mask[i + cols]) ++n_pairs;
        }

    const auto& ov = tape.value(out);
    double mse = 0.0, mae = 0.0;
    for (std::size_t i = 0; i < n_px; ++i) {
        if (!mask[i]) continue;
        const double d = static_cast<double>(ov[i]) - static_cast<double>(target[i]);
        mse += pixel_weights[i] * d * d;
        mae += std::abs(d);
    }
    mse /= static_cast<double>(n_mask);
    mae /= static_cast<double>(n_mask);

    double tv = 0.0, gdl = 0.0;
    if (n_pairs > 0) {
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) {
                const std::size_t i = static_cast<std::size_t>(r) * cols + c;
                if (!mask[i]) continue;
                if (c + 1 < cols && mask[i + 1]) {
                    const double d_out = static_cast<double>(ov[i + 1]) - static_cast<double>(ov[i]);
                    const double d_tgt =
                        static_cast<double>(target[i + 1]) - static_cast<double>(target[i]);
                    tv += std::abs(d_out);
                    gdl += std::abs(d_out - d_tgt);
                }
                if (r + 1 < rows && mask[i + cols]) {
                    const double d_out =
                        static_cast<double>(ov[i + cols]) - static_cast<double>(ov[i]);
                    const double d_tgt =
                        static_cast<double>(target[i + cols]) - static_cast<double>(target[i]);
                    tv += std::abs(d_out);
                    gdl += std::abs(d_out - d_tgt);
                }
            }
        tv /= static_cast<double>(n_pairs);
        gdl /= static_cast<double>(n_pairs);
    }

    LossBreakdown bd;
    bd.mse = mse;
    bd.mae = mae;
    bd.tv = tv;
    bd.gdl = gdl;
    bd.total = lw.w_mse * mse + lw.w_mae * mae + lw.w_tv * tv + lw.w_gd * gdl;

    // Shared context for the backward pass.
    struct Ctx {
        std::vector<T> target;
        std::vector<double> weights;
        std::vector<std::uint8_t> mask;
        LossWeights lw;
        int rows, cols;
        std::size_t n_mask, n_pairs;
    };
    auto ctx = std::make_shared<Ctx>(Ctx{target, pixel_weights, mask, lw, rows, cols, n_mask, n_pairs});
    const int out_idx = out.idx;

    Var total = tape.custom(
        {1}, {static_cast<T>(bd.total)}, {out_idx},
        [ctx, out_idx](Tape<T>& tp, const std::vector<T>& self_grad) {
            if (!tp.needs_grad(Var{out_idx})) return;
            const double g = static_cast<double>(self_grad[0]);
            if (g == 0.0) return;
            const auto& ov = tp.value(Var{out_idx});
            auto& dout = tp.grad(Var{out_idx});
            const double inv_mask = 1.0 / static_cast<double>(ctx->n_mask);
            const double inv_pairs = ctx->n_pairs ? 1.0 / static_cast<double>(ctx->n_pairs) : 0.0;
            const int rows = ctx->rows, cols = ctx->cols;
            auto sgn = [](double v) { return v > 0.0 ? 1.0 : v < 0.0 ? -1.0 : 0.0; };
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c) {
                    const std::size_t i = static_cast<std::size_t>(r) * cols + c;
                    if (!ctx->mask[i]) continue;
                    const double d =
                        static_cast<double>(ov[i]) - static_cast<double>(ctx->target[i]);
                    double gi = ctx->lw.w_mse * 2.0 * ctx->weights[i] * d * inv_mask +
                                ctx->lw.w_mae * sgn(d) * inv_mask;
                    dout[i] += static_cast<T>(g * gi);
                    if (c + 1 < cols && ctx->mask[i + 1]) {
                        const double d_out =
                            static_cast<double>(ov[i + 1]) - static_cast<double>(ov[i]);
                        const double d_tgt = static_cast<double>(ctx->target[i + 1]) -
                                             static_cast<double>(ctx->target[i]);
                        const double s_tv = ctx->lw.w_tv * sgn(d_out) * inv_pairs;
                        const double s_gd = ctx->lw.w_gd * sgn(d_out - d_tgt) * inv_pairs;
                        dout[i + 1] += static_cast<T>(g * (s_tv + s_gd));
                        dout[i] -= static_cast<T>(g * (s_tv + s_gd));
                    }
                    if (r + 1 < rows && ctx->mask[i + cols]) {
                        const double d_out =
                            static_cast<double>(ov[i + cols]) - static_cast<double>(ov[i]);
                        const double d_tgt = static_cast<double>(ctx->target[i + cols]) -
                                             static_cast<double>(ctx->target[i]);
                        const double s_tv = ctx->lw.w_tv * sgn(d_out) * inv_pairs;
                        const double s_gd = ctx->lw.w_gd * sgn(d_out - d_tgt) * inv_pairs;
                        dout[i + cols] += static_cast<T>(g * (s_tv + s_gd));
                        dout[i] -= static_cast<T>(g * (s_tv + s_gd));
                    }
                }
        });
    return {total, bd};
}

// Entropy (bits) of the 256-level histogram of the uint8 quantization.
inline double shannon_entropy(const NormalizedImage& img) {
    const auto bytes = to_uint8(img);
    if (bytes.empty()) return 0.0;
    std::array<std::size_t, 256> hist{};
    for (auto b : bytes) ++hist[b];
    const double n = static_cast<double>(bytes.size());
    double h = 0.0;
    for (std::size_t count : hist) {
        if (count == 0) continue;
        const double p = static_cast<double>(count) / n;
        h -= p * std::log2(p);
    }
    return h;
}

namespace detail {

// 3x3 correlation with reflected borders, on raw float values.
inline std::vector<double> correlate3(const std::vector<double>& v, int rows, int cols,
                                      const std::array<double, 9>& k) {
    std::vector<double> out(v.size());
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            double acc = 0.0;
            for (int dr = -1; dr <= 1; ++dr)
                for (int dc = -1; dc <= 1; ++dc)
                    acc += k[static_cast<std::size_t>(dr + 1) * 3 + (dc + 1)] *
                           v[static_cast<std::size_t>(reflect_index(r + dr, rows)) * cols +
                             reflect_index(c + dc, cols)];
            out[static_cast<std::size_t>(r) * cols + c] = acc;
        }
    return out;
}

}  // namespace detail

// Variance of the 4-neighbor Laplacian response.
inline double laplacian_variance(const NormalizedImage& img) {
    static constexpr std::array<double, 9> kLap{0, 1, 0, 1, -4, 1, 0, 1, 0};
    const auto resp = detail::correlate3(img.values, img.rows, img.cols, kLap);
    double mean = 0.0;
    for (double v : resp) mean += v;
    mean /= static_cast<double>(resp.size());
    double var = 0.0;
    for (double v : resp) var += (v - mean) * (v - mean);
    return var / static_cast<double>(resp.size());
}

// Sum over pixels of Gx^2 + Gy^2 with 3x3 Sobel kernels.
inline double tenengrad(const NormalizedImage& img) {
    static constexpr std::array<double, 9> kSx{-1, 0, 1, -2, 0, 2, -1, 0, 1};
    static constexpr std::array<double, 9> kSy{-1, -2, -1, 0, 0, 0, 1, 2, 1};
    const auto gx = detail::correlate3(img.values, img.rows, img.cols, kSx);
    const auto gy = detail::correlate3(img.values, img.rows, img.cols, kSy);
    double acc = 0.0;
    for (std::size_t i = 0; i < gx.size(); ++i) acc += gx[i] * gx[i] + gy[i] * gy[i];
    return acc;
}

// 10 * log10(1 / MSE) with peak 1.0; identical images return +inf.
inline double psnr(const NormalizedImage& a, const NormalizedImage& b) {
    if (a.rows != b.rows || a.cols != b.cols) fail(errc::shape_error, "psnr shape mismatch");
    double mse = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        const double d = a.values[i] - b.values[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.values.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

}  // namespace beamdip

#endif  // BEAMDIP_LOSSES_HPP
