/*
 * losses_metrics: hand-worked composite loss cases, masked-pair semantics,
 * FD gradients per component, histogram/gradient metrics, PSNR.
 *
 * Copyright 2026 the beamdip authors
 * Licensed under the terms of the Apache 2.0 License.
 * See LICENSE file in the project root for terms.
 */

#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "beamdip/core.hpp"
#include "beamdip/losses.hpp"
#include "gradcheck.hpp"

using namespace beamdip;
using gradcheck::random_tensor;

namespace {

NormalizedImage norm_image(int rows, int cols, std::vector<double> values) {
    NormalizedImage img;
    img.rows = rows;
    img.cols = cols;
    img.values = std::move(values);
    return img;
}

struct LossCase {
    std::vector<double> out, target, weights;
    std::vector<std::uint8_t> mask;
    int rows = 0, cols = 0;
};

LossBreakdown eval_loss(const LossCase& lc, const LossWeights& lw) {
    Tape<double> tape;
    Tensor<double> out({lc.rows, lc.cols});
    out.data = lc.out;
    std::vector<double> tgt = lc.target;
    const Var ov = tape.leaf(out);
    auto [loss, bd] = composite_loss(tape, ov, tgt, lc.weights, lc.mask, lw, lc.rows, lc.cols);
    (void)loss;
    return bd;
}

}  // namespace

TEST_SUITE_BEGIN("losses");

TEST_CASE("weight map endpoints and monotonicity") {
    const NormalizedImage img = norm_image(1, 3, {0.0, 0.5, 1.0});
    const auto w = weight_map(img, 0.1);
    CHECK(w[0] == doctest::Approx(0.1));
    CHECK(w[1] == doctest::Approx(0.55));
    CHECK(w[2] == doctest::Approx(1.0));
    CHECK(w[0] < w[1]);
    CHECK(w[1] < w[2]);

    const auto w0 = weight_map(norm_image(1, 2, {0.0, 0.0}), 0.0);
    CHECK(w0[0] == 0.0);
    CHECK_THROWS_AS(weight_map(img, 1.0), Error);
}

TEST_CASE("identical constant images give a zero loss") {
    LossCase lc;
    lc.rows = lc.cols = 2;
    lc.out = {0.4, 0.4, 0.4, 0.4};
    lc.target = lc.out;
    lc.weights.assign(4, 1.0);
    lc.mask.assign(4, 1);
    const LossBreakdown bd = eval_loss(lc, {});
    CHECK(bd.mse == 0.0);
    CHECK(bd.mae == 0.0);
    CHECK(bd.tv == 0.0);
    CHECK(bd.gdl == 0.0);
    CHECK(bd.total == 0.0);
}

TEST_CASE("hand-worked 2x2 case") {
    // out = [[0,1],[0,1]], target = 0, uniform weights, full mask.
    LossCase lc;
    lc.rows = lc.cols = 2;
    lc.out = {0, 1, 0, 1};
    lc.target = {0, 0, 0, 0};
    lc.weights.assign(4, 1.0);
    lc.mask.assign(4, 1);
    LossWeights lw;
    lw.w_mse = lw.w_mae = lw.w_tv = lw.w_gd = 1.0;
    const LossBreakdown bd = eval_loss(lc, lw);
    CHECK(bd.mse == doctest::Approx(0.5));
    CHECK(bd.mae == doctest::Approx(0.5));
    // TV: two horizontal pairs with |1-0| plus two vertical pairs with 0,
    // normalized per masked pair (4 pairs) -> 2/4.
    CHECK(bd.tv == doctest::Approx(0.5));
    // GDL oracle: d_out - d_target per pair = {1,1,0,0} -> 2/4.
    CHECK(bd.gdl == doctest::Approx(0.5));
    CHECK(bd.total == doctest::Approx(bd.mse + bd.mae + bd.tv + bd.gdl).epsilon(1e-12));
}

TEST_CASE("TV-only loss of a constant output is zero regardless of target") {
    LossCase lc;
    lc.rows = lc.cols = 3;
    lc.out.assign(9, 0.25);
    lc.target = {0.9, 0.1, 0.4, 0.3, 0.2, 0.8, 0.5, 0.6, 0.7};
    lc.weights.assign(9, 1.0);
    lc.mask.assign(9, 1);
    LossWeights lw;
    lw.w_mse = lw.w_mae = lw.w_gd = 0.0;
    lw.w_tv = 1.0;
    CHECK(eval_loss(lc, lw).total == 0.0);
}

TEST_CASE("empty mask raises EmptyMask") {
    LossCase lc;
    lc.rows = lc.cols = 2;
    lc.out.assign(4, 0.0);
    lc.target.assign(4, 0.0);
    lc.weights.assign(4, 1.0);
    lc.mask.assign(4, 0);
    CHECK_THROWS_AS(eval_loss(lc, {}), Error);
}

TEST_CASE("masked loss equals the full loss on the masked sub-multiset") {
    Rng rng(41);
    const int rows = 6, cols = 5;
    LossCase lc;
    lc.rows = rows;
    lc.cols = cols;
    lc.out.resize(rows * cols);
    lc.target.resize(rows * cols);
    lc.weights.resize(rows * cols);
    lc.mask.resize(rows * cols);
    for (int i = 0; i < rows * cols; ++i) {
        lc.out[i] = rng.uniform(0.0, 1.0);
        lc.target[i] = rng.uniform(0.0, 1.0);
        lc.weights[i] = rng.uniform(0.1, 1.0);
        lc.mask[i] = rng.uniform() < 0.7;
    }
    lc.mask[0] = 1;
    LossWeights lw;
    const LossBreakdown bd = eval_loss(lc, lw);

    // Oracle: direct per-pixel and per-pair accumulation over the mask.
    double mse = 0, mae = 0, tv = 0, gdl = 0;
    std::size_t n_mask = 0, n_pairs = 0;
    auto at = [&](const std::vector<double>& v, int r, int c) { return v[r * cols + c]; };
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            if (!lc.mask[r * cols + c]) continue;
            ++n_mask;
            const double d = at(lc.out, r, c) - at(lc.target, r, c);
            mse += lc.weights[r * cols + c] * d * d;
            mae += std::abs(d);
            if (c + 1 < cols && lc.mask[r * cols + c + 1]) {
                ++n_pairs;
                tv += std::abs(at(lc.out, r, c + 1) - at(lc.out, r, c));
                gdl += std::abs((at(lc.out, r, c + 1) - at(lc.out, r, c)) -
                                (at(lc.target, r, c + 1) - at(lc.target, r, c)));
            }
            if (r + 1 < rows && lc.mask[(r + 1) * cols + c]) {
                ++n_pairs;
                tv += std::abs(at(lc.out, r + 1, c) - at(lc.out, r, c));
                gdl += std::abs((at(lc.out, r + 1, c) - at(lc.out, r, c)) -
                                (at(lc.target, r + 1, c) - at(lc.target, r, c)));
            }
        }
    CHECK(bd.mse == doctest::Approx(mse / n_mask).epsilon(1e-12));
    CHECK(bd.mae == doctest::Approx(mae / n_mask).epsilon(1e-12));
    CHECK(bd.tv == doctest::Approx(tv / n_pairs).epsilon(1e-12));
    CHECK(bd.gdl == doctest::Approx(gdl / n_pairs).epsilon(1e-12));
    CHECK(bd.total ==
          doctest::Approx(lw.w_mse * bd.mse + lw.w_mae * bd.mae + lw.w_tv * bd.tv +
                          lw.w_gd * bd.gdl)
              .epsilon(1e-12));
}

TEST_CASE("every component is nonnegative") {
    Rng rng(42);
    for (int trial = 0; trial < 20; ++trial) {
        LossCase lc;
        lc.rows = 4;
        lc.cols = 4;
        lc.out.resize(16);
        lc.target.resize(16);
        lc.weights.assign(16, 1.0);
        lc.mask.assign(16, 1);
        for (int i = 0; i < 16; ++i) {
            lc.out[i] = rng.uniform(-1.0, 1.0);
            lc.target[i] = rng.uniform(0.0, 1.0);
        }
        const LossBreakdown bd = eval_loss(lc, {});
        CHECK(bd.mse >= 0.0);
        CHECK(bd.mae >= 0.0);
        CHECK(bd.tv >= 0.0);
        CHECK(bd.gdl >= 0.0);
        CHECK(bd.total >= 0.0);
    }
}

TEST_CASE("composite loss gradient passes FD checks per component and combined") {
    Rng rng(43);
    const int rows = 5, cols = 4;
    Tensor<double> out = random_tensor({rows, cols}, rng, 0.0, 1.0);
    std::vector<double> target(rows * cols), weights(rows * cols);
    std::vector<std::uint8_t> mask(rows * cols);
    for (int i = 0; i < rows * cols; ++i) {
        target[i] = rng.uniform(0.0, 1.0);
        weights[i] = rng.uniform(0.1, 1.0);
        mask[i] = rng.uniform() < 0.8;
    }
    mask[0] = 1;

    const LossWeights configs[] = {
        {1.0, 0.0, 0.0, 0.0}, {0.0, 1.0, 0.0, 0.0}, {0.0, 0.0, 1.0, 0.0},
        {0.0, 0.0, 0.0, 1.0}, {1.0, 0.5, 0.05, 0.1},
    };
    for (const LossWeights& lw : configs) {
        const auto rep = gradcheck::check(
            {out},
            [&, lw](Tape<double>& tape, std::vector<Var>& leaves) {
                auto [loss, bd] =
                    composite_loss(tape, leaves[0], target, weights, mask, lw, rows, cols);
                (void)bd;
                return loss;
            },
            1e-5, 20, 99);
        CHECK(rep.max_rel_err < 1e-4);
    }
}

TEST_CASE("entropy: constant, two-level, uniform ramp") {
    CHECK(shannon_entropy(norm_image(2, 2, {0.3, 0.3, 0.3, 0.3})) == 0.0);

    std::vector<double> half(64, 0.0);
    for (std::size_t i = 32; i < 64; ++i) half[i] = 1.0;
    CHECK(shannon_entropy(norm_image(8, 8, std::move(half))) == doctest::Approx(1.0));

    std::vector<double> ramp(256);
    for (int i = 0; i < 256; ++i) ramp[i] = i / 255.0;
    CHECK(shannon_entropy(norm_image(1, 256, std::move(ramp))) == doctest::Approx(8.0));

    Rng rng(44);
    std::vector<double> noise(1024);
    for (auto& v : noise) v = rng.uniform();
    const double h = shannon_entropy(norm_image(32, 32, std::move(noise)));
    CHECK(h >= 0.0);
    CHECK(h <= 8.0);
}

namespace {

double brute_correlate_then(const NormalizedImage& img, const double k[9], bool variance) {
    std::vector<double> resp(img.values.size());
    for (int r = 0; r < img.rows; ++r)
        for (int c = 0; c < img.cols; ++c) {
            double acc = 0.0;
            for (int dr = -1; dr <= 1; ++dr)
                for (int dc = -1; dc <= 1; ++dc) {
                    const int rr = reflect_index(r + dr, img.rows);
                    const int cc = reflect_index(c + dc, img.cols);
                    acc += k[(dr + 1) * 3 + (dc + 1)] * img.values[rr * img.cols + cc];
                }
            resp[r * img.cols + c] = acc;
        }
    if (!variance) {
        double s = 0;
        for (double v : resp) s += v * v;
        return s;
    }
    double mean = 0;
    for (double v : resp) mean += v;
    mean /= static_cast<double>(resp.size());
    double var = 0;
    for (double v : resp) var += (v - mean) * (v - mean);
    return var / static_cast<double>(resp.size());
}

}  // namespace

TEST_CASE("laplacian variance: constant, ramp, impulse vs brute force") {
    CHECK(laplacian_variance(norm_image(4, 4, std::vector<double>(16, 0.7))) == 0.0);

    // Affine ramp: interior response 0; reflection keeps boundary rows equal
    // to their mirror, so the oracle must agree (and does, exactly).
    std::vector<double> ramp(8 * 8);
    for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 8; ++c) ramp[r * 8 + c] = 0.1 * r + 0.05 * c;
    const NormalizedImage rimg = norm_image(8, 8, std::move(ramp));
    const double lap_kernel[9] = {0, 1, 0, 1, -4, 1, 0, 1, 0};
    CHECK(laplacian_variance(rimg) ==
          doctest::Approx(brute_correlate_then(rimg, lap_kernel, true)).epsilon(1e-12));

    std::vector<double> impulse(49, 0.0);
    impulse[3 * 7 + 3] = 1.0;
    const NormalizedImage iimg = norm_image(7, 7, std::move(impulse));
    const double expected = brute_correlate_then(iimg, lap_kernel, true);
    CHECK(expected > 0.0);
    CHECK(laplacian_variance(iimg) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("tenengrad: constant, step edge, transpose symmetry") {
    // Sobel taps cancel a constant up to summation roundoff, squared.
    CHECK(tenengrad(norm_image(4, 4, std::vector<double>(16, 0.2))) <= 1e-20);

    std::vector<double> step(6 * 6, 0.0);
    for (int r = 0; r < 6; ++r)
        for (int c = 3; c < 6; ++c) step[r * 6 + c] = 1.0;
    const NormalizedImage simg = norm_image(6, 6, std::move(step));
    const double sx[9] = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
    const double sy[9] = {-1, -2, -1, 0, 0, 0, 1, 2, 1};
    const double expected =
        brute_correlate_then(simg, sx, false) + brute_correlate_then(simg, sy, false);
    CHECK(tenengrad(simg) == doctest::Approx(expected).epsilon(1e-12));

    Rng rng(45);
    std::vector<double> vals(5 * 7);
    for (auto& v : vals) v = rng.uniform();
    const NormalizedImage a = norm_image(5, 7, vals);
    std::vector<double> tvals(7 * 5);
    for (int r = 0; r < 5; ++r)
        for (int c = 0; c < 7; ++c) tvals[c * 5 + r] = vals[r * 7 + c];
    const NormalizedImage b = norm_image(7, 5, std::move(tvals));
    CHECK(tenengrad(a) == doctest::Approx(tenengrad(b)).epsilon(1e-12));
}

TEST_CASE("psnr formula, sentinel and monotonicity") {
    const NormalizedImage a = norm_image(2, 2, {0.1, 0.5, 0.9, 0.3});
    CHECK(psnr(a, a) == std::numeric_limits<double>::infinity());

    NormalizedImage b = a;
    for (auto& v : b.values) v += 0.1;
    CHECK(psnr(a, b) == doctest::Approx(20.0));

    NormalizedImage wrong = norm_image(2, 3, std::vector<double>(6, 0.0));
    CHECK_THROWS_AS(psnr(a, wrong), Error);

    Rng rng(46);
    NormalizedImage clean = norm_image(16, 16, std::vector<double>(256));
    for (auto& v : clean.values) v = rng.uniform();
    double prev = std::numeric_limits<double>::infinity();
    for (double std_dev : {0.01, 0.05, 0.1}) {
        NormalizedImage noisy = clean;
        Rng nrng(47, static_cast<std::uint64_t>(std_dev * 1000));
        for (auto& v : noisy.values) v += nrng.normal(0.0, std_dev);
        const double p = psnr(noisy, clean);
        CHECK(p < prev);
        prev = p;
    }
}

TEST_SUITE_END();
