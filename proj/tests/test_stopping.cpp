/*
 * stopping: mask set algebra, pseudo-validation exclusivity, variance
 * trackers, the patience automaton, and the hybrid rule.
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
#include "beamdip/stopping.hpp"

using namespace beamdip;

TEST_SUITE_BEGIN("stopping");

TEST_CASE("random mask has exactly round(fraction * pixels) validation pixels") {
    const MaskSet ms = make_random_mask(100, 100, 0.05, 9);
    std::size_t val = 0;
    for (auto v : ms.val_mask) val += v;
    CHECK(val == 500);
    CHECK(ms.val_mask.size() == 10000);
}

TEST_CASE("random masks are seed-deterministic and seed-sensitive") {
    const MaskSet a = make_random_mask(32, 32, 0.1, 5);
    const MaskSet b = make_random_mask(32, 32, 0.1, 5);
    const MaskSet c = make_random_mask(32, 32, 0.1, 6);
    CHECK(a.val_mask == b.val_mask);
    CHECK(a.val_mask != c.val_mask);
}

TEST_CASE("train and validation masks partition the pixels on 50 random configs") {
    Rng rng(61);
    for (int trial = 0; trial < 50; ++trial) {
        const int rows = 4 + static_cast<int>(rng.index(40));
        const int cols = 4 + static_cast<int>(rng.index(40));
        const double fraction = rng.uniform(0.01, 0.49);
        const MaskSet ms = make_random_mask(rows, cols, fraction, 1000 + trial);
        REQUIRE(ms.train_mask.size() == static_cast<std::size_t>(rows) * cols);
        for (std::size_t i = 0; i < ms.train_mask.size(); ++i) {
            CHECK((ms.train_mask[i] ^ ms.val_mask[i]) == 1);  // disjoint and covering
        }
    }
    CHECK_THROWS_AS(make_random_mask(10, 10, 0.0, 1), Error);
    CHECK_THROWS_AS(make_random_mask(10, 10, 0.6, 1), Error);
}

TEST_CASE("kfold masks partition pixels into near-equal folds") {
    const auto folds = make_kfold_masks(4, 4, 4, 3);
    REQUIRE(folds.size() == 4);
    std::vector<int> seen(16, 0);
    for (const auto& f : folds) {
        std::size_t val = 0;
        for (std::size_t i = 0; i < 16; ++i) {
            if (f.val_mask[i]) {
                ++val;
                ++seen[i];
            }
            CHECK((f.train_mask[i] ^ f.val_mask[i]) == 1);
        }
        CHECK(val == 4);
    }
    for (int s : seen) CHECK(s == 1);  // every pixel in exactly one fold

    const auto again = make_kfold_masks(4, 4, 4, 3);
    for (int f = 0; f < 4; ++f) CHECK(again[f].val_mask == folds[f].val_mask);

    const auto uneven = make_kfold_masks(5, 5, 4, 3);
    std::size_t smallest = 25, largest = 0;
    for (const auto& f : uneven) {
        std::size_t val = 0;
        for (auto v : f.val_mask) val += v;
        smallest = std::min(smallest, val);
        largest = std::max(largest, val);
    }
    CHECK(largest - smallest <= 1);

    CHECK_THROWS_AS(make_kfold_masks(2, 2, 5, 1), Error);
    CHECK_THROWS_AS(make_kfold_masks(4, 4, 1, 1), Error);
}

TEST_CASE("pseudo-validation loss reads only validation pixels") {
    MaskSet ms = make_random_mask(2, 2, 0.25, 11);
    std::size_t val_idx = 0;
    for (std::size_t i = 0; i < 4; ++i)
        if (ms.val_mask[i]) val_idx = i;

    std::vector<double> target{0.1, 0.2, 0.3, 0.4};
    std::vector<double> out = target;
    CHECK(pseudo_val_loss(out, target, ms) == 0.0);

    // Perturb only training pixels: still zero.
    for (std::size_t i = 0; i < 4; ++i)
        if (!ms.val_mask[i]) out[i] += 0.7;
    CHECK(pseudo_val_loss(out, target, ms) == 0.0);

    // One validation pixel off by 0.2 -> MSE 0.04.
    out = target;
    out[val_idx] += 0.2;
    CHECK(pseudo_val_loss(out, target, ms) == doctest::Approx(0.04));
}

TEST_CASE("wmv of an alternating stream is mean((a-b)^2)/2") {
    ESConfig cfg;
    cfg.mode = VarianceMode::wmv;
    cfg.window = 2;
    StopState state(cfg);
    std::vector<double> a{0.0, 1.0, 0.5, 0.25};
    std::vector<double> b{1.0, 0.0, 0.5, 0.75};
    state.variance_update(a, 10);
    const double v2 = state.variance_update(b, 20);
    double expected = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) expected += (a[i] - b[i]) * (a[i] - b[i]);
    expected /= 2.0 * static_cast<double>(a.size());
    CHECK(v2 == doctest::Approx(expected).epsilon(1e-12));
    // Constant stream decays to exactly zero once the window holds one image.
    StopState flat(cfg);
    flat.variance_update(a, 10);
    flat.variance_update(a, 20);
    CHECK(flat.variance_update(a, 30) == 0.0);
}

TEST_CASE("emv with window 1 tracks one-step deviations") {
    ESConfig cfg;
    cfg.mode = VarianceMode::emv;
    cfg.window = 1;
    StopState state(cfg);
    std::vector<double> x1{0.0, 0.0};
    std::vector<double> x2{1.0, 3.0};
    std::vector<double> x3{1.0, 3.0};
    CHECK(state.variance_update(x1, 10) == 0.0);  // initializes the average
    CHECK(state.variance_update(x2, 20) == doctest::Approx((1.0 + 9.0) / 2.0));
    CHECK(state.variance_update(x3, 30) == 0.0);  // window 1: A tracks previous output
}

TEST_CASE("emv converges to zero on a constant stream") {
    ESConfig cfg;
    cfg.window = 4;
    StopState state(cfg);
    std::vector<double> x{0.5, 0.25};
    std::vector<double> y{1.5, 0.75};
    state.variance_update(x, 1);
    state.variance_update(y, 2);
    double last = std::numeric_limits<double>::infinity();
    for (int i = 3; i < 40; ++i) last = state.variance_update(y, i);
    CHECK(last < 1e-6);
}

TEST_CASE("first variance observation always improves (max_var starts -inf)") {
    StopState state(ESConfig{});
    CHECK(state.max_var() == -std::numeric_limits<double>::infinity());
    state.patience_step(0.0, 1.0, 10);
    CHECK(state.var_counter() == 0);
    CHECK(state.max_var() == 0.0);
    CHECK(state.emv_peak_iter() == 10);
}

TEST_CASE("strictly improving pvl never stops before max_iters") {
    ESConfig cfg;
    cfg.patience = 5;
    StopState state(cfg);
    double pvl = 1.0;
    for (long iter = 10; iter <= 2000; iter += 10) {
        pvl *= 0.99;
        const auto d = state.patience_step(0.01, pvl, iter, 2000);
        if (iter < 2000) {
            CHECK_FALSE(d.stop);
        } else {
            CHECK(d.stop);
            CHECK(d.trigger == StopTrigger::max_iters);
        }
    }
}

TEST_CASE("stop fires exactly patience checks after the later peak") {
    ESConfig cfg;
    cfg.patience = 4;
    StopState state(cfg);
    // Variance rises to a peak at eval 6, pvl improves until eval 8.
    long stop_iter = 0;
    double var = 0.0, pvl = 1.0;
    for (int eval = 1; eval <= 40; ++eval) {
        const long iter = eval * 10;
        var = eval <= 6 ? var + 1.0 : var;
        pvl = eval <= 8 ? pvl * 0.9 : pvl;
        const auto d = state.patience_step(var, pvl, iter, 0);
        if (d.stop) {
            stop_iter = iter;
            break;
        }
    }
    // Later of the two peaks is eval 8; patience 4 evals -> stop at eval 12.
    CHECK(stop_iter == 120);
    const StopReport rep = state.hybrid_decision();
    CHECK(rep.best_iter == 80);
    CHECK(rep.emv_peak_iter == 60);
    CHECK(rep.rel_gap == doctest::Approx(std::abs(80.0 - 60.0) / 80.0));
}

TEST_CASE("hybrid rule is a conjunction: stale pvl alone does not stop") {
    ESConfig cfg;
    cfg.patience = 3;
    StopState state(cfg);
    double var = 0.0;
    for (int eval = 1; eval <= 20; ++eval) {
        var += 1.0;  // variance keeps climbing
        const auto d = state.patience_step(var, 1.0, eval * 10, 0);  // pvl stale from start
        CHECK_FALSE(d.stop);
    }
    CHECK(state.pvl_counter() >= cfg.patience);
    CHECK(state.var_counter() == 0);

    // Disjunction mode stops on the stale pvl alone.
    ESConfig dis = cfg;
    dis.conjunction = false;
    StopState s2(dis);
    bool stopped = false;
    double v2 = 0.0;
    for (int eval = 1; eval <= 20 && !stopped; ++eval) {
        v2 += 1.0;
        stopped = s2.patience_step(v2, 1.0, eval * 10, 0).stop;
    }
    CHECK(stopped);
}

TEST_CASE("automaton is a pure function of its input trace (replay)") {
    Rng rng(71);
    std::vector<std::pair<double, double>> trace;
    for (int i = 0; i < 100; ++i) trace.emplace_back(rng.uniform(), rng.uniform());

    auto run = [&](const std::vector<std::pair<double, double>>& t) {
        ESConfig cfg;
        cfg.patience = 7;
        StopState s(cfg);
        std::vector<int> decisions;
        for (std::size_t i = 0; i < t.size(); ++i) {
            const auto d = s.patience_step(t[i].first, t[i].second, static_cast<long>(10 * (i + 1)), 0);
            decisions.push_back(d.stop ? 1 : 0);
            if (d.stop) break;
        }
        const StopReport r = s.hybrid_decision();
        decisions.push_back(static_cast<int>(r.best_iter));
        decisions.push_back(static_cast<int>(r.emv_peak_iter));
        return decisions;
    };
    CHECK(run(trace) == run(trace));
}

TEST_CASE("counters never exceed patience at a continue decision; monotone extrema") {
    Rng rng(72);
    ESConfig cfg;
    cfg.patience = 5;
    StopState state(cfg);
    double best_pvl = std::numeric_limits<double>::infinity();
    double max_var = -std::numeric_limits<double>::infinity();
    for (int eval = 1; eval <= 200; ++eval) {
        const double var = rng.uniform(0.0, 1.0);
        const double pvl = rng.uniform(0.0, 1.0);
        const auto d = state.patience_step(var, pvl, eval * 10, 0);
        CHECK(state.best_pvl() <= best_pvl);
        CHECK(state.max_var() >= max_var);
        best_pvl = state.best_pvl();
        max_var = state.max_var();
        if (d.stop) break;
        CHECK(state.pvl_counter() <= 2 * cfg.patience);  // conjunction can hold one side stale
    }
}

TEST_SUITE_END();
