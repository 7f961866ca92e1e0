/*
 * Pseudo-validation masks (random and K-fold), output-variance trackers
 * (windowed and expected moving variance) and the hybrid patience automaton
 * that drives early stopping.
 *
 * Copyright 2026 the beamdip authors
 * Licensed under the terms of the Apache 2.0 License.
 * See LICENSE file in the project root for terms.
 */

#ifndef BEAMDIP_STOPPING_HPP
#define BEAMDIP_STOPPING_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "beamdip/core.hpp"

namespace beamdip {

// Disjoint train/validation pixel sets covering the whole image.
struct MaskSet {
    std::vector<std::uint8_t> train_mask;
    std::vector<std::uint8_t> val_mask;
    double fraction = 0.0;
    std::uint64_t seed = 0;
    int fold_index = -1;  // -1 for random mode
};

// Exactly round(fraction * pixels) validation pixels, sampled uniformly
// without replacement (partial Fisher-Yates), seed-deterministic.
inline MaskSet make_random_mask(int rows, int cols, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0) || !(fraction < 0.5)) fail(errc::bad_fraction, "fraction must be in (0, 0.5)");
    const std::size_t total = static_cast<std::size_t>(rows) * cols;
    const std::size_t n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(total)));
    if (n_val == 0) fail(errc::bad_fraction, "fraction rounds to zero validation pixels");
    MaskSet ms;
    ms.fraction = fraction;
    ms.seed = seed;
    ms.train_mask.assign(total, 1);
    ms.val_mask.assign(total, 0);
    std::vector<std::uint32_t> idx(total);
    std::iota(idx.begin(), idx.end(), 0u);
    Rng rng(seed, 0x3A5Cull);
    for (std::size_t i = 0; i < n_val; ++i) {
        const std::size_t j = i + rng.index(total - i);
        std::swap(idx[i], idx[j]);
        ms.val_mask[idx[i]] = 1;
        ms.train_mask[idx[i]] = 0;
    }
    return ms;
}

// K validation folds partitioning the pixel set, sizes differing by at most
// one; each train set is the complement of its fold.
inline std::vector<MaskSet> make_kfold_masks(int rows, int cols, int k, std::uint64_t seed) {
    const std::size_t total = static_cast<std::size_t>(rows) * cols;
    if (k < 2 || static_cast<std::size_t>(k) > total) fail(errc::bad_k, "k must be in [2, pixels]");
    std::vector<std::uint32_t> idx(total);
    std::iota(idx.begin(), idx.end(), 0u);
    Rng rng(seed, 0x5F0Dull);
    for (std::size_t i = 0; i + 1 < total; ++i) {
        const std::size_t j = i + rng.index(total - i);
        std::swap(idx[i], idx[j]);
    }
    std::vector<MaskSet> folds(k);
    const std::size_t base = total / k, extra = total % k;
    std::size_t pos = 0;
    for (int f = 0; f < k; ++f) {
        const std::size_t sz = base + (static_cast<std::size_t>(f) < extra ? 1 : 0);
        MaskSet& ms = folds[f];
        ms.fraction = static_cast<double>(sz) / static_cast<double>(total);
        ms.seed = seed;
        ms.fold_index = f;
        ms.train_mask.assign(total, 1);
        ms.val_mask.assign(total, 0);
        for (std::size_t i = 0; i < sz; ++i, ++pos) {
            ms.val_mask[idx[pos]] = 1;
            ms.train_mask[idx[pos]] = 0;
        }
    }
    return folds;
}

// Mean squared error over validation pixels only.
template <class A, class B>
inline double pseudo_val_loss(const std::vector<A>& out, const std::vector<B>& target,
                              const MaskSet& mask) {
    if (out.size() != target.size() || out.size() != mask.val_mask.size())
        fail(errc::shape_error, "pseudo_val_loss size mismatch");
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!mask.val_mask[i]) continue;
        const double d = static_cast<double>(out[i]) - static_cast<double>(target[i]);
        acc += d * d;
        ++n;
    }
    if (n == 0) fail(errc::empty_mask, "validation mask is empty");
    return acc / static_cast<double>(n);
}

enum class VarianceMode { wmv, emv };

enum class StopTrigger { none, hybrid, max_iters, diverged };

inline const char* stop_trigger_name(StopTrigger t) {
    switch (t) {
        case StopTrigger::none: return "none";
        case StopTrigger::hybrid: return "hybrid";
        case StopTrigger::max_iters: return "max-iters";
        case StopTrigger::diverged: return "diverged";
    }
    return "unknown";
}

struct StopReport {
    bool should_stop = false;
    StopTrigger trigger = StopTrigger::none;
    long best_iter = 0;      // pseudo-validation optimum
    long stop_iter = 0;
    long emv_peak_iter = 0;  // last variance improvement
    double best_pvl = std::numeric_limits<double>::infinity();
    double max_var = -std::numeric_limits<double>::infinity();
    double rel_gap = 0.0;    // |best_iter - emv_peak_iter| / max(best_iter, 1)
};

struct ESConfig {
    bool enabled = true;
    VarianceMode mode = VarianceMode::emv;
    int window = 10;        // evaluation samples (100 iterations at interval 10)
    int patience = 50;      // evaluations without improvement tolerated
    double rel_improvement = 1e-4;
    bool conjunction = true;  // hybrid rule: both criteria stale (false: either)

    void validate() const {
        if (window < 1) fail(errc::bad_params, "window must be >= 1");
        if (patience < 1) fail(errc::bad_params, "patience must be >= 1");
    }
};

// One instance per training run.  Evaluations are fed in iteration order via
// variance_update + patience_step.
class StopState {
public:
    explicit StopState(const ESConfig& cfg) : cfg_(cfg) { cfg.validate(); }

    const ESConfig& config() const { return cfg_; }
    double max_var() const { return max_var_; }
    double best_pvl() const { return best_pvl_; }
    long best_iter() const { return best_iter_; }
    long emv_peak_iter() const { return emv_peak_iter_; }
    int pvl_counter() const { return pvl_counter_; }
    int var_counter() const { return var_counter_; }
    bool variance_seen() const { return variance_seen_; }

    // WMV: per-pixel sample variance across the last `window` stored outputs,
    // averaged over pixels.  EMV: squared deviation from the exponentially
    // weighted running average A (estimated against A before A absorbs the
    // new output, so window 1 measures one-step differences).
    double variance_update(const std::vector<double>& output, long iteration) {
        (void)iteration;
        double estimate = 0.0;
        if (cfg_.mode == VarianceMode::wmv) {
            ring_.push_back(output);
            if (ring_.size() > static_cast<std::size_t>(cfg_.window)) ring_.pop_front();
            const std::size_t m = ring_.size();
            if (m >= 2) {
                const std::size_t n_px = output.size();
                double acc = 0.0;
                for (std::size_t p = 0; p < n_px; ++p) {
                    double mean = 0.0;
                    for (const auto& img : ring_) mean += img[p];
                    mean /= static_cast<double>(m);
                    double var = 0.0;
                    for (const auto& img : ring_) var += (img[p] - mean) * (img[p] - mean);
                    acc += var / static_cast<double>(m - 1);
                }
                estimate = acc / static_cast<double>(n_px);
            }
        } else {
            if (avg_.empty()) {
                avg_ = output;
            } else {
                double acc = 0.0;
                for (std::size_t p = 0; p < output.size(); ++p) {
                    const double d = output[p] - avg_[p];
                    acc += d * d;
                }
                estimate = acc / static_cast<double>(output.size());
                const double a = 1.0 / static_cast<double>(cfg_.window);
                for (std::size_t p = 0; p < output.size(); ++p)
                    avg_[p] = (1.0 - a) * avg_[p] + a * output[p];
            }
        }
        last_variance_ = estimate;
        return estimate;
    }

    struct Decision {
        bool stop = false;
        bool pvl_improved = false;
        StopTrigger trigger = StopTrigger::none;
    };

    // Patience automaton step; feeds both trackers and applies the hybrid
    // rule.  max_iters 0 disables the iteration cap here.
    Decision patience_step(double variance, double pvl, long iteration, long max_iters = 0) {
        Decision d;
        if (variance > max_var_) {
            max_var_ = variance;
            var_counter_ = 0;
            emv_peak_iter_ = iteration;
            variance_seen_ = true;
        } else {
            ++var_counter_;
        }
        if (pvl < best_pvl_ * (1.0 - cfg_.rel_improvement)) {
            best_pvl_ = pvl;
            best_iter_ = iteration;
            pvl_counter_ = 0;
            d.pvl_improved = true;
        } else {
            ++pvl_counter_;
        }
        last_iter_ = iteration;

        if (cfg_.enabled) {
            const bool pvl_stale = pvl_counter_ >= cfg_.patience;
            const bool var_stale = variance_seen_ && var_counter_ >= cfg_.patience;
            const bool fire = cfg_.conjunction ? (pvl_stale && var_stale) : (pvl_stale || var_stale);
            if (fire) {
                d.stop = true;
                d.trigger = StopTrigger::hybrid;
            }
        }
        if (!d.stop && max_iters > 0 && iteration >= max_iters) {
            d.stop = true;
            d.trigger = StopTrigger::max_iters;
        }
        return d;
    }

    StopReport hybrid_decision() const {
        StopReport r;
        const bool pvl_stale = pvl_counter_ >= cfg_.patience;
        const bool var_stale = variance_seen_ && var_counter_ >= cfg_.patience;
        r.should_stop = cfg_.conjunction ? (pvl_stale && var_stale) : (pvl_stale || var_stale);
        r.best_iter = best_iter_;
        r.stop_iter = last_iter_;
        r.emv_peak_iter = emv_peak_iter_;
        r.best_pvl = best_pvl_;
        r.max_var = max_var_;
        r.rel_gap = std::abs(static_cast<double>(best_iter_ - emv_peak_iter_)) /
                    std::max(static_cast<double>(best_iter_), 1.0);
        return r;
    }

private:
    ESConfig cfg_;
    std::deque<std::vector<double>> ring_;  // WMV storage
    std::vector<double> avg_;               // EMV running average
    double last_variance_ = 0.0;
    double max_var_ = -std::numeric_limits<double>::infinity();
    double best_pvl_ = std::numeric_limits<double>::infinity();
    long best_iter_ = 0;
    long emv_peak_iter_ = 0;
    long last_iter_ = 0;
    int pvl_counter_ = 0;
    int var_counter_ = 0;
    bool variance_seen_ = false;
};

}  // namespace beamdip

#endif  // BEAMDIP_STOPPING_HPP
