/*
 * Error types and the deterministic random generator shared by all modules.
 *
 * Copyright 2026 the beamdip authors
 * Licensed under the terms of the Apache 2.0 License.
 * See LICENSE file in the project root for terms.
 */

#ifndef BEAMDIP_CORE_HPP
#define BEAMDIP_CORE_HPP

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace beamdip {

enum class errc {
    malformed_file,
    parse_error,
    too_small,
    zero_profile,
    bad_window,
    bad_sigma,
    bad_params,
    needs_shift,
    degenerate_samples,
    empty_beam,
    degenerate_emittance,
    singular_component,
    shape_error,
    empty_mask,
    bad_fraction,
    bad_k,
    degenerate_input,
    diverged_training,
    bad_config,
    io_error,
};

inline const char* errc_name(errc c) {
    switch (c) {
        case errc::malformed_file: return "MalformedFile";
        case errc::parse_error: return "ParseError";
        case errc::too_small: return "TooSmall";
        case errc::zero_profile: return "ZeroProfile";
        case errc::bad_window: return "BadWindow";
        case errc::bad_sigma: return "BadSigma";
        case errc::bad_params: return "BadParams";
        case errc::needs_shift: return "NeedsShift";
        case errc::degenerate_samples: return "DegenerateSamples";
        case errc::empty_beam: return "EmptyBeam";
        case errc::degenerate_emittance: return "DegenerateEmittance";
        case errc::singular_component: return "SingularComponent";
        case errc::shape_error: return "ShapeError";
        case errc::empty_mask: return "EmptyMask";
        case errc::bad_fraction: return "BadFraction";
        case errc::bad_k: return "BadK";
        case errc::degenerate_input: return "DegenerateInput";
        case errc::diverged_training: return "DivergedTraining";
        case errc::bad_config: return "BadConfig";
        case errc::io_error: return "IoError";
    }
    return "UnknownError";
}

class Error : public std::runtime_error {
public:
    Error(errc code, const std::string& what)
        : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

    errc code() const noexcept { return code_; }

private:
    errc code_;
};

[[noreturn]] inline void fail(errc code, const std::string& what) {
    throw Error(code, what);
}

// SplitMix64: counter-based generator with a fixed 64-bit mixing function.
// state_{n+1} = state_n + 0x9E3779B97F4A7C15 (golden-ratio increment), output
// is the finalizer below.  Chosen so that a (seed, stream) pair reproduces the
// exact same draw sequence on every platform and build.
inline std::uint64_t mix64(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ull;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBull;
    z ^= z >> 31;
    return z;
}

// Collapses (seed, stream) into a fresh seed so that distinct streams (e.g.
// per-iteration perturbation draws) never overlap.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    return mix64(seed + 0x9E3779B97F4A7C15ull) ^ mix64(stream ^ 0xD1B54A32D192ED03ull);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}
    Rng(std::uint64_t seed, std::uint64_t stream) : state_(derive_seed(seed, stream)) {}

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ull;
        return mix64(state_);
    }

    // Uniform in [0, 1) with 53 significant bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Index in [0, n).
    std::size_t index(std::size_t n) {
        return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
    }

    // Standard normal via the Marsaglia polar method (no trig, so the only
    // libm dependencies are sqrt and log).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double r = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * r;
        has_spare_ = true;
        return u * r;
    }

    double normal(double mean, double std) { return mean + std * normal(); }

    // Poisson draw: Knuth's product method for small rates, rounded normal
    // approximation above the cutoff.  Deterministic for a fixed state.
    long poisson(double lambda) {
        if (!(lambda > 0.0)) return 0;
        if (lambda < 64.0) {
            const double limit = std::exp(-lambda);
            long k = 0;
            double p = 1.0;
            do {
                ++k;
                p *= uniform();
            } while (p > limit);
            return k - 1;
        }
        const double draw = lambda + std::sqrt(lambda) * normal();
        return draw <= 0.0 ? 0 : static_cast<long>(std::llround(draw));
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace beamdip

#endif  // BEAMDIP_CORE_HPP
