/*
 * Bias-corrected Adam.
 *
 * Copyright 2026 the beamdip authors
 * Licensed under the terms of the Apache 2.0 License.
 * See LICENSE file in the project root for terms.
 */

#ifndef BEAMDIP_OPTIM_HPP
#define BEAMDIP_OPTIM_HPP

#include <cmath>
#include <vector>

#include "beamdip/autodiff.hpp"
#include "beamdip/core.hpp"

namespace beamdip {

template <class T>
struct AdamState {
    long step = 0;
    std::vector<std::vector<T>> m;  // first moments, one slab per parameter
    std::vector<std::vector<T>> v;  // second moments
    double lr = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    void init(const std::vector<Tensor<T>>& params) {
        step = 0;
        m.clear();
        v.clear();
        for (const auto& p : params) {
            m.emplace_back(p.numel(), T(0));
            v.emplace_back(p.numel(), T(0));
        }
    }
};

// theta -= lr * m_hat / (sqrt(v_hat) + eps), with the usual 1/(1-beta^t)
// bias corrections.
template <class T>
inline void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state) {
    if (state.m.size() != params.size()) fail(errc::shape_error, "adam state size mismatch");
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
    const T one_m_b1 = static_cast<T>(1.0 - state.beta1);
    const T one_m_b2 = static_cast<T>(1.0 - state.beta2);
    const T lr = static_cast<T>(state.lr);
    const T eps = static_cast<T>(state.epsilon);
    const T inv_bc1 = static_cast<T>(1.0 / bc1);
    const T inv_bc2 = static_cast<T>(1.0 / bc2);
    for (std::size_t p = 0; p < params.size(); ++p) {
        auto& theta = params[p].data;
        const auto& g = params[p].grad;
        auto& m = state.m[p];
        auto& v = state.v[p];
        if (m.size() != theta.size() || g.size() != theta.size())
            fail(errc::shape_error, "adam parameter shape mismatch");
        for (std::size_t i = 0; i < theta.size(); ++i) {
            m[i] = b1 * m[i] + one_m_b1 * g[i];
            v[i] = b2 * v[i] + one_m_b2 * g[i] * g[i];
            const T m_hat = m[i] * inv_bc1;
            const T v_hat = v[i] * inv_bc2;
            theta[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
        }
    }
}

}  // namespace beamdip

#endif  // BEAMDIP_OPTIM_HPP
