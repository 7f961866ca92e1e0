/*
 * Reverse-mode differentiation over dense rank-1..4 tensors with the layer
 * set the skip network needs: reflect-padded conv2d (stride 1/2), LeakyReLU,
 * bilinear 2x upsampling, channel concat, and elementwise/reduction helpers.
 *
 * Copyright 2026 the beamdip authors
 * Licensed under the terms of the Apache 2.0 License.
 * See LICENSE file in the project root for terms.
 */

#ifndef BEAMDIP_AUTODIFF_HPP
#define BEAMDIP_AUTODIFF_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <condition_variable>
#include <cstddef>
#include <functional>
#include <memory>
#include <mutex>
#include <numeric>
#include <thread>
#include <vector>

#include "beamdip/core.hpp"
#include "beamdip/image.hpp"

namespace beamdip {

template <class T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;
    bool requires_grad = false;
    std::vector<T> grad;

    Tensor() = default;
    Tensor(std::vector<int> s, bool req = false) : shape(std::move(s)), requires_grad(req) {
        data.assign(numel(), T(0));
        if (requires_grad) grad.assign(numel(), T(0));
    }

    std::size_t numel() const {
        std::size_t n = 1;
        for (int d : shape) n *= static_cast<std::size_t>(d);
        return n;
    }

    void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

struct Var {
    int idx = -1;
};

namespace detail {

// Persistent workers woken per dispatch; run() blocks until every worker
// finishes, so callers may capture locals by reference.
class WorkerPool {
public:
    explicit WorkerPool(int workers) : workers_(std::max(1, workers)) {
        for (int i = 1; i < workers_; ++i)
            threads_.emplace_back([this, i] {
                long seen = 0;
                std::unique_lock lk(m_);
                for (;;) {
                    cv_start_.wait(lk, [&] { return stop_ || generation_ != seen; });
                    if (stop_) return;
                    seen = generation_;
                    const auto job = job_;
                    lk.unlock();
                    job(i);
                    lk.lock();
                    if (--pending_ == 0) cv_done_.notify_one();
                }
            });
    }

    WorkerPool(const WorkerPool&) = delete;
    WorkerPool& operator=(const WorkerPool&) = delete;

    ~WorkerPool() {
        {
            std::lock_guard lk(m_);
            stop_ = true;
        }
        cv_start_.notify_all();
        for (auto& t : threads_) t.join();
    }

    int size() const { return workers_; }

    void run(const std::function<void(int)>& job) {
        if (threads_.empty()) {
            job(0);
            return;
        }
        {
            std::lock_guard lk(m_);
            job_ = job;
            pending_ = static_cast<int>(threads_.size());
            ++generation_;
        }
        cv_start_.notify_all();
        job(0);
        std::unique_lock lk(m_);
        cv_done_.wait(lk, [&] { return pending_ == 0; });
    }

private:
    int workers_;
    std::vector<std::thread> threads_;
    std::mutex m_;
    std::condition_variable cv_start_, cv_done_;
    std::function<void(int)> job_;
    long generation_ = 0;
    int pending_ = 0;
    bool stop_ = false;
};

}  // namespace detail

// Eager tape: ops append nodes in topological order; backward walks the node
// list in reverse.  One tape instance is single-threaded from the caller's
// point of view (op-internal workers write disjoint slices only).
template <class T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    int num_threads = 1;

    Var leaf(const Tensor<T>& t) {
        Node n;
        n.shape = t.shape;
        n.value = take_buffer(t.data.size());
        std::copy(t.data.begin(), t.data.end(), n.value.begin());
        n.needs_grad = t.requires_grad;
        return push(std::move(n));
    }

    Var constant(std::vector<int> shape, std::vector<T> data) {
        Node n;
        n.shape = std::move(shape);
        n.value = std::move(data);
        n.needs_grad = false;
        return push(std::move(n));
    }

    const std::vector<int>& shape(Var v) const { return nodes_[v.idx].shape; }
    const std::vector<T>& value(Var v) const { return nodes_[v.idx].value; }
    std::vector<T>& value(Var v) { return nodes_[v.idx].value; }
    const std::vector<T>& grad(Var v) const { return nodes_[v.idx].grad; }
    std::vector<T>& grad(Var v) { return nodes_[v.idx].grad; }
    bool needs_grad(Var v) const { return nodes_[v.idx].needs_grad; }

    // Drops all nodes; their buffers are kept for reuse so steady-state
    // iteration loops stop hitting the allocator for large blocks.
    void clear() {
        for (auto& n : nodes_) {
            if (n.value.capacity()) recycle_.push_back(std::move(n.value));
            if (n.grad.capacity()) recycle_.push_back(std::move(n.grad));
            if (n.scratch.capacity()) recycle_.push_back(std::move(n.scratch));
        }
        nodes_.clear();
        if (recycle_.size() > 256) recycle_.resize(256);
    }

    // Fixed partition of [0, n): each index is handled by exactly one worker,
    // so results are bit-identical for any thread count.
    template <class F>
    void par_for(int n, F&& fn) {
        const int want = std::min(num_threads, n);
        if (want <= 1) {
            fn(0, n);
            return;
        }
        if (!pool_ || pool_->size() != want) pool_ = std::make_unique<detail::WorkerPool>(want);
        const int chunk = (n + want - 1) / want;
        pool_->run([&fn, n, chunk](int w) {
            const int b = w * chunk, e = std::min(n, b + chunk);
            if (b < e) fn(b, e);
        });
    }

    // ---- ops -------------------------------------------------------------

    // Cross-correlation with reflection padding (k-1)/2, so stride 1
    // preserves the spatial shape and stride 2 halves it (even dims only).
    Var conv2d(Var input, Var weight, Var bias, int stride) {
        const auto& is = shape(input);
        const auto& ws = shape(weight);
        const auto& bs = shape(bias);
        if (is.size() != 3 || ws.size() != 4 || bs.size() != 1) fail(errc::shape_error, "conv2d ranks");
        const int C = is[0], H = is[1], W = is[2];
        const int O = ws[0], k = ws[2];
        if (ws[1] != C) fail(errc::shape_error, "conv2d channel mismatch");
        if (ws[3] != k || k % 2 == 0) fail(errc::shape_error, "conv2d kernel must be square and odd");
        if (bs[0] != O) fail(errc::shape_error, "conv2d bias mismatch");
        if (stride != 1 && stride != 2) fail(errc::shape_error, "conv2d stride must be 1 or 2");
        if (stride == 2 && (H % 2 || W % 2)) fail(errc::shape_error, "stride 2 needs even dims");

        const int p = (k - 1) / 2;
        const int Hp = H + 2 * p, Wp = W + 2 * p;
        const int Ho = H / stride, Wo = W / stride;

        Node n;
        n.shape = {O, Ho, Wo};
        n.value = take_buffer(static_cast<std::size_t>(O) * Ho * Wo);
        n.needs_grad = needs_grad(input) || needs_grad(weight) || needs_grad(bias);

        // Reflect-padded copy of the input (shared by forward and backward).
        n.scratch = take_buffer(static_cast<std::size_t>(C) * Hp * Wp);
        if (p == 0) {
            std::copy(value(input).begin(), value(input).end(), n.scratch.begin());
        } else {
            const T* src = value(input).data();
            T* dst = n.scratch.data();
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < Hp; ++y) {
                    const T* srow =
                        src + (static_cast<std::size_t>(c) * H + reflect_index(y - p, H)) * W;
                    T* drow = dst + (static_cast<std::size_t>(c) * Hp + y) * Wp;
                    for (int x = 0; x < Wp; ++x) drow[x] = srow[reflect_index(x - p, W)];
                }
        }

        {
            const T* w = value(weight).data();
            const T* b = value(bias).data();
            const T* pd = n.scratch.data();
            T* out = n.value.data();
            par_for(O, [&](int o0, int o1) {
                for (int o = o0; o < o1; ++o)
                    for (int y = 0; y < Ho; ++y) {
                        T* orow = out + (static_cast<std::size_t>(o) * Ho + y) * Wo;
                        std::fill(orow, orow + Wo, b[o]);
                        for (int c = 0; c < C; ++c)
                            for (int ky = 0; ky < k; ++ky) {
                                const T* srow =
                                    pd + (static_cast<std::size_t>(c) * Hp + y * stride + ky) * Wp;
                                const T* wrow =
                                    w + ((static_cast<std::size_t>(o) * C + c) * k + ky) * k;
                                if (stride == 1 && k == 3) {
                                    const T w0 = wrow[0], w1 = wrow[1], w2 = wrow[2];
                                    for (int x = 0; x < Wo; ++x)
                                        orow[x] += w0 * srow[x] + w1 * srow[x + 1] + w2 * srow[x + 2];
                                } else if (stride == 1) {
                                    for (int kx = 0; kx < k; ++kx) {
                                        const T wv = wrow[kx];
                                        for (int x = 0; x < Wo; ++x) orow[x] += wv * srow[x + kx];
                                    }
                                } else {
                                    for (int kx = 0; kx < k; ++kx) {
                                        const T wv = wrow[kx];
                                        for (int x = 0; x < Wo; ++x) orow[x] += wv * srow[2 * x + kx];
                                    }
                                }
                            }
                    }
            });
        }

        const int in_idx = input.idx, w_idx = weight.idx, b_idx = bias.idx;
        n.backward = [this, in_idx, w_idx, b_idx, C, H, W, O, k, p, Hp, Wp, Ho, Wo,
                      stride](const Node& self) {
            const T* g = self.grad.data();

            if (nodes_[b_idx].needs_grad) {
                T* db = nodes_[b_idx].grad.data();
                for (int o = 0; o < O; ++o) {
                    double acc = 0.0;
                    const T* go = g + static_cast<std::size_t>(o) * Ho * Wo;
                    for (int i = 0; i < Ho * Wo; ++i) acc += go[i];
                    db[o] += static_cast<T>(acc);
                }
            }

            if (nodes_[w_idx].needs_grad) {
                const T* pd = self.scratch.data();
                T* dw = nodes_[w_idx].grad.data();
                // Row-wise elementwise products accumulate into per-kx lanes;
                // the scalar reduction happens once per (o, c, ky, kx).
                par_for(O, [&](int o0, int o1) {
                    std::vector<T> lanes(static_cast<std::size_t>(k) * Wo);
                    for (int o = o0; o < o1; ++o)
                        for (int c = 0; c < C; ++c)
                            for (int ky = 0; ky < k; ++ky) {
                                std::fill(lanes.begin(), lanes.end(), T(0));
                                for (int y = 0; y < Ho; ++y) {
                                    const T* grow = g + (static_cast<std::size_t>(o) * Ho + y) * Wo;
                                    const T* srow =
                                        pd +
                                        (static_cast<std::size_t>(c) * Hp + y * stride + ky) * Wp;
                                    for (int kx = 0; kx < k; ++kx) {
                                        T* lane = lanes.data() + static_cast<std::size_t>(kx) * Wo;
                                        const T* s2 = srow + kx;
                                        if (stride == 1)
                                            for (int x = 0; x < Wo; ++x) lane[x] += grow[x] * s2[x];
                                        else
                                            for (int x = 0; x < Wo; ++x)
                                                lane[x] += grow[x] * s2[2 * x];
                                    }
                                }
                                for (int kx = 0; kx < k; ++kx) {
                                    double acc = 0.0;
                                    const T* lane = lanes.data() + static_cast<std::size_t>(kx) * Wo;
                                    for (int x = 0; x < Wo; ++x) acc += lane[x];
                                    dw[((static_cast<std::size_t>(o) * C + c) * k + ky) * k + kx] +=
                                        static_cast<T>(acc);
                                }
                            }
                });
            }

            if (nodes_[in_idx].needs_grad) {
                const T* w = nodes_[w_idx].value.data();
                bwd_scratch_.assign(static_cast<std::size_t>(C) * Hp * Wp, T(0));
                std::vector<T>& dpad = bwd_scratch_;
                par_for(C, [&](int c0, int c1) {
                    for (int c = c0; c < c1; ++c)
                        for (int o = 0; o < O; ++o)
                            for (int ky = 0; ky < k; ++ky)
                                for (int kx = 0; kx < k; ++kx) {
                                    const T wv =
                                        w[((static_cast<std::size_t>(o) * C + c) * k + ky) * k + kx];
                                    if (wv == T(0)) continue;
                                    for (int y = 0; y < Ho; ++y) {
                                        const T* grow =
                                            g + (static_cast<std::size_t>(o) * Ho + y) * Wo;
                                        T* prow = dpad.data() +
                                                  (static_cast<std::size_t>(c) * Hp + y * stride +
                                                   ky) *
                                                      Wp +
                                                  kx;
                                        if (stride == 1)
                                            for (int x = 0; x < Wo; ++x) prow[x] += wv * grow[x];
                                        else
                                            for (int x = 0; x < Wo; ++x) prow[2 * x] += wv * grow[x];
                                    }
                                }
                });
                // Fold the padded gradient back through the reflection map.
                T* din = nodes_[in_idx].grad.data();
                par_for(C, [&](int c0, int c1) {
                    for (int c = c0; c < c1; ++c)
                        for (int y = 0; y < Hp; ++y) {
                            const int ry = reflect_index(y - p, H);
                            const T* prow = dpad.data() + (static_cast<std::size_t>(c) * Hp + y) * Wp;
                            T* drow = din + (static_cast<std::size_t>(c) * H + ry) * W;
                            for (int x = 0; x < Wp; ++x) drow[reflect_index(x - p, W)] += prow[x];
                        }
                });
            }
        };
        n.parents = {in_idx, w_idx, b_idx};
        return push(std::move(n));
    }

    Var leaky_relu(Var x, T slope) {
        Node n;
        n.shape = shape(x);
        n.needs_grad = needs_grad(x);
        const auto& v = value(x);
        n.value = take_buffer(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) n.value[i] = v[i] >= T(0) ? v[i] : slope * v[i];
        const int xi = x.idx;
        n.backward = [this, xi, slope](const Node& self) {
            if (!nodes_[xi].needs_grad) return;
            const auto& v = nodes_[xi].value;
            auto& dx = nodes_[xi].grad;
            for (std::size_t i = 0; i < v.size(); ++i)
                dx[i] += self.grad[i] * (v[i] >= T(0) ? T(1) : slope);
        };
        n.parents = {xi};
        return push(std::move(n));
    }

    // Output pixel o samples source coordinate (o + 0.5)/2 - 0.5, clamped.
    Var upsample_bilinear2x(Var x) {
        const auto& is = shape(x);
        if (is.size() != 3) fail(errc::shape_error, "upsample expects [C,H,W]");
        const int C = is[0], H = is[1], W = is[2];
        const int Ho = 2 * H, Wo = 2 * W;

        auto make_map = [](int n_out, int n_in, std::vector<int>& i0, std::vector<int>& i1,
                           std::vector<T>& f) {
            i0.resize(n_out);
            i1.resize(n_out);
            f.resize(n_out);
            for (int o = 0; o < n_out; ++o) {
                const double s = (o + 0.5) / 2.0 - 0.5;
                const double fl = std::floor(s);
                const int a = static_cast<int>(fl);
                f[o] = static_cast<T>(s - fl);
                i0[o] = std::clamp(a, 0, n_in - 1);
                i1[o] = std::clamp(a + 1, 0, n_in - 1);
            }
        };
        auto ymap = std::make_shared<std::array<std::vector<int>, 2>>();
        auto xmap = std::make_shared<std::array<std::vector<int>, 2>>();
        auto yf = std::make_shared<std::vector<T>>();
        auto xf = std::make_shared<std::vector<T>>();
        make_map(Ho, H, (*ymap)[0], (*ymap)[1], *yf);
        make_map(Wo, W, (*xmap)[0], (*xmap)[1], *xf);

        Node n;
        n.shape = {C, Ho, Wo};
        n.needs_grad = needs_grad(x);
        n.value = take_buffer(static_cast<std::size_t>(C) * Ho * Wo);
        {
            const T* in = value(x).data();
            T* out = n.value.data();
            for (int c = 0; c < C; ++c)
                for (int oy = 0; oy < Ho; ++oy) {
                    const T fy = (*yf)[oy];
                    const T* r0 = in + (static_cast<std::size_t>(c) * H + (*ymap)[0][oy]) * W;
                    const T* r1 = in + (static_cast<std::size_t>(c) * H + (*ymap)[1][oy]) * W;
                    T* orow = out + (static_cast<std::size_t>(c) * Ho + oy) * Wo;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const T fx = (*xf)[ox];
                        const int x0 = (*xmap)[0][ox], x1 = (*xmap)[1][ox];
                        const T top = (T(1) - fx) * r0[x0] + fx * r0[x1];
                        const T bot = (T(1) - fx) * r1[x0] + fx * r1[x1];
                        orow[ox] = (T(1) - fy) * top + fy * bot;
                    }
                }
        }
        const int xi = x.idx;
        n.backward = [this, xi, ymap, xmap, yf, xf, C, H, W, Ho, Wo](const Node& self) {
            if (!nodes_[xi].needs_grad) return;
            T* dx = nodes_[xi].grad.data();
            const T* g = self.grad.data();
            for (int c = 0; c < C; ++c)
                for (int oy = 0; oy < Ho; ++oy) {
                    const T fy = (*yf)[oy];
                    T* r0 = dx + (static_cast<std::size_t>(c) * H + (*ymap)[0][oy]) * W;
                    T* r1 = dx + (static_cast<std::size_t>(c) * H + (*ymap)[1][oy]) * W;
                    const T* grow = g + (static_cast<std::size_t>(c) * Ho + oy) * Wo;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const T fx = (*xf)[ox];
                        const int x0 = (*xmap)[0][ox], x1 = (*xmap)[1][ox];
                        const T gv = grow[ox];
                        r0[x0] += (T(1) - fy) * (T(1) - fx) * gv;
                        r0[x1] += (T(1) - fy) * fx * gv;
                        r1[x0] += fy * (T(1) - fx) * gv;
                        r1[x1] += fy * fx * gv;
                    }
                }
        };
        n.parents = {xi};
        return push(std::move(n));
    }

    Var concat_channels(Var a, Var b) {
        const auto& as = shape(a);
        const auto& bs = shape(b);
        if (as.size() != 3 || bs.size() != 3 || as[1] != bs[1] || as[2] != bs[2])
            fail(errc::shape_error, "concat spatial shapes must match");
        const int Ca = as[0], Cb = bs[0], H = as[1], W = as[2];
        Node n;
        n.shape = {Ca + Cb, H, W};
        n.needs_grad = needs_grad(a) || needs_grad(b);
        n.value = take_buffer(static_cast<std::size_t>(Ca + Cb) * H * W);
        std::copy(value(a).begin(), value(a).end(), n.value.begin());
        std::copy(value(b).begin(), value(b).end(),
                  n.value.begin() + static_cast<std::ptrdiff_t>(value(a).size()));
        const int ai = a.idx, bi = b.idx;
        const std::size_t na = value(a).size();
        n.backward = [this, ai, bi, na](const Node& self) {
            if (nodes_[ai].needs_grad) {
                auto& da = nodes_[ai].grad;
                for (std::size_t i = 0; i < da.size(); ++i) da[i] += self.grad[i];
            }
            if (nodes_[bi].needs_grad) {
                auto& db = nodes_[bi].grad;
                for (std::size_t i = 0; i < db.size(); ++i) db[i] += self.grad[na + i];
            }
        };
        n.parents = {ai, bi};
        return push(std::move(n));
    }

    // Crops the top-left [C, H, W] window; inverse of trailing reflect padding.
    Var crop_spatial(Var x, int H, int W) {
        const auto& is = shape(x);
        if (is.size() != 3 || is[1] < H || is[2] < W) fail(errc::shape_error, "crop out of range");
        const int C = is[0], Hi = is[1], Wi = is[2];
        Node n;
        n.shape = {C, H, W};
        n.needs_grad = needs_grad(x);
        n.value = take_buffer(static_cast<std::size_t>(C) * H * W);
        const T* in = value(x).data();
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                std::copy(in + (static_cast<std::size_t>(c) * Hi + y) * Wi,
                          in + (static_cast<std::size_t>(c) * Hi + y) * Wi + W,
                          n.value.begin() + (static_cast<std::size_t>(c) * H + y) * W);
        const int xi = x.idx;
        n.backward = [this, xi, C, H, W, Hi, Wi](const Node& self) {
            if (!nodes_[xi].needs_grad) return;
            T* dx = nodes_[xi].grad.data();
            const T* g = self.grad.data();
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < H; ++y) {
                    T* drow = dx + (static_cast<std::size_t>(c) * Hi + y) * Wi;
                    const T* grow = g + (static_cast<std::size_t>(c) * H + y) * W;
                    for (int x = 0; x < W; ++x) drow[x] += grow[x];
                }
        };
        n.parents = {xi};
        return push(std::move(n));
    }

    // Reflect-pads the bottom/right edge so spatial dims become multiples of m.
    Var pad_to_multiple(Var x, int m) {
        const auto& is = shape(x);
        if (is.size() != 3) fail(errc::shape_error, "pad expects [C,H,W]");
        const int C = is[0], H = is[1], W = is[2];
        const int Ho = (H + m - 1) / m * m, Wo = (W + m - 1) / m * m;
        if (Ho == H && Wo == W) return x;
        Node n;
        n.shape = {C, Ho, Wo};
        n.needs_grad = needs_grad(x);
        n.value = take_buffer(static_cast<std::size_t>(C) * Ho * Wo);
        const T* in = value(x).data();
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < Ho; ++y) {
                const T* srow = in + (static_cast<std::size_t>(c) * H + reflect_index(y, H)) * W;
                T* drow = n.value.data() + (static_cast<std::size_t>(c) * Ho + y) * Wo;
                for (int x = 0; x < Wo; ++x) drow[x] = srow[reflect_index(x, W)];
            }
        const int xi = x.idx;
        n.backward = [this, xi, C, H, W, Ho, Wo](const Node& self) {
            if (!nodes_[xi].needs_grad) return;
            T* dx = nodes_[xi].grad.data();
            const T* g = self.grad.data();
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < Ho; ++y) {
                    const int ry = reflect_index(y, H);
                    const T* grow = g + (static_cast<std::size_t>(c) * Ho + y) * Wo;
                    T* drow = dx + (static_cast<std::size_t>(c) * H + ry) * W;
                    for (int x = 0; x < Wo; ++x) drow[reflect_index(x, W)] += grow[x];
                }
        };
        n.parents = {xi};
        return push(std::move(n));
    }

    Var add(Var a, Var b) { return binary(a, b, /*mul=*/false, /*sub=*/false); }
    Var sub(Var a, Var b) { return binary(a, b, /*mul=*/false, /*sub=*/true); }
    Var mul(Var a, Var b) { return binary(a, b, /*mul=*/true, /*sub=*/false); }

    Var scale(Var x, T factor) {
        Node n;
        n.shape = shape(x);
        n.needs_grad = needs_grad(x);
        const auto& v = value(x);
        n.value = take_buffer(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) n.value[i] = factor * v[i];
        const int xi = x.idx;
        n.backward = [this, xi, factor](const Node& self) {
            if (!nodes_[xi].needs_grad) return;
            auto& dx = nodes_[xi].grad;
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += factor * self.grad[i];
        };
        n.parents = {xi};
        return push(std::move(n));
    }

    // Subgradient at 0 is 0.
    Var abs(Var x) {
        Node n;
        n.shape = shape(x);
        n.needs_grad = needs_grad(x);
        const auto& v = value(x);
        n.value = take_buffer(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) n.value[i] = std::abs(v[i]);
        const int xi = x.idx;
        n.backward = [this, xi](const Node& self) {
            if (!nodes_[xi].needs_grad) return;
            const auto& v = nodes_[xi].value;
            auto& dx = nodes_[xi].grad;
            for (std::size_t i = 0; i < v.size(); ++i)
                dx[i] += self.grad[i] * (v[i] > T(0) ? T(1) : v[i] < T(0) ? T(-1) : T(0));
        };
        n.parents = {xi};
        return push(std::move(n));
    }

    Var square(Var x) {
        Node n;
        n.shape = shape(x);
        n.needs_grad = needs_grad(x);
        const auto& v = value(x);
        n.value = take_buffer(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) n.value[i] = v[i] * v[i];
        const int xi = x.idx;
        n.backward = [this, xi](const Node& self) {
            if (!nodes_[xi].needs_grad) return;
            const auto& v = nodes_[xi].value;
            auto& dx = nodes_[xi].grad;
            for (std::size_t i = 0; i < v.size(); ++i) dx[i] += T(2) * v[i] * self.grad[i];
        };
        n.parents = {xi};
        return push(std::move(n));
    }

    // Reductions accumulate in double regardless of T.
    Var sum(Var x) {
        Node n;
        n.shape = {1};
        n.needs_grad = needs_grad(x);
        double acc = 0.0;
        for (T v : value(x)) acc += static_cast<double>(v);
        n.value = {static_cast<T>(acc)};
        const int xi = x.idx;
        n.backward = [this, xi](const Node& self) {
            if (!nodes_[xi].needs_grad) return;
            auto& dx = nodes_[xi].grad;
            const T g = self.grad[0];
            for (auto& d : dx) d += g;
        };
        n.parents = {xi};
        return push(std::move(n));
    }

    Var mean(Var x) {
        const T inv = static_cast<T>(1.0 / static_cast<double>(value(x).size()));
        return scale(sum(x), inv);
    }

    // Appends a custom node (used by the fused loss); fwd already evaluated.
    Var custom(std::vector<int> shape, std::vector<T> value_, std::vector<int> parents,
               std::function<void(Tape<T>&, const std::vector<T>& self_grad)> pull) {
        Node n;
        n.shape = std::move(shape);
        n.value = std::move(value_);
        n.needs_grad = false;
        for (int p : parents) n.needs_grad = n.needs_grad || nodes_[p].needs_grad;
        n.parents = parents;
        n.backward = [this, pull](const Node& self) { pull(*this, self.grad); };
        return push(std::move(n));
    }

    // Accumulates dLoss/d(leaf) into leaf grads.  Repeated calls without
    // clear() keep accumulating on the leaves; intermediate grads are
    // transient and reset per walk.
    void backward(Var loss) {
        if (value(loss).size() != 1) fail(errc::shape_error, "backward needs a scalar loss");
        if (!nodes_[loss.idx].needs_grad) return;
        for (int i = 0; i <= loss.idx; ++i) {
            Node& n = nodes_[i];
            if (n.needs_grad && n.backward) std::fill(n.grad.begin(), n.grad.end(), T(0));
        }
        nodes_[loss.idx].grad[0] = T(1);
        for (int i = loss.idx; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.needs_grad && n.backward) n.backward(n);
        }
    }

private:
    struct Node {
        std::vector<int> shape;
        std::vector<T> value;
        std::vector<T> grad;
        std::vector<T> scratch;  // op-owned forward context (e.g. padded input)
        bool needs_grad = false;
        std::vector<int> parents;
        std::function<void(const Node&)> backward;
    };

    // Zero-filled buffer of length n, recycled from cleared nodes when one
    // with enough capacity is available.
    std::vector<T> take_buffer(std::size_t n) {
        int best = -1;
        for (int i = 0; i < static_cast<int>(recycle_.size()); ++i) {
            const std::size_t cap = recycle_[i].capacity();
            if (cap >= n && (best < 0 || cap < recycle_[best].capacity())) best = i;
        }
        std::vector<T> out;
        if (best >= 0) {
            out = std::move(recycle_[best]);
            recycle_.erase(recycle_.begin() + best);
            out.clear();
        }
        out.resize(n, T(0));
        return out;
    }

    Var push(Node&& n) {
        if (n.needs_grad) n.grad = take_buffer(n.value.size());
        nodes_.push_back(std::move(n));
        return {static_cast<int>(nodes_.size()) - 1};
    }

    Var binary(Var a, Var b, bool mul_, bool sub_) {
        if (shape(a) != shape(b)) fail(errc::shape_error, "elementwise shape mismatch");
        Node n;
        n.shape = shape(a);
        n.needs_grad = needs_grad(a) || needs_grad(b);
        const auto& va = value(a);
        const auto& vb = value(b);
        n.value = take_buffer(va.size());
        if (mul_)
            for (std::size_t i = 0; i < va.size(); ++i) n.value[i] = va[i] * vb[i];
        else if (sub_)
            for (std::size_t i = 0; i < va.size(); ++i) n.value[i] = va[i] - vb[i];
        else
            for (std::size_t i = 0; i < va.size(); ++i) n.value[i] = va[i] + vb[i];
        const int ai = a.idx, bi = b.idx;
        n.backward = [this, ai, bi, mul_, sub_](const Node& self) {
            if (nodes_[ai].needs_grad) {
                auto& da = nodes_[ai].grad;
                if (mul_) {
                    const auto& vb = nodes_[bi].value;
                    for (std::size_t i = 0; i < da.size(); ++i) da[i] += self.grad[i] * vb[i];
                } else {
                    for (std::size_t i = 0; i < da.size(); ++i) da[i] += self.grad[i];
                }
            }
            if (nodes_[bi].needs_grad) {
                auto& db = nodes_[bi].grad;
                if (mul_) {
                    const auto& va = nodes_[ai].value;
                    for (std::size_t i = 0; i < db.size(); ++i) db[i] += self.grad[i] * va[i];
                } else if (sub_) {
                    for (std::size_t i = 0; i < db.size(); ++i) db[i] -= self.grad[i];
                } else {
                    for (std::size_t i = 0; i < db.size(); ++i) db[i] += self.grad[i];
                }
            }
        };
        n.parents = {ai, bi};
        return push(std::move(n));
    }

    std::vector<Node> nodes_;
    std::vector<std::vector<T>> recycle_;
    std::vector<T> bwd_scratch_;  // conv dpad workspace (backward is serial)
    std::unique_ptr<detail::WorkerPool> pool_;
};

}  // namespace beamdip

#endif  // BEAMDIP_AUTODIFF_HPP
