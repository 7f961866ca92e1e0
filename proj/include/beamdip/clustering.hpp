/*
 * Signal/background discrimination: threshold partition, DBSCAN, HDBSCAN
 * (single-linkage over mutual reachability, excess-of-mass extraction) and
 * a 2D Gaussian mixture fit by EM.
 *
 * Copyright 2026 the beamdip authors
 * Licensed under the terms of the Apache 2.0 License.
 * See LICENSE file in the project root for terms.
 */

#ifndef BEAMDIP_CLUSTERING_HPP
#define BEAMDIP_CLUSTERING_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <numeric>
#include <vector>

#include "beamdip/core.hpp"
#include "beamdip/image.hpp"

namespace beamdip {

struct Point2 {
    double x = 0.0;
    double y = 0.0;
    double w = 1.0;  // optional intensity weight; not part of the distance metric
};

struct PointCloud {
    std::vector<Point2> points;

    std::size_t size() const { return points.size(); }

    void validate() const {
        for (const auto& p : points)
            if (!std::isfinite(p.x) || !std::isfinite(p.y))
                fail(errc::bad_params, "point coordinates must be finite");
    }
};

struct ClusterLabels {
    std::vector<int> labels;  // -1 = noise, 0..k-1 = clusters
    int k = 0;
};

// Binary signal mask: intensity >= threshold.
inline std::vector<std::uint8_t> threshold_partition(const ScanImage& img, double threshold) {
    img.validate();
    std::vector<std::uint8_t> mask(img.pixel_count());
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = img.intensities[i] >= threshold;
    return mask;
}

// One point per pixel at or above the intensity floor, at physical
// coordinates, carrying the intensity as weight.
inline PointCloud image_to_cloud(const ScanImage& img, double floor_intensity) {
    img.validate();
    PointCloud cloud;
    for (int r = 0; r < img.rows; ++r)
        for (int c = 0; c < img.cols; ++c)
            if (img.at(r, c) >= floor_intensity)
                cloud.points.push_back({img.x_of(c), img.xp_of(r), img.at(r, c)});
    return cloud;
}

namespace detail {

inline double dist2(const Point2& a, const Point2& b) {
    const double dx = a.x - b.x, dy = a.y - b.y;
    return dx * dx + dy * dy;
}

}  // namespace detail

// Classic DBSCAN.  Neighborhoods include the query point itself, so a point
// with min_pts - 1 true neighbors within eps is core.  Border points join
// the first core cluster that reaches them in input order.
inline ClusterLabels dbscan(const PointCloud& cloud, double eps, int min_pts) {
    cloud.validate();
    if (!(eps > 0.0)) fail(errc::bad_params, "eps must be positive");
    if (min_pts < 1) fail(errc::bad_params, "min_pts must be >= 1");
    const std::size_t n = cloud.size();
    ClusterLabels out;
    out.labels.assign(n, -1);
    if (n == 0) return out;

    const double eps2 = eps * eps;
    std::vector<std::vector<int>> neighbors(n);
    std::vector<std::uint8_t> core(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j)
            if (detail::dist2(cloud.points[i], cloud.points[j]) <= eps2)
                neighbors[i].push_back(static_cast<int>(j));
        core[i] = neighbors[i].size() >= static_cast<std::size_t>(min_pts);
    }

    std::vector<std::uint8_t> assigned(n, 0);
    int k = 0;
    std::deque<int> queue;
    for (std::size_t i = 0; i < n; ++i) {
        if (!core[i] || assigned[i]) continue;
        out.labels[i] = k;
        assigned[i] = 1;
        queue.assign(1, static_cast<int>(i));
        while (!queue.empty()) {
            const int p = queue.front();
            queue.pop_front();
            for (int q : neighbors[p]) {
                if (assigned[q]) continue;
                out.labels[q] = k;
                assigned[q] = 1;
                if (core[q]) queue.push_back(q);
            }
        }
        ++k;
    }
    out.k = k;
    return out;
}

namespace detail {

struct CondensedCluster {
    int parent = -1;
    double lambda_birth = 0.0;
    double stability = 0.0;
    std::vector<int> children;
};

constexpr double kLambdaCap = 1e300;

inline double to_lambda(double dist) { return dist > 0.0 ? 1.0 / dist : kLambdaCap; }

}  // namespace detail

// HDBSCAN: core distances with k = min_cluster_size (counting the point
// itself), mutual-reachability MST, condensed tree, excess-of-mass cluster
// selection with the root as a regular candidate, so single-blob inputs come
// back as one cluster instead of dissolving into noise.
inline ClusterLabels hdbscan(const PointCloud& cloud, int min_cluster_size) {
    cloud.validate();
    if (min_cluster_size < 2) fail(errc::bad_params, "min_cluster_size must be >= 2");
    const int n = static_cast<int>(cloud.size());
    ClusterLabels out;
    out.labels.assign(n, -1);
    if (n < min_cluster_size) return out;

    // Core distances.
    std::vector<double> core(n);
    {
        std::vector<double> d(n);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) d[j] = std::sqrt(detail::dist2(cloud.points[i], cloud.points[j]));
            std::nth_element(d.begin(), d.begin() + (min_cluster_size - 1), d.end());
            core[i] = d[min_cluster_size - 1];
        }
    }

    // Prim MST over mutual reachability distances.
    std::vector<int> mst_a(n - 1), mst_b(n - 1);
    std::vector<double> mst_w(n - 1);
    {
        std::vector<double> best(n, std::numeric_limits<double>::infinity());
        std::vector<int> from(n, 0);
        std::vector<std::uint8_t> used(n, 0);
        used[0] = 1;
        for (int j = 1; j < n; ++j) {
            const double mr = std::max({core[0], core[j],
                                        std::sqrt(detail::dist2(cloud.points[0], cloud.points[j]))});
            best[j] = mr;
        }
        for (int e = 0; e < n - 1; ++e) {
            int pick = -1;
            for (int j = 0; j < n; ++j)
                if (!used[j] && (pick < 0 || best[j] < best[pick])) pick = j;
            if (pick < 0) break;
            used[pick] = 1;
            mst_a[e] = from[pick];
            mst_b[e] = pick;
            mst_w[e] = best[pick];
            for (int j = 0; j < n; ++j) {
                if (used[j]) continue;
                const double mr = std::max({core[pick], core[j],
                                            std::sqrt(detail::dist2(cloud.points[pick], cloud.points[j]))});
                if (mr < best[j]) {
                    best[j] = mr;
                    from[j] = pick;
                }
            }
        }
    }

    // Single-linkage dendrogram: leaves 0..n-1, internal nodes n..2n-2.
    std::vector<int> order(n - 1);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return mst_w[a] < mst_w[b]; });
    const int total_nodes = 2 * n - 1;
    std::vector<int> left(total_nodes, -1), right(total_nodes, -1), size(total_nodes, 1);
    std::vector<double> merge_dist(total_nodes, 0.0);
    std::vector<int> uf(total_nodes);
    std::iota(uf.begin(), uf.end(), 0);
    auto find = [&](int x) {
        while (uf[x] != x) x = uf[x] = uf[uf[x]];
        return x;
    };
    int next_node = n;
    for (int idx : order) {
        const int ra = find(mst_a[idx]), rb = find(mst_b[idx]);
        left[next_node] = ra;
        right[next_node] = rb;
        size[next_node] = size[ra] + size[rb];
        merge_dist[next_node] = mst_w[idx];
        uf[ra] = uf[rb] = next_node;
        ++next_node;
    }
    const int root = next_node - 1;

    // Condensed tree.  exit_cluster[p] = deepest condensed cluster p belonged
    // to when it left the hierarchy.
    std::vector<detail::CondensedCluster> clusters;
    std::vector<int> exit_cluster(n, -1);
    auto collect_points = [&](int node, std::vector<int>& into) {
        std::vector<int> stack{node};
        while (!stack.empty()) {
            const int u = stack.back();
            stack.pop_back();
            if (u < n)
                into.push_back(u);
            else {
                stack.push_back(left[u]);
                stack.push_back(right[u]);
            }
        }
    };
    clusters.push_back({});  // root cluster, lambda_birth 0
    std::vector<std::pair<int, int>> work{{root, 0}};  // (raw node, condensed id)
    std::vector<int> dropped;
    while (!work.empty()) {
        auto [node, cid] = work.back();
        work.pop_back();
        int current = node;
        while (true) {
            if (current < n) {
                // Unreachable while min_cluster_size >= 2; kept as a guard.
                exit_cluster[current] = cid;
                break;
            }
            const double lambda = detail::to_lambda(merge_dist[current]);
            const int l = left[current], r = right[current];
            const bool l_big = size[l] >= min_cluster_size;
            const bool r_big = size[r] >= min_cluster_size;
            if (l_big && r_big) {
                clusters[cid].stability +=
                    (lambda - clusters[cid].lambda_birth) * static_cast<double>(size[current]);
                for (int child_node : {l, r}) {
                    detail::CondensedCluster child;
                    child.parent = cid;
                    child.lambda_birth = lambda;
                    clusters.push_back(child);
                    const int child_id = static_cast<int>(clusters.size()) - 1;
                    clusters[cid].children.push_back(child_id);
                    work.push_back({child_node, child_id});
                }
                break;
            }
            if (!l_big && !r_big) {
                // Cluster dissolves: every remaining point exits here.
                dropped.clear();
                collect_points(current, dropped);
                for (int p : dropped) exit_cluster[p] = cid;
                clusters[cid].stability +=
                    (lambda - clusters[cid].lambda_birth) * static_cast<double>(size[current]);
                break;
            }
            // Noise dribble: the small side falls out, the cluster continues.
            const int small = l_big ? r : l;
            dropped.clear();
            collect_points(small, dropped);
            for (int p : dropped) exit_cluster[p] = cid;
            clusters[cid].stability +=
                (lambda - clusters[cid].lambda_birth) * static_cast<double>(size[small]);
            current = l_big ? l : r;
        }
    }

    // Excess-of-mass: children before parents (creation order is top-down).
    const int m = static_cast<int>(clusters.size());
    std::vector<double> subtree_stab(m, 0.0);
    std::vector<std::uint8_t> flagged(m, 0);
    for (int cid = m - 1; cid >= 0; --cid) {
        double child_sum = 0.0;
        for (int ch : clusters[cid].children) child_sum += subtree_stab[ch];
        if (clusters[cid].children.empty() || clusters[cid].stability >= child_sum) {
            flagged[cid] = 1;
            subtree_stab[cid] = std::max(clusters[cid].stability, child_sum);
        } else {
            subtree_stab[cid] = child_sum;
        }
    }
    // The root competes like any cluster: it wins only when no substructure
    // is more stable, in which case the whole dataset is one cluster.
    std::vector<int> chosen_of(m, -1);
    std::vector<int> chosen;
    std::vector<int> stack{0};
    while (!stack.empty()) {
        const int cid = stack.back();
        stack.pop_back();
        if (flagged[cid]) {
            chosen_of[cid] = static_cast<int>(chosen.size());
            chosen.push_back(cid);
            continue;
        }
        for (int ch : clusters[cid].children) stack.push_back(ch);
    }
    std::sort(chosen.begin(), chosen.end());
    for (std::size_t i = 0; i < chosen.size(); ++i) chosen_of[chosen[i]] = static_cast<int>(i);

    for (int p = 0; p < n; ++p) {
        int cid = exit_cluster[p];
        while (cid >= 0 && chosen_of[cid] < 0) cid = clusters[cid].parent;
        if (cid >= 0) out.labels[p] = chosen_of[cid];
    }
    out.k = static_cast<int>(chosen.size());
    // Compact away any chosen cluster that ended up empty.
    std::vector<int> counts(out.k, 0);
    for (int l : out.labels)
        if (l >= 0) ++counts[l];
    std::vector<int> remap(out.k, -1);
    int kk = 0;
    for (int c = 0; c < out.k; ++c)
        if (counts[c] > 0) remap[c] = kk++;
    for (int& l : out.labels)
        if (l >= 0) l = remap[l];
    out.k = kk;
    return out;
}

struct GmmComponent {
    double weight = 0.0;
    std::array<double, 2> mean{0.0, 0.0};
    std::array<double, 4> cov{1.0, 0.0, 0.0, 1.0};  // row-major 2x2
};

struct GmmResult {
    std::vector<GmmComponent> components;
    std::vector<int> labels;
    std::vector<double> log_likelihood;  // one entry per EM iteration
};

// EM for a k-component 2D Gaussian mixture.  Covariances are regularized by
// adding 1e-6 * trace/2 to the diagonal each M step.  Deterministic for a
// fixed seed; optional per-point intensity weighting.
inline GmmResult gmm_fit(const PointCloud& cloud, int k, std::uint64_t seed,
                         bool use_intensity_weights = false, int max_iters = 500,
                         double rel_tol = 1e-8) {
    cloud.validate();
    if (k < 1) fail(errc::bad_params, "k must be >= 1");
    const int n = static_cast<int>(cloud.size());
    if (n < 10 * k) fail(errc::bad_params, "need at least 10*k points");

    std::vector<double> pw(n, 1.0);
    if (use_intensity_weights)
        for (int i = 0; i < n; ++i) {
            if (cloud.points[i].w < 0.0) fail(errc::bad_params, "negative intensity weight");
            pw[i] = cloud.points[i].w;
        }
    const double pw_total = std::accumulate(pw.begin(), pw.end(), 0.0);
    if (!(pw_total > 0.0)) fail(errc::bad_params, "total point weight is zero");

    GmmResult res;
    res.components.assign(k, GmmComponent{});
    res.labels.assign(n, 0);

    // Global covariance seeds every component.
    double gx = 0.0, gy = 0.0;
    for (int i = 0; i < n; ++i) {
        gx += pw[i] * cloud.points[i].x;
        gy += pw[i] * cloud.points[i].y;
    }
    gx /= pw_total;
    gy /= pw_total;
    std::array<double, 4> gcov{0.0, 0.0, 0.0, 0.0};
    for (int i = 0; i < n; ++i) {
        const double dx = cloud.points[i].x - gx, dy = cloud.points[i].y - gy;
        gcov[0] += pw[i] * dx * dx;
        gcov[1] += pw[i] * dx * dy;
        gcov[3] += pw[i] * dy * dy;
    }
    for (double& v : gcov) v /= pw_total;
    gcov[2] = gcov[1];
    const double greg = 1e-6 * (gcov[0] + gcov[3]) / 2.0 + 1e-12;
    gcov[0] += greg;
    gcov[3] += greg;

    Rng rng(seed, 0xC1C1ull);
    std::vector<int> pick(n);
    std::iota(pick.begin(), pick.end(), 0);
    for (int c = 0; c < k; ++c) {
        const std::size_t j = c + rng.index(static_cast<std::size_t>(n - c));
        std::swap(pick[c], pick[j]);
        res.components[c].weight = 1.0 / k;
        res.components[c].mean = {cloud.points[pick[c]].x, cloud.points[pick[c]].y};
        res.components[c].cov = gcov;
    }

    std::vector<double> resp(static_cast<std::size_t>(n) * k);
    std::vector<double> log_norm(k), inv00(k), inv01(k), inv11(k);

    for (int iter = 0; iter < max_iters; ++iter) {
        for (int c = 0; c < k; ++c) {
            const auto& cv = res.components[c].cov;
            const double det = cv[0] * cv[3] - cv[1] * cv[2];
            if (!(det > 0.0) || !std::isfinite(det))
                fail(errc::singular_component, "component covariance is singular");
            inv00[c] = cv[3] / det;
            inv01[c] = -cv[1] / det;
            inv11[c] = cv[0] / det;
            log_norm[c] = -std::log(2.0 * M_PI) - 0.5 * std::log(det) +
                          std::log(std::max(res.components[c].weight, 1e-300));
        }

        // E step with log-sum-exp; accumulate the data log-likelihood.
        double ll = 0.0;
        for (int i = 0; i < n; ++i) {
            double best = -std::numeric_limits<double>::infinity();
            for (int c = 0; c < k; ++c) {
                const double dx = cloud.points[i].x - res.components[c].mean[0];
                const double dy = cloud.points[i].y - res.components[c].mean[1];
                const double q = inv00[c] * dx * dx + 2.0 * inv01[c] * dx * dy + inv11[c] * dy * dy;
                const double lp = log_norm[c] - 0.5 * q;
                resp[static_cast<std::size_t>(i) * k + c] = lp;
                best = std::max(best, lp);
            }
            double sum = 0.0;
            for (int c = 0; c < k; ++c)
                sum += std::exp(resp[static_cast<std::size_t>(i) * k + c] - best);
            const double log_px = best + std::log(sum);
            ll += pw[i] * log_px;
            for (int c = 0; c < k; ++c) {
                double& rc = resp[static_cast<std::size_t>(i) * k + c];
                rc = std::exp(rc - log_px);
            }
        }
        res.log_likelihood.push_back(ll);

        // M step.
        for (int c = 0; c < k; ++c) {
            double wsum = 0.0, mx = 0.0, my = 0.0;
            for (int i = 0; i < n; ++i) {
                const double r = pw[i] * resp[static_cast<std::size_t>(i) * k + c];
                wsum += r;
                mx += r * cloud.points[i].x;
                my += r * cloud.points[i].y;
            }
            if (!(wsum > 0.0)) fail(errc::singular_component, "component lost all responsibility");
            mx /= wsum;
            my /= wsum;
            double c00 = 0.0, c01 = 0.0, c11 = 0.0;
            for (int i = 0; i < n; ++i) {
                const double r = pw[i] * resp[static_cast<std::size_t>(i) * k + c];
                const double dx = cloud.points[i].x - mx, dy = cloud.points[i].y - my;
                c00 += r * dx * dx;
                c01 += r * dx * dy;
                c11 += r * dy * dy;
            }
            c00 /= wsum;
            c01 /= wsum;
            c11 /= wsum;
            const double reg = 1e-6 * (c00 + c11) / 2.0;
            res.components[c].weight = wsum / pw_total;
            res.components[c].mean = {mx, my};
            res.components[c].cov = {c00 + reg, c01, c01, c11 + reg};
        }

        if (res.log_likelihood.size() >= 2) {
            const double prev = res.log_likelihood[res.log_likelihood.size() - 2];
            const double cur = res.log_likelihood.back();
            if (std::abs(cur - prev) < rel_tol * std::max(1.0, std::abs(prev))) break;
        }
    }

    for (int i = 0; i < n; ++i) {
        int best_c = 0;
        for (int c = 1; c < k; ++c)
            if (resp[static_cast<std::size_t>(i) * k + c] >
                resp[static_cast<std::size_t>(i) * k + best_c])
                best_c = c;
        res.labels[i] = best_c;
    }
    return res;
}

}  // namespace beamdip

#endif  // BEAMDIP_CLUSTERING_HPP
