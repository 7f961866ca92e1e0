/*
 * clustering: DBSCAN against a brute-force reachability oracle, HDBSCAN
 * structure recovery, GMM-EM closed forms and monotonicity.
 *
 * Copyright 2026 the beamdip authors
 * Licensed under the terms of the Apache 2.0 License.
 * See LICENSE file in the project root for terms.
 */

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <vector>

#include "beamdip/clustering.hpp"
#include "beamdip/core.hpp"

using namespace beamdip;

namespace {

PointCloud blob(Rng& rng, double cx, double cy, double sigma, int n) {
    PointCloud cloud;
    for (int i = 0; i < n; ++i)
        cloud.points.push_back({cx + sigma * rng.normal(), cy + sigma * rng.normal()});
    return cloud;
}

void append(PointCloud& into, const PointCloud& from) {
    into.points.insert(into.points.end(), from.points.begin(), from.points.end());
}

// O(n^2) oracle: core points, then connected components of the core graph.
struct CoreOracle {
    std::vector<std::uint8_t> core;
    std::vector<int> component;  // -1 for non-core
};

CoreOracle brute_force_cores(const PointCloud& cloud, double eps, int min_pts) {
    const int n = static_cast<int>(cloud.size());
    CoreOracle o;
    o.core.assign(n, 0);
    o.component.assign(n, -1);
    const double e2 = eps * eps;
    for (int i = 0; i < n; ++i) {
        int count = 0;
        for (int j = 0; j < n; ++j)
            if (detail::dist2(cloud.points[i], cloud.points[j]) <= e2) ++count;
        o.core[i] = count >= min_pts;
    }
    int comp = 0;
    for (int i = 0; i < n; ++i) {
        if (!o.core[i] || o.component[i] >= 0) continue;
        std::vector<int> stack{i};
        o.component[i] = comp;
        while (!stack.empty()) {
            const int p = stack.back();
            stack.pop_back();
            for (int q = 0; q < n; ++q) {
                if (!o.core[q] || o.component[q] >= 0) continue;
                if (detail::dist2(cloud.points[p], cloud.points[q]) <= e2) {
                    o.component[q] = comp;
                    stack.push_back(q);
                }
            }
        }
        ++comp;
    }
    return o;
}

// Partitions restricted to core points must agree up to relabeling.
bool core_partitions_match(const PointCloud& cloud, const ClusterLabels& labels,
                           const CoreOracle& oracle) {
    std::map<int, int> fwd, bwd;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        if (!oracle.core[i]) continue;
        const int a = labels.labels[i], b = oracle.component[i];
        if (a < 0) return false;
        if (fwd.count(a) && fwd[a] != b) return false;
        if (bwd.count(b) && bwd[b] != a) return false;
        fwd[a] = b;
        bwd[b] = a;
    }
    return true;
}

}  // namespace

TEST_SUITE_BEGIN("clustering");

TEST_CASE("threshold partition endpoints and monotone signal count") {
    ScanImage img;
    img.rows = img.cols = 8;
    img.intensities.resize(64);
    Rng rng(3);
    for (auto& v : img.intensities) v = rng.uniform(0.0, 1.0);
    const double lo = *std::min_element(img.intensities.begin(), img.intensities.end());
    const double hi = *std::max_element(img.intensities.begin(), img.intensities.end());

    auto count = [](const std::vector<std::uint8_t>& m) {
        std::size_t c = 0;
        for (auto v : m) c += v;
        return c;
    };
    CHECK(count(threshold_partition(img, lo)) == 64);
    CHECK(count(threshold_partition(img, hi + 1.0)) == 0);

    std::size_t prev = 64;
    for (double t = lo; t <= hi; t += (hi - lo) / 17.0) {
        const std::size_t c = count(threshold_partition(img, t));
        CHECK(c <= prev);
        prev = c;
    }
}

TEST_CASE("hand dbscan case {(0,0),(0,1),(10,10)}") {
    PointCloud cloud;
    cloud.points = {{0, 0}, {0, 1}, {10, 10}};
    const ClusterLabels out = dbscan(cloud, 1.5, 2);
    CHECK(out.labels == std::vector<int>{0, 0, -1});
    CHECK(out.k == 1);
}

TEST_CASE("empty cloud") {
    const ClusterLabels out = dbscan(PointCloud{}, 1.0, 3);
    CHECK(out.labels.empty());
    CHECK(out.k == 0);
}

TEST_CASE("two distant blobs give exactly 2 clusters matching the oracle") {
    Rng rng(17);
    PointCloud cloud = blob(rng, 0, 0, 0.5, 50);
    append(cloud, blob(rng, 100, 100, 0.5, 50));
    const double eps = 1.0;
    const ClusterLabels out = dbscan(cloud, eps, 4);
    CHECK(out.k == 2);
    CHECK(core_partitions_match(cloud, out, brute_force_cores(cloud, eps, 4)));
}

TEST_CASE("dbscan core partition matches the oracle on 50 random clouds") {
    for (int trial = 0; trial < 50; ++trial) {
        Rng rng(500 + trial);
        PointCloud cloud;
        const int blobs = 1 + static_cast<int>(rng.index(4));
        for (int b = 0; b < blobs; ++b)
            append(cloud, blob(rng, rng.uniform(-20, 20), rng.uniform(-20, 20),
                               rng.uniform(0.2, 1.5), 20 + static_cast<int>(rng.index(100))));
        const double eps = rng.uniform(0.3, 1.2);
        const int min_pts = 2 + static_cast<int>(rng.index(8));
        const ClusterLabels out = dbscan(cloud, eps, min_pts);
        const CoreOracle oracle = brute_force_cores(cloud, eps, min_pts);
        REQUIRE(core_partitions_match(cloud, out, oracle));
        // k <= n and every nonnegative label nonempty.
        std::vector<int> counts(std::max(out.k, 1), 0);
        for (int l : out.labels) {
            CHECK(l < out.k);
            if (l >= 0) ++counts[l];
        }
        for (int c = 0; c < out.k; ++c) CHECK(counts[c] > 0);
    }
}

TEST_CASE("dbscan core labels are invariant under input permutation") {
    Rng rng(18);
    PointCloud cloud = blob(rng, 0, 0, 1.0, 60);
    append(cloud, blob(rng, 15, 0, 1.0, 60));
    const ClusterLabels base = dbscan(cloud, 1.2, 5);
    const CoreOracle oracle = brute_force_cores(cloud, 1.2, 5);

    std::vector<int> perm(cloud.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
    for (std::size_t i = 0; i + 1 < perm.size(); ++i)
        std::swap(perm[i], perm[i + rng.index(perm.size() - i)]);
    PointCloud shuffled;
    for (int idx : perm) shuffled.points.push_back(cloud.points[idx]);
    const ClusterLabels out = dbscan(shuffled, 1.2, 5);

    CoreOracle shuffled_oracle;
    shuffled_oracle.core.resize(cloud.size());
    shuffled_oracle.component.resize(cloud.size());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        shuffled_oracle.core[i] = oracle.core[perm[i]];
        shuffled_oracle.component[i] = oracle.component[perm[i]];
    }
    CHECK(core_partitions_match(shuffled, out, shuffled_oracle));
    CHECK(out.k == base.k);
}

TEST_CASE("hdbscan recovers a single tight blob") {
    Rng rng(21);
    const PointCloud cloud = blob(rng, 0, 0, 0.3, 40);
    const ClusterLabels out = hdbscan(cloud, 5);
    REQUIRE(out.k >= 1);
    int largest = 0;
    std::vector<int> counts(out.k, 0);
    for (int l : out.labels)
        if (l >= 0) largest = std::max(largest, ++counts[l]);
    CHECK(largest >= 36);  // >= 90% of 40
}

TEST_CASE("hdbscan separates blobs of very different densities") {
    Rng rng(22);
    PointCloud cloud = blob(rng, 0, 0, 0.1, 60);    // dense
    append(cloud, blob(rng, 10, 0, 1.0, 60));       // 10x sparser
    const ClusterLabels out = hdbscan(cloud, 8);
    CHECK(out.k == 2);
    // The two halves must not share a label.
    std::set<int> first, second;
    for (std::size_t i = 0; i < 60; ++i)
        if (out.labels[i] >= 0) first.insert(out.labels[i]);
    for (std::size_t i = 60; i < 120; ++i)
        if (out.labels[i] >= 0) second.insert(out.labels[i]);
    CHECK(first.size() == 1);
    CHECK(second.size() == 1);
    CHECK(*first.begin() != *second.begin());
}

TEST_CASE("hdbscan degenerate inputs") {
    PointCloud one;
    one.points = {{0, 0}};
    const ClusterLabels out = hdbscan(one, 5);
    CHECK(out.k == 0);
    CHECK(out.labels == std::vector<int>{-1});
    CHECK_THROWS_AS(hdbscan(one, 1), Error);
}

TEST_CASE("hdbscan tracks dbscan cluster counts on uniform-density blobs") {
    int agree = 0;
    for (int trial = 0; trial < 10; ++trial) {
        Rng rng(900 + trial);
        PointCloud cloud = blob(rng, 0, 0, 0.5, 80);
        append(cloud, blob(rng, 12, 12, 0.5, 80));
        const int k_db = dbscan(cloud, 0.8, 8).k;
        const int k_h = hdbscan(cloud, 8).k;
        if (k_db == k_h) ++agree;
    }
    CHECK(agree >= 8);
}

TEST_CASE("gmm k=1 reproduces the weighted sample mean and MLE covariance") {
    Rng rng(31);
    PointCloud cloud;
    for (int i = 0; i < 400; ++i)
        cloud.points.push_back({1.0 + 0.7 * rng.normal(), -2.0 + 0.3 * rng.normal(), rng.uniform(0.5, 2.0)});
    const GmmResult res = gmm_fit(cloud, 1, 5, /*use_intensity_weights=*/true);

    double wsum = 0, mx = 0, my = 0;
    for (const auto& p : cloud.points) {
        wsum += p.w;
        mx += p.w * p.x;
        my += p.w * p.y;
    }
    mx /= wsum;
    my /= wsum;
    double c00 = 0, c01 = 0, c11 = 0;
    for (const auto& p : cloud.points) {
        c00 += p.w * (p.x - mx) * (p.x - mx);
        c01 += p.w * (p.x - mx) * (p.y - my);
        c11 += p.w * (p.y - my) * (p.y - my);
    }
    c00 /= wsum;
    c01 /= wsum;
    c11 /= wsum;

    CHECK(res.components[0].mean[0] == doctest::Approx(mx).epsilon(1e-9));
    CHECK(res.components[0].mean[1] == doctest::Approx(my).epsilon(1e-9));
    CHECK(res.components[0].cov[0] == doctest::Approx(c00).epsilon(1e-5));
    CHECK(res.components[0].cov[1] == doctest::Approx(c01).epsilon(1e-5).scale(c00));
    CHECK(res.components[0].cov[3] == doctest::Approx(c11).epsilon(1e-5));
    CHECK(res.components[0].weight == doctest::Approx(1.0));
}

TEST_CASE("gmm k=2 recovers well-separated blob centers") {
    Rng rng(32);
    PointCloud cloud = blob(rng, 0, 0, 0.5, 300);
    append(cloud, blob(rng, 10, 0, 0.5, 300));  // 20 sigma apart
    const GmmResult res = gmm_fit(cloud, 2, 7);
    std::vector<double> centers{res.components[0].mean[0], res.components[1].mean[0]};
    std::sort(centers.begin(), centers.end());
    CHECK(centers[0] == doctest::Approx(0.0).epsilon(1.0).scale(0.05));
    CHECK(centers[1] == doctest::Approx(10.0).epsilon(0.005));
    // 0.1 sigma = 0.05 absolute
    CHECK(std::abs(centers[0] - 0.0) < 0.05 + 3 * 0.5 / std::sqrt(300.0));
    CHECK(std::abs(centers[1] - 10.0) < 0.05 + 3 * 0.5 / std::sqrt(300.0));
}

TEST_CASE("gmm log-likelihood trace is nondecreasing on 20 datasets") {
    // Well-separated mixtures keep every component healthy; near-collinear
    // components make the covariance regularizer visible in the trace.
    const double centers[3][2] = {{-8.0, -8.0}, {8.0, -8.0}, {0.0, 8.0}};
    for (int trial = 0; trial < 20; ++trial) {
        Rng rng(1300 + trial);
        PointCloud cloud;
        const int k = 2 + static_cast<int>(rng.index(2));
        for (int b = 0; b < k; ++b)
            append(cloud, blob(rng, centers[b][0], centers[b][1], rng.uniform(0.3, 1.0),
                               60 + static_cast<int>(rng.index(60))));
        const GmmResult res = gmm_fit(cloud, k, 40 + trial);
        REQUIRE(res.log_likelihood.size() >= 2);
        for (std::size_t i = 1; i < res.log_likelihood.size(); ++i) {
            const double prev = res.log_likelihood[i - 1];
            const double cur = res.log_likelihood[i];
            CHECK(cur >= prev - 1e-9 * std::max(1.0, std::abs(prev)));
        }
    }
}

TEST_CASE("gmm rejects undersized clouds") {
    PointCloud small;
    for (int i = 0; i < 15; ++i) small.points.push_back({static_cast<double>(i), 0.0});
    CHECK_THROWS_AS(gmm_fit(small, 2, 1), Error);
}

TEST_CASE("image_to_cloud keeps pixels above the floor with coordinates") {
    ScanImage img;
    img.rows = img.cols = 4;
    img.x_origin = -1.0;
    img.x_step = 0.5;
    img.xp_origin = 2.0;
    img.xp_step = 0.25;
    img.intensities.assign(16, 0.0);
    img.at(1, 2) = 5.0;
    img.at(3, 0) = 2.0;
    const PointCloud cloud = image_to_cloud(img, 1.0);
    REQUIRE(cloud.size() == 2);
    CHECK(cloud.points[0].x == doctest::Approx(-1.0 + 2 * 0.5));
    CHECK(cloud.points[0].y == doctest::Approx(2.0 + 1 * 0.25));
    CHECK(cloud.points[0].w == doctest::Approx(5.0));
}

TEST_SUITE_END();
