#include <gtest/gtest.h>

#include <set>

#include "hudd/cluster.hpp"
#include "oracles.hpp"

using namespace hudd;
using namespace hudd::cluster;

namespace {

std::vector<std::vector<double>> square(const DistanceMatrix& dm) {
    std::vector<std::vector<double>> d(dm.size(), std::vector<double>(dm.size()));
    for (std::size_t i = 0; i < dm.size(); ++i)
        for (std::size_t j = 0; j < dm.size(); ++j) d[i][j] = dm(i, j);
    return d;
}

/// Points around `centers` with spread `sigma`.
oracle::Points blobs(const oracle::Points& centers, std::size_t per, double sigma, Rng& rng) {
    oracle::Points p;
    for (std::size_t i = 0; i < per; ++i)
        for (const auto& c : centers) {
            auto x = c;
            for (auto& v : x) v += sigma * rng.normal();
            p.push_back(x);
        }
    return p;
}

lrp::HeatmapSet as_heatmaps(const oracle::Points& p, int layer) {
    lrp::HeatmapSet s;
    s.layer = layer;
    s.rows = p.front().size();
    s.cols = 1;
    for (std::size_t i = 0; i < p.size(); ++i) {
        s.ids.push_back("img" + std::to_string(i));
        s.values.insert(s.values.end(), p[i].begin(), p[i].end());
    }
    return space::normalize_layer(s).first;
}

/// Two clusterings are equal up to relabeling.
bool same_partition(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a.size(); ++j)
            if ((a[i] == a[j]) != (b[i] == b[j])) return false;
    return true;
}

}  // namespace

TEST(Ward, TwoPointsMergeAtTheirDistance) {
    auto dm = DistanceMatrix::from_square(std::vector<double>{0, 2.5, 2.5, 0}, 2);
    auto dg = hac_ward(dm);
    ASSERT_EQ(dg.merges.size(), 1u);
    EXPECT_EQ(dg.merges[0], (Merge{0, 1, 2.5, 2}));
}

TEST(Ward, TightPairsMergeFirst) {
    const oracle::Points p{{0, 0}, {10, 0}, {0.1, 0}, {10, 0.2}};
    auto dg = hac_ward(oracle::points_matrix(p));
    ASSERT_EQ(dg.merges.size(), 3u);
    EXPECT_EQ(dg.merges[0].left, 0u);
    EXPECT_EQ(dg.merges[0].right, 2u);
    EXPECT_EQ(dg.merges[1].left, 1u);
    EXPECT_EQ(dg.merges[1].right, 3u);
    EXPECT_EQ(dg.merges[2].left, 4u);
    EXPECT_EQ(dg.merges[2].right, 5u);
    EXPECT_EQ(dg.merges[2].size, 4u);
    auto two = cut(dg, 2);
    EXPECT_EQ(two.labels, (std::vector<std::size_t>{0, 1, 0, 1}));
}

TEST(Ward, MatchesRecomputeFromScratchOracle) {
    Rng rng(31);
    for (int trial = 0; trial < 60; ++trial) {
        const auto n = 2 + static_cast<std::size_t>(rng.below(7));
        const auto p = oracle::random_points(n, 1 + static_cast<std::size_t>(rng.below(4)), rng);
        const auto dg = hac_ward(oracle::points_matrix(p));
        EXPECT_TRUE(oracle::same_merges(dg.merges, oracle::ward_merges(p))) << "trial " << trial;
    }
}

TEST(Ward, HeightsAreNonDecreasingAndLeavesAppearOnce) {
    Rng rng(32);
    const auto p = oracle::random_points(30, 3, rng);
    const auto dg = hac_ward(oracle::points_matrix(p));
    std::multiset<std::size_t> used;
    for (std::size_t s = 0; s < dg.merges.size(); ++s) {
        if (s > 0) {
            EXPECT_GE(dg.merges[s].height, dg.merges[s - 1].height - 1e-12);
        }
        used.insert(dg.merges[s].left);
        used.insert(dg.merges[s].right);
    }
    for (std::size_t node = 0; node + 1 < 2 * p.size() - 1; ++node) EXPECT_EQ(used.count(node), 1u) << node;
    EXPECT_EQ(dg.merges.back().size, 30u);
}

TEST(Ward, TiesGoToLowestNodePair) {
    // Equilateral triangle: every pair ties.
    auto dm = DistanceMatrix::from_square(std::vector<double>{0, 1, 1, 1, 0, 1, 1, 1, 0}, 3);
    auto dg = hac_ward(dm);
    EXPECT_EQ(dg.merges[0].left, 0u);
    EXPECT_EQ(dg.merges[0].right, 1u);
    EXPECT_EQ(dg.merges[1].left, 2u);
    EXPECT_EQ(dg.merges[1].right, 3u);
}

TEST(Ward, RejectsTooFewPoints) {
    EXPECT_THROW(hac_ward(DistanceMatrix::from_square(std::vector<double>{0}, 1)), InvalidArgument);
    auto dm = DistanceMatrix::from_square(std::vector<double>{0, 1, 1, 0}, 2);
    dm.packed()[0] = std::nan("");
    EXPECT_THROW(hac_ward(dm), InvalidArgument);
}

TEST(Cut, ExtremesAndRefinement) {
    Rng rng(33);
    const auto p = oracle::random_points(12, 2, rng);
    const auto dg = hac_ward(oracle::points_matrix(p));
    EXPECT_EQ(cut(dg, 1).labels, std::vector<std::size_t>(12, 0));
    auto all = cut(dg, 12);
    std::vector<std::size_t> ids(12);
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    EXPECT_EQ(all.labels, ids);
    for (std::size_t k = 1; k < 12; ++k) {
        const auto a = cut(dg, k), b = cut(dg, k + 1);
        EXPECT_EQ(a.sizes().size(), k);
        for (auto s : b.sizes()) EXPECT_GT(s, 0u);
        // Every finer cluster sits inside one coarser cluster.
        for (std::size_t i = 0; i < 12; ++i)
            for (std::size_t j = 0; j < 12; ++j)
                if (b.labels[i] == b.labels[j]) {
                    EXPECT_EQ(a.labels[i], a.labels[j]);
                }
        // Exactly one coarse cluster splits.
        std::size_t splits = 0;
        for (std::size_t c = 0; c < k; ++c) {
            std::set<std::size_t> parts;
            for (auto m : a.members(c)) parts.insert(b.labels[m]);
            splits += parts.size() - 1;
        }
        EXPECT_EQ(splits, 1u);
    }
    EXPECT_THROW(cut(dg, 0), InvalidArgument);
    EXPECT_THROW(cut(dg, 13), InvalidArgument);
}

TEST(Icd, HandExamplesAndOracle) {
    auto dm = DistanceMatrix::from_square(std::vector<double>{0, 4, 4, 0}, 2);
    EXPECT_EQ(icd(ClusterAssignment{1, {0, 0}}, dm, 0), 4.0);
    EXPECT_EQ(icd(ClusterAssignment{2, {0, 1}}, dm, 1), 0.0);
    EXPECT_THROW(icd(ClusterAssignment{2, {0, 1}}, dm, 2), InvalidArgument);

    Rng rng(34);
    const auto p = oracle::random_points(9, 3, rng);
    const auto m = oracle::points_matrix(p);
    const ClusterAssignment a{3, {0, 1, 2, 0, 1, 2, 0, 1, 0}};
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(icd(a, m, c), oracle::icd(square(m), a.members(c)), 1e-12);
}

TEST(Wicd, HandExamples) {
    // Sizes (2, 2) with ICDs (4, 0): (4 * 0.5 + 0 * 0.5) / 2 = 1.
    std::vector<double> sq{0, 4, 9, 9, 4, 0, 9, 9, 9, 9, 0, 0, 9, 9, 0, 0};
    auto dm = DistanceMatrix::from_square(sq, 4);
    EXPECT_DOUBLE_EQ(wicd(ClusterAssignment{2, {0, 0, 1, 1}}, dm), 1.0);
    EXPECT_DOUBLE_EQ(wicd(ClusterAssignment{4, {0, 1, 2, 3}}, dm), 0.0);
    const ClusterAssignment one{1, {0, 0, 0, 0}};
    EXPECT_DOUBLE_EQ(wicd(one, dm), icd(one, dm, 0));
    EXPECT_THROW(wicd(ClusterAssignment{1, {0, 0}}, dm), ShapeError);
}

TEST(Wicd, MatchesLiteralOracleOnRandomCuts) {
    Rng rng(35);
    for (int trial = 0; trial < 20; ++trial) {
        const auto p = oracle::random_points(15, 4, rng);
        const auto dm = oracle::points_matrix(p);
        const auto dg = hac_ward(dm);
        for (std::size_t k = 1; k <= 15; ++k) {
            const auto a = cut(dg, k);
            EXPECT_NEAR(wicd(a, dm), oracle::wicd(square(dm), a.labels, k), 1e-9);
        }
    }
}

TEST(WicdCurve, LengthEndpointAndOverallDecrease) {
    Rng rng(36);
    const auto p = blobs({{0, 0}, {5, 5}, {10, 0}}, 8, 0.5, rng);
    const auto dm = oracle::points_matrix(p);
    const auto dg = hac_ward(dm);
    const auto curve = wicd_curve(dg, dm, 2, p.size());
    ASSERT_EQ(curve.size(), p.size() - 1);
    EXPECT_EQ(curve.back().value, 0.0);
    EXPECT_GT(curve.front().value, curve[5].value);
    EXPECT_GT(curve[5].value, curve[15].value);
    EXPECT_THROW(wicd_curve(dg, dm, 0, 3), InvalidArgument);
    EXPECT_THROW(wicd_curve(dg, dm, 2, p.size() + 1), InvalidArgument);
}

TEST(Spline, InterpolatesKnotsAndReproducesLines) {
    CubicSpline s({1, 2, 4, 7, 8}, {3, -1, 2, 2, 5});
    EXPECT_EQ(s(1), 3.0);
    EXPECT_EQ(s(4), 2.0);
    EXPECT_EQ(s(8), 5.0);
    CubicSpline line({0, 1, 3, 6}, {1, 3, 7, 13});
    for (double t = 0; t <= 6; t += 0.25) EXPECT_NEAR(line(t), 1 + 2 * t, 1e-12);
    EXPECT_THROW(CubicSpline({0, 0}, {1, 2}), InvalidArgument);
    EXPECT_THROW(CubicSpline({0}, {1}), InvalidArgument);
}

TEST(Derivative, ExactOnCubicsInTheInteriorAndQuadraticsEverywhere) {
    std::vector<double> cubic, quad;
    for (int i = 0; i < 10; ++i) {
        const double x = i;
        cubic.push_back(x * x * x - 2 * x);
        quad.push_back(3 * x * x - x + 1);
    }
    const auto dc = derivative(cubic), dq = derivative(quad);
    for (int i = 2; i < 8; ++i) EXPECT_NEAR(dc[i], 3.0 * i * i - 2, 1e-9);
    for (int i = 0; i < 10; ++i) EXPECT_NEAR(dq[i], 6.0 * i - 1, 1e-9);
}

TEST(Knee, HockeyStickAtFour) {
    std::vector<CurvePoint> c;
    for (std::size_t k = 2; k <= 15; ++k) c.push_back({k, k <= 4 ? 10.0 - 3.0 * (k - 2.0) : 4.0});
    const auto r = knee_point(c);
    EXPECT_FALSE(r.weak);
    EXPECT_NEAR(static_cast<double>(r.k), 4.0, 1.0);
}

TEST(Knee, RandomHockeySticksLandWithinOne) {
    Rng rng(37);
    int hits = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const auto hi = 15 + static_cast<std::size_t>(rng.below(36));
        const auto elbow = 4 + static_cast<std::size_t>(rng.below(hi - 8));
        const auto r = knee_point(oracle::hockey_stick(2, hi, elbow, rng));
        if (r.k + 1 >= elbow && r.k <= elbow + 1) ++hits;
    }
    EXPECT_GE(hits, 95);
}

TEST(Knee, LinearCurveIsWeakAndMidRange) {
    std::vector<CurvePoint> c;
    for (std::size_t k = 2; k <= 12; ++k) c.push_back({k, 20.0 - 1.5 * k});
    const auto r = knee_point(c);
    EXPECT_TRUE(r.weak);
    EXPECT_EQ(r.k, 7u);
}

TEST(Knee, SharpEarlyDropLandsEarly) {
    std::vector<CurvePoint> c;
    for (std::size_t k = 2; k <= 40; ++k) c.push_back({k, 1.0 / static_cast<double>(k * k)});
    EXPECT_LE(knee_point(c).k, 8u);
}

TEST(Knee, InvariantUnderAffineRescaling) {
    Rng rng(38);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<CurvePoint> c;
        double v = 5.0;
        for (std::size_t k = 2; k <= 30; ++k) {
            v -= rng.uniform(0.0, 1.0) / static_cast<double>(k);
            c.push_back({k, v});
        }
        auto scaled = c;
        const double a = rng.uniform(0.1, 50.0), b = rng.uniform(-10.0, 10.0);
        for (auto& p : scaled) p.value = a * p.value + b;
        EXPECT_EQ(knee_point(c).k, knee_point(scaled).k);
    }
}

TEST(Knee, ShortCurveFallsBackToLargestDrop) {
    const std::vector<CurvePoint> c{{2, 10}, {3, 9}, {4, 4}, {5, 3.5}};
    const auto r = knee_point(c);
    EXPECT_TRUE(r.fallback);
    EXPECT_EQ(r.k, 4u);
    EXPECT_THROW(knee_point(std::vector<CurvePoint>{}), InvalidArgument);
    EXPECT_THROW(knee_point(std::vector<CurvePoint>{{3, 1}, {2, 0}}), InvalidArgument);
}

TEST(ClusterLayer, StoredWicdMatchesRecomputation) {
    Rng rng(39);
    const auto p = blobs({{0, 0, 0}, {6, 0, 0}, {0, 6, 0}, {0, 0, 6}}, 6, 0.4, rng);
    const auto dm = oracle::points_matrix(p);
    const auto r = cluster_layer(dm);
    EXPECT_EQ(r.assignment.k, r.k);
    EXPECT_EQ(r.icd.size(), r.k);
    EXPECT_NEAR(r.wicd, oracle::wicd(square(dm), r.assignment.labels, r.k), 1e-9);
    EXPECT_EQ(r.curve.size(), p.size() - 2);
}

TEST(ClusterLayer, TwoImagesFormOneCluster) {
    const auto r = cluster_layer(DistanceMatrix::from_square(std::vector<double>{0, 1, 1, 0}, 2));
    EXPECT_EQ(r.k, 1u);
    EXPECT_EQ(r.wicd, 1.0);
}

TEST(SelectRootCause, BlobLayerBeatsNoiseLayer) {
    Rng rng(40);
    const auto tight = blobs({{0, 0, 0, 0}, {8, 8, 0, 0}, {0, 8, 8, 8}}, 10, 0.3, rng);
    const auto noise = oracle::random_points(tight.size(), 4, rng);
    const auto out = select_root_cause_clusters({as_heatmaps(noise, 1), as_heatmaps(tight, 2)});
    EXPECT_EQ(out.layer, 2);
    EXPECT_EQ(out.candidates.size(), 2u);
    std::vector<std::size_t> truth(tight.size());
    for (std::size_t i = 0; i < truth.size(); ++i) truth[i] = i % 3;
    // The stencil sees the last steep step one k late, so the knee is 3 or 4.
    EXPECT_GE(out.cluster_count(), 3u);
    EXPECT_LE(out.cluster_count(), 4u);
    EXPECT_TRUE(same_partition(cut(out.result.dendrogram, 3).labels, truth));
    // Whatever k was chosen, no cluster straddles two blobs.
    const auto& labels = out.result.assignment.labels;
    for (std::size_t i = 0; i < labels.size(); ++i)
        for (std::size_t j = 0; j < labels.size(); ++j)
            if (labels[i] == labels[j]) {
                EXPECT_EQ(truth[i], truth[j]);
            }
    std::size_t total = 0;
    for (const auto& m : out.members) total += m.size();
    EXPECT_EQ(total, tight.size());
    EXPECT_LE(out.result.wicd, out.candidates[0].wicd);
}

TEST(SelectRootCause, SingleLayerWinsAndResultsAreDeterministic) {
    Rng rng(41);
    const auto set = as_heatmaps(oracle::random_points(20, 3, rng), 5);
    const auto a = select_root_cause_clusters({set});
    const auto b = select_root_cause_clusters({set}, SelectionOptions{50, 3});
    EXPECT_EQ(a.layer, 5);
    EXPECT_EQ(a.members, b.members);
    EXPECT_EQ(a.result.assignment, b.result.assignment);
    EXPECT_EQ(a.result.wicd, b.result.wicd);
}

TEST(SelectRootCause, TieGoesToDeeperLayer) {
    Rng rng(42);
    auto shallow = as_heatmaps(oracle::random_points(12, 3, rng), 1);
    auto deep = shallow;
    deep.layer = 4;
    EXPECT_EQ(select_root_cause_clusters({deep, shallow}).layer, 4);
    EXPECT_EQ(select_root_cause_clusters({shallow, deep}).layer, 4);
}

TEST(SelectRootCause, RejectsBadInput) {
    EXPECT_THROW(select_root_cause_clusters({}), InvalidArgument);
    Rng rng(43);
    auto a = as_heatmaps(oracle::random_points(6, 2, rng), 1);
    auto b = as_heatmaps(oracle::random_points(6, 2, rng), 2);
    b.ids[0] = "other";
    EXPECT_THROW(select_root_cause_clusters({a, b}), InvalidArgument);
    auto one = as_heatmaps(oracle::random_points(1, 2, rng), 3);
    EXPECT_THROW(select_root_cause_clusters({one}), InvalidArgument);
}
