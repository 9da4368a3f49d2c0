#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "hudd/heatmap_space.hpp"

namespace hudd::cluster {

using space::DistanceMatrix;

// ---------------------------------------------------------------------------
// Dendrogram

/// Node IDs follow the usual linkage convention: leaves are 0..n-1, the
/// cluster created by merge s gets ID n + s.
struct Merge {
    std::size_t left = 0;   // smaller node ID
    std::size_t right = 0;  // larger node ID
    double height = 0.0;
    std::size_t size = 0;

    friend bool operator==(const Merge&, const Merge&) = default;
};

struct Dendrogram {
    std::size_t leaves = 0;
    std::vector<Merge> merges;  // leaves - 1 records
};

/// Ward-linkage agglomeration with Lance-Williams updates on Euclidean
/// distances (merge height = sqrt(2 * increase in within-cluster SSE)).
/// Ties on height go to the pair with the lowest (smaller ID, larger ID).
inline Dendrogram hac_ward(const DistanceMatrix& dm) {
    const std::size_t n = dm.size();
    if (n < 2) throw InvalidArgument("hac_ward needs at least 2 observations");
    for (double v : dm.packed())
        if (!std::isfinite(v)) throw InvalidArgument("distance matrix contains NaN/Inf");

    std::vector<double> d = dm.to_square();
    std::vector<std::size_t> node(n), size(n, 1);
    std::iota(node.begin(), node.end(), std::size_t{0});
    std::vector<std::size_t> active(n);
    std::iota(active.begin(), active.end(), std::size_t{0});

    Dendrogram dg;
    dg.leaves = n;
    dg.merges.reserve(n - 1);
    for (std::size_t step = 0; step + 1 < n; ++step) {
        std::size_t best_a = 0, best_b = 0;
        double best = std::numeric_limits<double>::infinity();
        std::size_t best_lo = SIZE_MAX, best_hi = SIZE_MAX;
        for (std::size_t x = 0; x < active.size(); ++x) {
            const std::size_t a = active[x];
            const double* row = d.data() + a * n;
            for (std::size_t y = x + 1; y < active.size(); ++y) {
                const std::size_t b = active[y];
                const double v = row[b];
                if (v > best) continue;
                const std::size_t lo = std::min(node[a], node[b]), hi = std::max(node[a], node[b]);
                if (v < best || std::tie(lo, hi) < std::tie(best_lo, best_hi)) {
                    best = v;
                    best_a = a;
                    best_b = b;
                    best_lo = lo;
                    best_hi = hi;
                }
            }
        }
        const double na = static_cast<double>(size[best_a]), nb = static_cast<double>(size[best_b]);
        const double dab2 = best * best;
        for (std::size_t k : active) {
            if (k == best_a || k == best_b) continue;
            const double nk = static_cast<double>(size[k]);
            const double dak = d[best_a * n + k], dbk = d[best_b * n + k];
            const double v = ((na + nk) * dak * dak + (nb + nk) * dbk * dbk - nk * dab2) / (na + nb + nk);
            const double nd = std::sqrt(std::max(v, 0.0));
            d[best_a * n + k] = d[k * n + best_a] = nd;
        }
        dg.merges.push_back({best_lo, best_hi, best, size[best_a] + size[best_b]});
        size[best_a] += size[best_b];
        node[best_a] = n + step;
        active.erase(std::find(active.begin(), active.end(), best_b));
    }
    return dg;
}

// ---------------------------------------------------------------------------
// Assignments

struct ClusterAssignment {
    std::size_t k = 0;
    std::vector<std::size_t> labels;  // per observation, in [0, k)

    std::vector<std::size_t> members(std::size_t cluster) const {
        std::vector<std::size_t> m;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == cluster) m.push_back(i);
        return m;
    }

    std::vector<std::size_t> sizes() const {
        std::vector<std::size_t> s(k, 0);
        for (auto l : labels) ++s[l];
        return s;
    }

    friend bool operator==(const ClusterAssignment&, const ClusterAssignment&) = default;
};

/// Undo the last k - 1 merges. Cluster IDs are numbered by the smallest
/// member index.
inline ClusterAssignment cut(const Dendrogram& dg, std::size_t k) {
    const std::size_t n = dg.leaves;
    if (k < 1 || k > n) throw InvalidArgument("cut: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
    std::vector<std::size_t> parent(2 * n - 1);
    std::iota(parent.begin(), parent.end(), std::size_t{0});
    auto find = [&](std::size_t x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    };
    for (std::size_t s = 0; s < n - k; ++s) {
        const auto& m = dg.merges[s];
        parent[find(m.left)] = n + s;
        parent[find(m.right)] = n + s;
    }
    ClusterAssignment a;
    a.k = k;
    a.labels.assign(n, 0);
    std::vector<std::size_t> id_of(2 * n - 1, SIZE_MAX);
    std::size_t next = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto root = find(i);
        if (id_of[root] == SIZE_MAX) id_of[root] = next++;
        a.labels[i] = id_of[root];
    }
    return a;
}

/// Mean distance over the unordered member pairs of one cluster; a
/// singleton has no pairs and scores 0.
inline double icd(const ClusterAssignment& a, const DistanceMatrix& dm, std::size_t cluster) {
    if (cluster >= a.k) throw InvalidArgument("unknown cluster " + std::to_string(cluster));
    const auto m = a.members(cluster);
    if (m.size() < 2) return 0.0;
    double total = 0.0;
    for (std::size_t x = 0; x < m.size(); ++x)
        for (std::size_t y = x + 1; y < m.size(); ++y) total += dm(m[x], m[y]);
    return total / static_cast<double>(m.size() * (m.size() - 1) / 2);
}

/// Weighted average intra-cluster distance:
///   (sum_j ICD(C_j) * |C_j| / |C|) / k
inline double wicd(const ClusterAssignment& a, const DistanceMatrix& dm) {
    if (a.labels.size() != dm.size()) throw ShapeError("assignment does not match distance matrix");
    if (a.k == 0) return 0.0;
    // One pass over all pairs accumulates every cluster's pair sum.
    std::vector<double> pair_sum(a.k, 0.0);
    for (std::size_t i = 0; i < dm.size(); ++i)
        for (std::size_t j = 0; j < i; ++j)
            if (a.labels[i] == a.labels[j]) pair_sum[a.labels[i]] += dm(i, j);
    const auto sizes = a.sizes();
    const double total = static_cast<double>(a.labels.size());
    double acc = 0.0;
    for (std::size_t c = 0; c < a.k; ++c) {
        const double s = static_cast<double>(sizes[c]);
        const double icd_c = sizes[c] < 2 ? 0.0 : pair_sum[c] / (s * (s - 1.0) / 2.0);
        acc += icd_c * (s / total);
    }
    return acc / static_cast<double>(a.k);
}

struct CurvePoint {
    std::size_t k = 0;
    double value = 0.0;
};

inline std::vector<CurvePoint> wicd_curve(const Dendrogram& dg, const DistanceMatrix& dm, std::size_t k_lo,
                                          std::size_t k_hi) {
    if (k_lo < 1 || k_hi > dg.leaves || k_lo > k_hi) throw InvalidArgument("wicd_curve: invalid k range");
    std::vector<CurvePoint> curve;
    for (std::size_t k = k_lo; k <= k_hi; ++k) curve.push_back({k, wicd(cut(dg, k), dm)});
    return curve;
}

// ---------------------------------------------------------------------------
// Knee point

/// Natural cubic interpolating spline through strictly increasing knots.
class CubicSpline {
public:
    CubicSpline(std::vector<double> x, std::vector<double> y) : x_(std::move(x)), y_(std::move(y)) {
        const std::size_t n = x_.size();
        if (n != y_.size() || n < 2) throw InvalidArgument("spline needs >= 2 matching knots");
        for (std::size_t i = 1; i < n; ++i)
            if (!(x_[i] > x_[i - 1])) throw InvalidArgument("spline knots must be strictly increasing");
        m_.assign(n, 0.0);  // second derivatives; natural ends stay 0
        if (n < 3) return;
        // Tridiagonal solve (Thomas algorithm) for interior second derivatives.
        std::vector<double> c(n, 0.0), r(n, 0.0);
        for (std::size_t i = 1; i + 1 < n; ++i) {
            const double h0 = x_[i] - x_[i - 1], h1 = x_[i + 1] - x_[i];
            const double diag = 2.0 * (h0 + h1);
            const double rhs = 6.0 * ((y_[i + 1] - y_[i]) / h1 - (y_[i] - y_[i - 1]) / h0);
            const double denom = diag - h0 * c[i - 1];
            c[i] = h1 / denom;
            r[i] = (rhs - h0 * r[i - 1]) / denom;
        }
        for (std::size_t i = n - 2; i >= 1; --i) {
            m_[i] = r[i] - c[i] * m_[i + 1];
            if (i == 1) break;
        }
    }

    double operator()(double t) const {
        const std::size_t n = x_.size();
        auto it = std::upper_bound(x_.begin(), x_.end(), t);
        std::size_t i = it == x_.begin() ? 0 : static_cast<std::size_t>(it - x_.begin()) - 1;
        if (i >= n - 1) i = n - 2;
        if (t == x_[i]) return y_[i];
        if (t == x_[i + 1]) return y_[i + 1];
        const double h = x_[i + 1] - x_[i];
        const double a = (x_[i + 1] - t) / h, b = (t - x_[i]) / h;
        return a * y_[i] + b * y_[i + 1] + ((a * a * a - a) * m_[i] + (b * b * b - b) * m_[i + 1]) * h * h / 6.0;
    }

private:
    std::vector<double> x_, y_, m_;
};

/// First derivative on a unit grid: 4th-order central differences in the
/// interior, 2nd-order central next to the ends, 2nd-order one-sided at the
/// ends.
inline std::vector<double> derivative(std::span<const double> f) {
    const std::size_t m = f.size();
    std::vector<double> d(m, 0.0);
    if (m < 3) {
        if (m == 2) d[0] = d[1] = f[1] - f[0];
        return d;
    }
    for (std::size_t i = 0; i < m; ++i) {
        if (i >= 2 && i + 2 < m) {
            d[i] = (-f[i + 2] + 8.0 * f[i + 1] - 8.0 * f[i - 1] + f[i - 2]) / 12.0;
        } else if (i == 0) {
            d[i] = (-3.0 * f[0] + 4.0 * f[1] - f[2]) / 2.0;
        } else if (i == m - 1) {
            d[i] = (3.0 * f[m - 1] - 4.0 * f[m - 2] + f[m - 3]) / 2.0;
        } else {
            d[i] = (f[i + 1] - f[i - 1]) / 2.0;
        }
    }
    return d;
}

struct KneeResult {
    std::size_t k = 0;
    bool weak = false;          // no curvature: chord difference vanishes
    bool fallback = false;      // curve too short; largest single-step drop used
    double strength = 0.0;      // max |normalized curve - chord|
    std::vector<std::size_t> grid;
    std::vector<double> slope;  // derivative on the unit grid (empty on fallback)
};

inline constexpr std::size_t kMinKneeCurve = 7;

/// Cluster count at which the curve stops decreasing significantly: the
/// curve is resampled on a unit grid through a cubic spline, differentiated,
/// min-max normalized, and the point farthest from the chord joining its
/// first and last points is returned.
inline KneeResult knee_point(std::span<const CurvePoint> curve) {
    if (curve.empty()) throw InvalidArgument("knee_point: empty curve");
    for (std::size_t i = 1; i < curve.size(); ++i)
        if (curve[i].k <= curve[i - 1].k) throw InvalidArgument("knee_point: k values must increase");

    KneeResult r;
    if (curve.size() < kMinKneeCurve) {
        r.fallback = true;
        r.k = curve.front().k;
        double best_drop = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 1; i < curve.size(); ++i) {
            const double drop = curve[i - 1].value - curve[i].value;
            if (drop > best_drop) {
                best_drop = drop;
                r.k = curve[i].k;
            }
        }
        return r;
    }

    std::vector<double> xs, ys;
    for (const auto& p : curve) {
        xs.push_back(static_cast<double>(p.k));
        ys.push_back(p.value);
    }
    const CubicSpline spline(xs, ys);
    std::vector<double> f;
    for (std::size_t k = curve.front().k; k <= curve.back().k; ++k) {
        r.grid.push_back(k);
        f.push_back(spline(static_cast<double>(k)));
    }
    r.slope = derivative(f);

    const auto [lo, hi] = std::minmax_element(r.slope.begin(), r.slope.end());
    const double range = *hi - *lo;
    const double scale = std::max(std::abs(*hi), std::abs(*lo));
    const std::size_t m = r.grid.size();
    if (!(range > 1e-9 * scale)) {
        r.weak = true;
        r.k = r.grid[(m - 1) / 2];
        return r;
    }
    std::vector<double> y(m);
    for (std::size_t i = 0; i < m; ++i) y[i] = (r.slope[i] - *lo) / range;
    double best = -1.0;
    std::size_t best_i = 0;
    for (std::size_t i = 0; i < m; ++i) {
        const double x = static_cast<double>(i) / static_cast<double>(m - 1);
        const double chord = y.front() + (y.back() - y.front()) * x;
        const double diff = std::abs(y[i] - chord);
        if (diff > best) {
            best = diff;
            best_i = i;
        }
    }
    r.strength = best;
    if (best < 1e-9) {
        r.weak = true;
        r.k = r.grid[(m - 1) / 2];
    } else {
        r.k = r.grid[best_i];
    }
    return r;
}

inline KneeResult knee_point(const std::vector<CurvePoint>& curve) {
    return knee_point(std::span<const CurvePoint>(curve));
}

// ---------------------------------------------------------------------------
// Cross-layer selection

struct LayerClusteringResult {
    int layer = 0;
    std::size_t k = 0;
    ClusterAssignment assignment;
    std::vector<double> icd;  // per cluster
    double wicd = 0.0;
    std::vector<CurvePoint> curve;
    KneeResult knee;
    Dendrogram dendrogram;
};

struct RootCauseClusters {
    int layer = 0;
    LayerClusteringResult result;
    std::vector<std::string> ids;                       // error-inducing images, assignment order
    std::vector<std::vector<std::string>> members;      // per cluster
    std::vector<LayerClusteringResult> candidates;      // every evaluated layer

    std::size_t cluster_count() const { return members.size(); }
};

struct SelectionOptions {
    std::size_t k_cap = 50;
    std::size_t jobs = 1;
};

/// Distance matrix, dendrogram, WICD curve and knee for one layer.
inline LayerClusteringResult cluster_layer(const DistanceMatrix& dm, const SelectionOptions& options = {}) {
    LayerClusteringResult r;
    r.layer = dm.layer();
    r.dendrogram = hac_ward(dm);
    const std::size_t n = dm.size();
    const std::size_t k_hi = std::min(n - 1, options.k_cap);
    if (k_hi >= 2) {
        r.curve = wicd_curve(r.dendrogram, dm, 2, k_hi);
        r.knee = knee_point(r.curve);
        r.k = r.knee.k;
    } else {
        r.k = 1;  // two observations: nothing to choose between
    }
    r.assignment = cut(r.dendrogram, r.k);
    for (std::size_t c = 0; c < r.k; ++c) r.icd.push_back(icd(r.assignment, dm, c));
    r.wicd = wicd(r.assignment, dm);
    return r;
}

/// Clusters every candidate layer and keeps the one with minimal WICD at its
/// knee; ties go to the deeper layer. `normalized` holds min-max normalized
/// heatmaps of the error-inducing images, one set per candidate layer.
inline RootCauseClusters select_root_cause_clusters(const std::vector<lrp::HeatmapSet>& normalized,
                                                    const SelectionOptions& options = {}) {
    if (normalized.empty()) throw InvalidArgument("no candidate layers");
    RootCauseClusters out;
    std::optional<std::size_t> best;
    for (const auto& set : normalized) {
        if (set.count() < 2) throw InvalidArgument("layer " + std::to_string(set.layer) + " has fewer than 2 images");
        if (set.ids != normalized.front().ids) throw InvalidArgument("candidate layers cover different image sets");
        const auto dm = space::distance_matrix(set, true, options.jobs);
        out.candidates.push_back(cluster_layer(dm, options));
        const auto& cur = out.candidates.back();
        if (!best) {
            best = out.candidates.size() - 1;
        } else {
            const auto& b = out.candidates[*best];
            if (cur.wicd < b.wicd || (cur.wicd == b.wicd && cur.layer > b.layer)) best = out.candidates.size() - 1;
        }
    }
    out.result = out.candidates[*best];
    out.layer = out.result.layer;
    out.ids = normalized.front().ids;
    out.members.resize(out.result.k);
    for (std::size_t i = 0; i < out.ids.size(); ++i) out.members[out.result.assignment.labels[i]].push_back(out.ids[i]);
    return out;
}

}  // namespace hudd::cluster
