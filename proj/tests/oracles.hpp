#pragma once

// Independent reference implementations used by the unit tests and the
// acceptance binary. They favour the most literal formulation over speed and
// share no code with the library beyond plain data types.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "hudd/cluster.hpp"
#include "hudd/random.hpp"

namespace hudd::oracle {

using Points = std::vector<std::vector<double>>;

inline Points random_points(std::size_t n, std::size_t dims, Rng& rng) {
    Points p(n, std::vector<double>(dims));
    for (auto& x : p)
        for (auto& v : x) v = rng.uniform(-1.0, 1.0);
    return p;
}

inline double euclid(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

inline space::DistanceMatrix points_matrix(const Points& p) {
    const auto n = p.size();
    std::vector<double> sq(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) sq[i * n + j] = i == j ? 0.0 : euclid(p[i], p[j]);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < i; ++j) sq[j * n + i] = sq[i * n + j];
    return space::DistanceMatrix::from_square(sq, n);
}

/// Within-cluster sum of squared deviations from the centroid.
inline double sse(const Points& p, const std::vector<std::size_t>& members) {
    const auto dims = p.front().size();
    std::vector<double> c(dims, 0.0);
    for (auto m : members)
        for (std::size_t d = 0; d < dims; ++d) c[d] += p[m][d];
    for (auto& v : c) v /= static_cast<double>(members.size());
    double s = 0.0;
    for (auto m : members)
        for (std::size_t d = 0; d < dims; ++d) s += (p[m][d] - c[d]) * (p[m][d] - c[d]);
    return s;
}

/// Ward agglomeration recomputed from scratch at every step: merge the pair
/// whose union raises the total SSE least. Height = sqrt(2 * increase); ties
/// go to the lowest (smaller node, larger node).
inline std::vector<cluster::Merge> ward_merges(const Points& p) {
    const auto n = p.size();
    struct Node {
        std::size_t id;
        std::vector<std::size_t> members;
    };
    std::vector<Node> live;
    for (std::size_t i = 0; i < n; ++i) live.push_back({i, {i}});
    std::vector<cluster::Merge> out;
    for (std::size_t step = 0; step + 1 < n; ++step) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t bx = 0, by = 0;
        for (std::size_t x = 0; x < live.size(); ++x)
            for (std::size_t y = 0; y < live.size(); ++y) {
                if (x == y) continue;
                auto u = live[x].members;
                u.insert(u.end(), live[y].members.begin(), live[y].members.end());
                const double inc = sse(p, u) - sse(p, live[x].members) - sse(p, live[y].members);
                const double h = std::sqrt(2.0 * std::max(inc, 0.0));
                const auto lo = std::min(live[x].id, live[y].id), hi = std::max(live[x].id, live[y].id);
                const auto blo = std::min(live[bx].id, live[by].id), bhi = std::max(live[bx].id, live[by].id);
                if (h < best || (h == best && (lo < blo || (lo == blo && hi < bhi)))) {
                    best = h;
                    bx = x;
                    by = y;
                }
            }
        const auto lo = std::min(live[bx].id, live[by].id), hi = std::max(live[bx].id, live[by].id);
        Node merged{n + step, live[bx].members};
        merged.members.insert(merged.members.end(), live[by].members.begin(), live[by].members.end());
        out.push_back({lo, hi, best, merged.members.size()});
        live.erase(live.begin() + static_cast<std::ptrdiff_t>(std::max(bx, by)));
        live.erase(live.begin() + static_cast<std::ptrdiff_t>(std::min(bx, by)));
        live.push_back(std::move(merged));
    }
    return out;
}

/// Same node pairs and sizes in the same order; heights within `tol`
/// relative (they come from different arithmetic).
inline bool same_merges(const std::vector<cluster::Merge>& a, const std::vector<cluster::Merge>& b, double tol = 1e-9) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].left != b[i].left || a[i].right != b[i].right || a[i].size != b[i].size) return false;
        const double scale = std::max({1.0, std::abs(a[i].height), std::abs(b[i].height)});
        if (std::abs(a[i].height - b[i].height) > tol * scale) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Scalar-loop forms of the per-layer formulas.

inline std::pair<double, double> layer_extrema(const std::vector<std::vector<double>>& maps) {
    double lo = maps[0][0], hi = maps[0][0];
    for (const auto& m : maps)
        for (double v : m) {
            if (v < lo) lo = v;
            if (v > hi) hi = v;
        }
    return {lo, hi};
}

inline double normalized_entry(double v, double lo, double hi) { return hi == lo ? 0.0 : (v - lo) / (hi - lo); }

/// Mean pairwise distance over a member list given as explicit indices.
inline double icd(const std::vector<std::vector<double>>& d, const std::vector<std::size_t>& members) {
    double sum = 0.0;
    std::size_t pairs = 0;
    for (std::size_t x = 0; x < members.size(); ++x)
        for (std::size_t y = x + 1; y < members.size(); ++y) {
            sum += d[members[x]][members[y]];
            ++pairs;
        }
    return pairs == 0 ? 0.0 : sum / static_cast<double>(pairs);
}

/// Size-weighted ICD, divided once more by the cluster count.
inline double wicd(const std::vector<std::vector<double>>& d, const std::vector<std::size_t>& labels, std::size_t k) {
    std::vector<std::vector<std::size_t>> members(k);
    for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(i);
    double sum = 0.0;
    for (std::size_t c = 0; c < k; ++c)
        sum += icd(d, members[c]) * static_cast<double>(members[c].size()) / static_cast<double>(labels.size());
    return sum / static_cast<double>(k);
}

/// Unrounded per-cluster budget.
inline double quota(double test_size, double sf, double acc, double cluster_size, double members) {
    return test_size * sf * (1.0 - acc) * cluster_size / members;
}

// ---------------------------------------------------------------------------
// Hockey-stick curves: a steep descent down to `elbow`, then a shallow tail.

inline std::vector<cluster::CurvePoint> hockey_stick(std::size_t k_lo, std::size_t k_hi, std::size_t elbow, Rng& rng) {
    const double top = rng.uniform(1.0, 10.0);
    const double steep = rng.uniform(0.5, 2.0) * top / static_cast<double>(elbow - k_lo + 1);
    const double shallow = steep * rng.uniform(0.0, 0.05);
    std::vector<cluster::CurvePoint> c;
    for (std::size_t k = k_lo; k <= k_hi; ++k) {
        const double x = static_cast<double>(k);
        const double e = static_cast<double>(elbow);
        const double v = k <= elbow ? top - steep * (x - static_cast<double>(k_lo))
                                    : top - steep * (e - static_cast<double>(k_lo)) - shallow * (x - e);
        c.push_back({k, v});
    }
    return c;
}

}  // namespace hudd::oracle
