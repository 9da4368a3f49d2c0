#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "hudd/heatmap_space.hpp"

namespace hudd::select {

using space::RectDistanceMatrix;

struct SelectionConfig {
    double sf = 0.3;                 // selection factor in [0, 1]
    std::size_t test_size = 0;       // |TestSet|
    double test_accuracy = 0.0;      // in [0, 1]

    void validate() const {
        if (!(sf >= 0.0 && sf <= 1.0)) throw InvalidArgument("sf must lie in [0, 1]");
        if (test_size == 0) throw InvalidArgument("test set size must be positive");
        if (!(test_accuracy >= 0.0 && test_accuracy <= 1.0)) throw InvalidArgument("test accuracy must lie in [0, 1]");
    }
};

struct Quotas {
    std::vector<double> raw;          // unrounded per-cluster budget
    std::vector<std::size_t> counts;  // integer quotas
    bool no_errors = false;           // accuracy == 1: nothing to select

    std::size_t total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }
};

/// U_i = (|TS| * sf) * (1 - acc) * |C_i| / |C|, floored, with the remainder
/// up to round(sum U_i) handed out one unit at a time by descending
/// fractional part (lower cluster ID on ties).
inline Quotas cluster_quotas(const SelectionConfig& config, const std::vector<std::size_t>& cluster_sizes) {
    config.validate();
    const double total_members =
        static_cast<double>(std::accumulate(cluster_sizes.begin(), cluster_sizes.end(), std::size_t{0}));
    if (cluster_sizes.empty() || total_members == 0.0) throw InvalidArgument("cluster_quotas needs nonempty clusters");
    Quotas q;
    q.raw.resize(cluster_sizes.size());
    q.counts.assign(cluster_sizes.size(), 0);
    if (config.test_accuracy >= 1.0) {
        q.no_errors = true;
        return q;
    }
    const double budget = (static_cast<double>(config.test_size) * config.sf) * (1.0 - config.test_accuracy);
    double sum = 0.0;
    for (std::size_t c = 0; c < cluster_sizes.size(); ++c) {
        q.raw[c] = budget * (static_cast<double>(cluster_sizes[c]) / total_members);
        q.counts[c] = static_cast<std::size_t>(std::floor(q.raw[c]));
        sum += q.raw[c];
    }
    const auto target = static_cast<std::size_t>(std::llround(sum));
    std::vector<std::size_t> order(cluster_sizes.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return q.raw[a] - std::floor(q.raw[a]) > q.raw[b] - std::floor(q.raw[b]);
    });
    for (std::size_t i = 0; q.total() < target && i < order.size(); ++i) ++q.counts[order[i]];
    return q;
}

struct RankEntry {
    std::size_t cluster = 0;
    double distance = 0.0;
};

/// Per improvement image, every cluster ordered by single-linkage distance
/// (rank 1 first; lower cluster ID on ties).
struct RankTable {
    std::vector<std::string> ids;
    std::vector<std::vector<RankEntry>> ranks;

    std::size_t cluster_count() const { return ranks.empty() ? 0 : ranks.front().size(); }
};

/// `column_cluster[c]` is the root-cause cluster of error-inducing image c
/// (the columns of `dm`).
inline RankTable rank_clusters(const RectDistanceMatrix& dm, const std::vector<std::size_t>& column_cluster,
                               std::size_t cluster_count) {
    if (column_cluster.size() != dm.cols()) throw ShapeError("cluster labels do not cover the matrix columns");
    std::vector<std::size_t> sizes(cluster_count, 0);
    for (auto c : column_cluster) {
        if (c >= cluster_count) throw InvalidArgument("cluster label out of range");
        ++sizes[c];
    }
    for (std::size_t c = 0; c < cluster_count; ++c)
        if (sizes[c] == 0) throw InvalidArgument("cluster " + std::to_string(c) + " is empty");

    RankTable t;
    t.ids = dm.row_ids();
    t.ranks.resize(dm.rows());
    for (std::size_t r = 0; r < dm.rows(); ++r) {
        std::vector<double> closest(cluster_count, std::numeric_limits<double>::infinity());
        const auto row = dm.row(r);
        for (std::size_t c = 0; c < dm.cols(); ++c) closest[column_cluster[c]] = std::min(closest[column_cluster[c]], row[c]);
        auto& entries = t.ranks[r];
        for (std::size_t c = 0; c < cluster_count; ++c) entries.push_back({c, closest[c]});
        std::stable_sort(entries.begin(), entries.end(),
                         [](const RankEntry& a, const RankEntry& b) { return a.distance < b.distance; });
    }
    return t;
}

struct Selection {
    std::size_t image = 0;  // row in the rank table
    std::string id;
    std::size_t rank = 0;   // 1-based rank at which the image was placed
    double distance = 0.0;
};

struct UnsafeSet {
    std::vector<std::size_t> quotas;
    std::vector<std::vector<Selection>> clusters;

    std::size_t total() const {
        std::size_t n = 0;
        for (const auto& c : clusters) n += c.size();
        return n;
    }

    /// Quota units left unfilled per cluster.
    std::vector<std::size_t> shortfall() const {
        std::vector<std::size_t> s(quotas.size());
        for (std::size_t c = 0; c < quotas.size(); ++c) s[c] = quotas[c] - clusters[c].size();
        return s;
    }
};

/// Rank sweep: for r = 1..k, visit the remaining images in ascending order
/// of their rank-r distance (lower image index on ties) and place each one in
/// its rank-r cluster if that cluster is still below quota. Placed images
/// leave every later rank.
inline UnsafeSet assign_unsafe(const RankTable& table, const std::vector<std::size_t>& quotas) {
    const std::size_t k = quotas.size();
    for (const auto& entries : table.ranks)
        if (entries.size() != k) throw ShapeError("rank table does not match the number of quotas");
    UnsafeSet out;
    out.quotas = quotas;
    out.clusters.resize(k);
    std::vector<bool> placed(table.ranks.size(), false);
    std::vector<std::size_t> order(table.ranks.size());
    for (std::size_t r = 0; r < k; ++r) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return table.ranks[a][r].distance < table.ranks[b][r].distance;
        });
        for (auto img : order) {
            if (placed[img]) continue;
            const auto& e = table.ranks[img][r];
            if (out.clusters[e.cluster].size() < quotas[e.cluster]) {
                out.clusters[e.cluster].push_back({img, table.ids[img], r + 1, e.distance});
                placed[img] = true;
            }
        }
    }
    return out;
}

}  // namespace hudd::select
