#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hudd/cluster.hpp"
#include "hudd/csv.hpp"
#include "hudd/unsafe_selector.hpp"

namespace hudd::artifacts {

using json = nlohmann::ordered_json;

inline void write_json(const std::string& path, const json& j) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    if (!out) throw Error("cannot write " + path);
    out << j.dump(2) << '\n';
    if (!out) throw Error("write failed: " + path);
}

inline json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw NotFoundError("cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw FormatError(path + ": " + e.what(), e.byte);
    }
}

// ---------------------------------------------------------------------------
// Root-cause clusters

struct ClusterTable {
    std::vector<std::string> ids;       // file order
    std::vector<std::size_t> labels;    // cluster per row
    std::vector<std::vector<std::string>> members;
};

/// image_id,cluster_id in assignment order.
inline void write_clusters_csv(const std::string& path, const cluster::RootCauseClusters& rc) {
    csv::Table t{{"image_id", "cluster_id"}, {}};
    for (std::size_t i = 0; i < rc.ids.size(); ++i)
        t.rows.push_back({rc.ids[i], std::to_string(rc.result.assignment.labels[i])});
    csv::write(path, t);
}

inline ClusterTable read_clusters_csv(const std::string& path) {
    const auto t = csv::read(path);
    const auto id_col = t.column("image_id"), c_col = t.column("cluster_id");
    ClusterTable out;
    std::size_t line = 1;
    for (const auto& row : t.rows) {
        ++line;
        out.ids.push_back(row[id_col]);
        out.labels.push_back(csv::parse_size(row[c_col], line));
        if (out.labels.back() >= out.members.size()) out.members.resize(out.labels.back() + 1);
        out.members[out.labels.back()].push_back(row[id_col]);
    }
    for (std::size_t c = 0; c < out.members.size(); ++c)
        if (out.members[c].empty()) throw FormatError(path + ": cluster " + std::to_string(c) + " has no members", 1);
    return out;
}

inline void write_curve_csv(const std::string& path, const std::vector<cluster::CurvePoint>& curve) {
    csv::Table t{{"k", "wicd"}, {}};
    for (const auto& p : curve) t.rows.push_back({std::to_string(p.k), csv::fmt(p.value)});
    csv::write(path, t);
}

inline json layer_summary(const cluster::LayerClusteringResult& r) {
    return {{"layer", r.layer},
            {"k", r.k},
            {"wicd", r.wicd},
            {"icd", r.icd},
            {"sizes", r.assignment.sizes()},
            {"knee_weak", r.knee.weak},
            {"knee_fallback", r.knee.fallback},
            {"knee_strength", r.knee.strength}};
}

inline json clusters_summary(const cluster::RootCauseClusters& rc) {
    json cands = json::array();
    for (const auto& c : rc.candidates) cands.push_back(layer_summary(c));
    return {{"selected_layer", rc.layer},
            {"cluster_count", rc.cluster_count()},
            {"images", rc.ids.size()},
            {"selected", layer_summary(rc.result)},
            {"candidates", cands}};
}

// ---------------------------------------------------------------------------
// Unsafe set

struct UnsafeRow {
    std::string id;
    std::size_t cluster = 0;
    std::size_t rank = 0;
    double distance = 0.0;
};

/// image_id,cluster_id,rank,distance grouped by cluster, selection order.
inline void write_unsafe_csv(const std::string& path, const select::UnsafeSet& us) {
    csv::Table t{{"image_id", "cluster_id", "rank", "distance"}, {}};
    for (std::size_t c = 0; c < us.clusters.size(); ++c)
        for (const auto& s : us.clusters[c])
            t.rows.push_back({s.id, std::to_string(c), std::to_string(s.rank), csv::fmt(s.distance)});
    csv::write(path, t);
}

inline std::vector<UnsafeRow> read_unsafe_csv(const std::string& path) {
    const auto t = csv::read(path);
    const auto i_id = t.column("image_id"), i_c = t.column("cluster_id"), i_r = t.column("rank"),
               i_d = t.column("distance");
    std::vector<UnsafeRow> rows;
    std::size_t line = 1;
    for (const auto& row : t.rows) {
        ++line;
        rows.push_back({row[i_id], csv::parse_size(row[i_c], line), csv::parse_size(row[i_r], line),
                        csv::parse_double(row[i_d], line)});
    }
    return rows;
}

/// Per-cluster ID lists, `clusters` wide (clusters without rows stay empty).
inline std::vector<std::vector<std::string>> group_unsafe(const std::vector<UnsafeRow>& rows, std::size_t clusters) {
    std::vector<std::vector<std::string>> out(clusters);
    for (const auto& r : rows) {
        if (r.cluster >= clusters) throw FormatError("unsafe row names cluster " + std::to_string(r.cluster), 0);
        out[r.cluster].push_back(r.id);
    }
    return out;
}

inline json quotas_summary(const select::Quotas& q, const select::UnsafeSet& us) {
    return {{"no_errors", q.no_errors},
            {"raw", q.raw},
            {"quotas", q.counts},
            {"total_quota", q.total()},
            {"selected", us.total()},
            {"shortfall", us.shortfall()}};
}

// ---------------------------------------------------------------------------
// Evaluation

inline void write_predictions_csv(const std::string& path, const net::LabeledDataset& data,
                                  const net::AccuracyReport& report) {
    csv::Table t{{"image_id", "label", "predicted", "correct"}, {}};
    for (std::size_t i = 0; i < data.size(); ++i) {
        t.rows.push_back({data.ids[i], data.targets.empty() ? std::to_string(data.labels[i]) : "",
                          std::to_string(report.predicted[i]), report.correct[i] ? "1" : "0"});
    }
    csv::write(path, t);
}

inline json accuracy_summary(const net::AccuracyReport& r) {
    return {{"accuracy", r.accuracy}, {"correct", r.correct_count}, {"total", r.correct.size()}};
}

}  // namespace hudd::artifacts
