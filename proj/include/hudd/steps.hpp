#pragma once

#include <string>
#include <vector>

#include "hudd/cluster.hpp"
#include "hudd/lrp.hpp"
#include "hudd/unsafe_selector.hpp"

namespace hudd::steps {

using net::LabeledDataset;
using net::Network;

/// Parameterized layers except the output layer.
inline std::vector<int> default_candidate_layers(const Network& network) {
    std::vector<int> out;
    for (std::size_t i = 0; i + 1 < network.layers.size(); ++i)
        if (net::is_parameterized(network.layers[i])) out.push_back(static_cast<int>(i));
    if (out.empty()) throw InvalidArgument("network has no hidden parameterized layer to analyse");
    return out;
}

inline lrp::SeedMode seed_mode(const Network& network) {
    return network.task == net::Task::classification ? lrp::SeedMode::predicted_class : lrp::SeedMode::worst_output;
}

inline std::vector<lrp::ImageRef> image_refs(const LabeledDataset& data, const std::vector<std::size_t>& indices) {
    std::vector<lrp::ImageRef> refs;
    for (auto i : indices) {
        lrp::ImageRef r{data.ids.at(i), &data.images.at(i), std::nullopt};
        if (!data.targets.empty()) r.truth = data.targets[i];
        refs.push_back(std::move(r));
    }
    return refs;
}

inline std::vector<std::size_t> all_indices(const LabeledDataset& data) {
    std::vector<std::size_t> v(data.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = i;
    return v;
}

inline std::vector<std::size_t> error_indices(const net::AccuracyReport& report) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < report.correct.size(); ++i)
        if (!report.correct[i]) out.push_back(i);
    return out;
}

struct ClusterStage {
    lrp::HeatmapStore raw;                   // error-inducing heatmaps per candidate layer
    std::vector<space::NormalizationStats> stats;
    cluster::RootCauseClusters clusters;
};

/// Heatmaps of the error-inducing images at every candidate layer,
/// normalized per layer, then clustered; the layer with minimal WICD wins.
inline ClusterStage cluster_errors(const Network& network, const LabeledDataset& test,
                                   const std::vector<std::size_t>& errors, std::vector<int> layers,
                                   const cluster::SelectionOptions& options) {
    if (errors.size() < 2) throw InvalidArgument("need at least 2 error-inducing images to cluster");
    if (layers.empty()) layers = default_candidate_layers(network);
    ClusterStage out;
    out.raw = lrp::heatmaps_for_set(network, image_refs(test, errors), seed_mode(network), layers, options.jobs);
    std::vector<lrp::HeatmapSet> normalized;
    for (int l : layers) {
        auto [set, stats] = space::normalize_layer(out.raw.layer(l));
        normalized.push_back(std::move(set));
        out.stats.push_back(stats);
    }
    out.clusters = cluster::select_root_cause_clusters(normalized, options);
    return out;
}

struct SelectStage {
    select::Quotas quotas;
    select::RankTable ranks;
    select::UnsafeSet unsafe;
};

/// Quotas from test accuracy, single-linkage ranks of every improvement
/// image against the clusters (raw heatmaps of the selected layer), then the
/// rank sweep.
inline SelectStage select_unsafe(const Network& network, const lrp::HeatmapSet& error_raw,
                                 const std::vector<std::size_t>& column_cluster, std::size_t cluster_count,
                                 const LabeledDataset& improvement, const select::SelectionConfig& config,
                                 std::size_t jobs = 1) {
    SelectStage out;
    std::vector<std::size_t> sizes(cluster_count, 0);
    for (auto c : column_cluster) ++sizes.at(c);
    out.quotas = select::cluster_quotas(config, sizes);
    const auto store = lrp::heatmaps_for_set(network, image_refs(improvement, all_indices(improvement)),
                                             seed_mode(network), {error_raw.layer}, jobs);
    const auto dm = space::improvement_distance_matrix(store.layer(error_raw.layer), error_raw, jobs);
    out.ranks = select::rank_clusters(dm, column_cluster, cluster_count);
    out.unsafe = select::assign_unsafe(out.ranks, out.quotas.counts);
    return out;
}

}  // namespace hudd::steps
