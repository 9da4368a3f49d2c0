#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "hudd/network.hpp"
#include "hudd/unsafe_selector.hpp"

namespace hudd::retrain {

/// Per cluster: image IDs after bootstrap resampling (duplicates allowed).
struct BalancedUnsafeSet {
    std::vector<std::vector<std::string>> clusters;
    std::vector<std::size_t> skipped;  // clusters that were empty before balancing

    std::size_t total() const {
        std::size_t n = 0;
        for (const auto& c : clusters) n += c.size();
        return n;
    }
};

/// Bootstrap-balances per-cluster ID lists: every nonempty cluster keeps all
/// of its members once and is topped up with uniform draws (with
/// replacement) from itself until it reaches the largest cluster's size.
/// Empty clusters are skipped.
inline BalancedUnsafeSet balance(const std::vector<std::vector<std::string>>& clusters, std::uint64_t seed) {
    std::size_t target = 0;
    for (const auto& c : clusters) target = std::max(target, c.size());
    if (target == 0) throw InvalidArgument("balance: every cluster is empty");
    Rng rng(mix_seed(seed, 0x62616c));
    BalancedUnsafeSet out;
    for (std::size_t ci = 0; ci < clusters.size(); ++ci) {
        const auto& c = clusters[ci];
        if (c.empty()) {
            out.skipped.push_back(ci);
            continue;
        }
        auto members = c;
        while (members.size() < target) members.push_back(c[static_cast<std::size_t>(rng.below(c.size()))]);
        out.clusters.push_back(std::move(members));
    }
    return out;
}

inline BalancedUnsafeSet balance(const select::UnsafeSet& unsafe, std::uint64_t seed) {
    std::vector<std::vector<std::string>> ids(unsafe.clusters.size());
    for (std::size_t c = 0; c < unsafe.clusters.size(); ++c)
        for (const auto& s : unsafe.clusters[c]) ids[c].push_back(s.id);
    return balance(ids, seed);
}

/// Original training set (each image exactly once) followed by every
/// balanced entry, resolved against `labeled` by ID.
inline net::LabeledDataset union_dataset(const net::LabeledDataset& original, const BalancedUnsafeSet& balanced,
                                         const net::LabeledDataset& labeled) {
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < labeled.size(); ++i) index.emplace(labeled.ids[i], i);
    net::LabeledDataset out = original;
    const bool regression = !labeled.targets.empty();
    for (const auto& cluster : balanced.clusters) {
        for (const auto& id : cluster) {
            auto it = index.find(id);
            if (it == index.end()) throw NotFoundError("no label for unsafe image '" + id + "'");
            if (regression) out.add(id, labeled.images[it->second], labeled.targets[it->second]);
            else out.add(id, labeled.images[it->second], labeled.labels[it->second]);
        }
    }
    return out;
}

/// Retrains on original ∪ balanced unsafe set, starting from the current
/// weights unless config.warm_start is false.
inline net::Network retrain(const net::Network& network, const net::LabeledDataset& original,
                            const BalancedUnsafeSet& balanced, const net::LabeledDataset& labeled_unsafe,
                            const net::TrainConfig& config) {
    const auto data = union_dataset(original, balanced, labeled_unsafe);
    return net::train(network, data, config);
}

}  // namespace hudd::retrain
