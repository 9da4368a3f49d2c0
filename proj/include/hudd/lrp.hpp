#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hudd/network.hpp"
#include "hudd/parallel.hpp"

namespace hudd::lrp {

using net::ActivationTrace;
using net::Network;

/// Denominator stabilizer of the z+ rule.
inline constexpr double kStabilizer = 1e-9;

/// Layer index of the input-image heatmap.
inline constexpr int kInputLayer = -1;

/// Relevance scores of one layer for one image, laid out as an N x M
/// row-major matrix: N neurons per feature map, M feature maps (M = 1 for
/// vector-shaped layers).
struct Heatmap {
    int layer = kInputLayer;
    std::size_t rows = 0;  // N
    std::size_t cols = 0;  // M
    std::vector<double> values;

    double sum() const { return std::accumulate(values.begin(), values.end(), 0.0); }
};

/// (N, M) for a boundary shape: CHW -> (H*W, C), vector -> (n, 1).
inline std::pair<std::size_t, std::size_t> heatmap_dims(const Shape& shape) {
    if (shape.size() == 3) return {shape[1] * shape[2], shape[0]};
    return {shape_size(shape), 1};
}

inline Heatmap to_heatmap(int layer, const Tensor& relevance) {
    const auto [n, m] = heatmap_dims(relevance.shape());
    Heatmap h{layer, n, m, std::vector<double>(n * m)};
    if (m == 1) {
        h.values = relevance.data();
    } else {
        // CHW tensor -> entry (neuron i, map j) at i*M + j
        for (std::size_t j = 0; j < m; ++j)
            for (std::size_t i = 0; i < n; ++i) h.values[i * m + j] = relevance[j * n + i];
    }
    return h;
}

/// Output-layer relevance: one nonnegative entry at the selected neuron.
struct RelevanceSeed {
    std::size_t neuron = 0;
    double value = 0.0;
    std::size_t width = 0;

    Tensor tensor() const {
        Tensor t({width});
        t[neuron] = value;
        return t;
    }
};

enum class SeedMode { predicted_class, worst_output };

/// predicted_class: seed at the argmax neuron (lowest index on ties) with
/// that neuron's score. worst_output: seed at the output with the largest
/// absolute deviation from `truth`, valued at that deviation.
inline RelevanceSeed make_seed(const Network& network, const Tensor& output, SeedMode mode,
                               std::optional<std::span<const double>> truth = std::nullopt) {
    if (output.size() != network.outputs.size()) throw ShapeError("output width does not match network");
    RelevanceSeed s;
    s.width = output.size();
    if (mode == SeedMode::predicted_class) {
        s.neuron = net::argmax(output.values());
        s.value = std::max(0.0, output[s.neuron]);
        return s;
    }
    if (!truth) throw InvalidArgument("worst_output seed requires ground truth");
    if (truth->size() != output.size()) throw ShapeError("ground truth width does not match output");
    double worst = -1.0;
    for (std::size_t i = 0; i < output.size(); ++i) {
        const double dev = std::abs(output[i] - (*truth)[i]);
        if (dev > worst) {
            worst = dev;
            s.neuron = i;
        }
    }
    s.value = worst;
    return s;
}

namespace detail {

inline double stabilized(double s) { return s + (s >= 0.0 ? kStabilizer : -kStabilizer); }

// z+ rule: R_in[i] = sum_o a[i] w+[o,i] / sum_i' a[i'] w+[o,i'] * R_out[o].
inline void relevance(const net::Dense& l, const Tensor& in, const Tensor&, const Tensor& r_out, Tensor& r_in) {
    r_in = Tensor({l.in});
    for (std::size_t o = 0; o < l.out; ++o) {
        const double r = r_out[o];
        if (r == 0.0) continue;
        const double* row = l.weights.data() + o * l.in;
        double s = 0.0;
        for (std::size_t i = 0; i < l.in; ++i) s += in[i] * std::max(row[i], 0.0);
        if (s == 0.0) continue;  // nothing to redistribute onto
        const double f = r / stabilized(s);
        for (std::size_t i = 0; i < l.in; ++i) r_in[i] += in[i] * std::max(row[i], 0.0) * f;
    }
}

// Same rule over the unrolled receptive field of every output neuron.
inline void relevance(const net::Conv2d& l, const Tensor& in, const Tensor& out, const Tensor& r_out, Tensor& r_in) {
    const auto& s = in.shape();
    const std::size_t ih = s[1], iw = s[2];
    const std::size_t oh = out.shape()[1], ow = out.shape()[2];
    const long pad = static_cast<long>(l.padding);
    r_in = Tensor(s);
    std::vector<double> wpos(l.weights.size());
    for (std::size_t k = 0; k < wpos.size(); ++k) wpos[k] = std::max(l.weights[k], 0.0);

    // Pass 1: per-output denominators, computed like a forward pass with w+ and no bias.
    std::vector<double> denom(l.out_channels * oh * ow, 0.0);
    for (std::size_t oc = 0; oc < l.out_channels; ++oc) {
        double* dst = denom.data() + oc * oh * ow;
        for (std::size_t ic = 0; ic < l.in_channels; ++ic) {
            const double* src = in.values().data() + ic * ih * iw;
            for (std::size_t ky = 0; ky < l.kernel; ++ky)
                for (std::size_t kx = 0; kx < l.kernel; ++kx) {
                    const double wv = wpos[l.widx(oc, ic, ky, kx)];
                    if (wv == 0.0) continue;
                    for (std::size_t oy = 0; oy < oh; ++oy) {
                        const long y = static_cast<long>(oy * l.stride + ky) - pad;
                        if (y < 0 || y >= static_cast<long>(ih)) continue;
                        for (std::size_t ox = 0; ox < ow; ++ox) {
                            const long x = static_cast<long>(ox * l.stride + kx) - pad;
                            if (x < 0 || x >= static_cast<long>(iw)) continue;
                            dst[oy * ow + ox] += wv * src[static_cast<std::size_t>(y) * iw + static_cast<std::size_t>(x)];
                        }
                    }
                }
        }
    }
    // Pass 2: scale factors R_out / z, then scatter a * w+ * factor back.
    for (std::size_t k = 0; k < denom.size(); ++k) {
        denom[k] = (denom[k] == 0.0 || r_out[k] == 0.0) ? 0.0 : r_out[k] / stabilized(denom[k]);
    }
    for (std::size_t oc = 0; oc < l.out_channels; ++oc) {
        const double* fac = denom.data() + oc * oh * ow;
        for (std::size_t ic = 0; ic < l.in_channels; ++ic) {
            const double* src = in.values().data() + ic * ih * iw;
            double* dst = r_in.values().data() + ic * ih * iw;
            for (std::size_t ky = 0; ky < l.kernel; ++ky)
                for (std::size_t kx = 0; kx < l.kernel; ++kx) {
                    const double wv = wpos[l.widx(oc, ic, ky, kx)];
                    if (wv == 0.0) continue;
                    for (std::size_t oy = 0; oy < oh; ++oy) {
                        const long y = static_cast<long>(oy * l.stride + ky) - pad;
                        if (y < 0 || y >= static_cast<long>(ih)) continue;
                        for (std::size_t ox = 0; ox < ow; ++ox) {
                            const long x = static_cast<long>(ox * l.stride + kx) - pad;
                            if (x < 0 || x >= static_cast<long>(iw)) continue;
                            const auto p = static_cast<std::size_t>(y) * iw + static_cast<std::size_t>(x);
                            dst[p] += src[p] * wv * fac[oy * ow + ox];
                        }
                    }
                }
        }
    }
}

inline void relevance(const net::Relu&, const Tensor&, const Tensor&, const Tensor& r_out, Tensor& r_in) {
    r_in = r_out;
}

// Winner takes all.
inline void relevance(const net::MaxPool& l, const Tensor& in, const Tensor& out, const Tensor& r_out, Tensor& r_in) {
    r_in = Tensor(in.shape());
    const auto& os = out.shape();
    std::size_t o = 0;
    for (std::size_t c = 0; c < os[0]; ++c)
        for (std::size_t y = 0; y < os[1]; ++y)
            for (std::size_t x = 0; x < os[2]; ++x) r_in[net::maxpool_argmax(l, in, c, y, x)] += r_out[o++];
}

inline void relevance(const net::Flatten&, const Tensor& in, const Tensor&, const Tensor& r_out, Tensor& r_in) {
    r_in = r_out.reshaped(in.shape());
}

}  // namespace detail

/// Backward relevance pass. Returns L + 1 heatmaps: element 0 is the input
/// image (layer kInputLayer), element i + 1 holds the relevance of layer i's
/// output neurons.
inline std::vector<Heatmap> propagate(const Network& network, const ActivationTrace& trace, const RelevanceSeed& seed) {
    const auto shapes = network.boundary_shapes();
    if (trace.values.size() != shapes.size()) throw ShapeError("trace does not match network depth");
    for (std::size_t i = 0; i < shapes.size(); ++i)
        if (trace.values[i].shape() != shapes[i]) throw ShapeError("trace shape mismatch at boundary " + std::to_string(i));
    if (seed.width != shape_size(shapes.back()) || seed.neuron >= seed.width) {
        throw ShapeError("relevance seed does not match output width");
    }

    const std::size_t L = network.layers.size();
    std::vector<Tensor> rel(L + 1);
    rel[L] = seed.tensor().reshaped(shapes.back());
    for (std::size_t i = L; i-- > 0;) {
        std::visit([&](const auto& l) { detail::relevance(l, trace.input(i), trace.output(i), rel[i + 1], rel[i]); },
                   network.layers[i]);
    }
    std::vector<Heatmap> maps;
    maps.reserve(L + 1);
    maps.push_back(to_heatmap(kInputLayer, rel[0]));
    for (std::size_t i = 0; i < L; ++i) maps.push_back(to_heatmap(static_cast<int>(i), rel[i + 1]));
    return maps;
}

/// Heatmaps of one layer over an image set, stored contiguously.
struct HeatmapSet {
    int layer = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::string> ids;
    std::vector<double> values;  // ids.size() * rows * cols

    std::size_t count() const { return ids.size(); }
    std::size_t entries() const { return rows * cols; }
    std::span<const double> map(std::size_t i) const { return {values.data() + i * entries(), entries()}; }
    std::span<double> map(std::size_t i) { return {values.data() + i * entries(), entries()}; }

    std::size_t index_of(const std::string& id) const {
        for (std::size_t i = 0; i < ids.size(); ++i)
            if (ids[i] == id) return i;
        throw NotFoundError("no heatmap for image '" + id + "' at layer " + std::to_string(layer));
    }

    Heatmap heatmap(std::size_t i) const {
        auto m = map(i);
        return {layer, rows, cols, std::vector<double>(m.begin(), m.end())};
    }
};

/// Heatmaps indexed by (image ID, layer).
class HeatmapStore {
public:
    void put(HeatmapSet set) { layers_[set.layer] = std::move(set); }

    bool has_layer(int layer) const { return layers_.contains(layer); }

    const HeatmapSet& layer(int layer) const {
        auto it = layers_.find(layer);
        if (it == layers_.end()) throw NotFoundError("no heatmaps for layer " + std::to_string(layer));
        return it->second;
    }

    Heatmap lookup(const std::string& id, int layer_index) const {
        const auto& set = layer(layer_index);
        return set.heatmap(set.index_of(id));
    }

    std::vector<int> layers() const {
        std::vector<int> out;
        for (const auto& [k, v] : layers_) out.push_back(k);
        return out;
    }

    std::size_t heatmap_count() const {
        std::size_t n = 0;
        for (const auto& [k, v] : layers_) n += v.count();
        return n;
    }

private:
    std::map<int, HeatmapSet> layers_;
};

struct ImageRef {
    std::string id;
    const Tensor* image = nullptr;
    std::optional<std::vector<double>> truth;  // required for worst_output seeds
};

/// Runs forward + propagate for every image and collects the heatmaps of
/// `layers` (default: every layer output). Work fans out over `jobs` threads;
/// results are assembled by position, so the store is independent of jobs.
inline HeatmapStore heatmaps_for_set(const Network& network, const std::vector<ImageRef>& images, SeedMode mode,
                                     std::vector<int> layers = {}, std::size_t jobs = 1) {
    if (images.empty()) throw InvalidArgument("no images");
    for (const auto& im : images)
        if (im.image->shape() != images.front().image->shape()) throw ShapeError("images differ in shape");
    if (layers.empty())
        for (std::size_t i = 0; i < network.layers.size(); ++i) layers.push_back(static_cast<int>(i));
    const auto shapes = network.boundary_shapes();
    std::vector<HeatmapSet> sets;
    for (int l : layers) {
        if (l < kInputLayer || l >= static_cast<int>(network.layers.size())) {
            throw InvalidArgument("layer index " + std::to_string(l) + " out of range");
        }
        const auto [n, m] = heatmap_dims(shapes[static_cast<std::size_t>(l + 1)]);
        HeatmapSet s{l, n, m, {}, std::vector<double>(images.size() * n * m)};
        for (const auto& im : images) s.ids.push_back(im.id);
        sets.push_back(std::move(s));
    }
    parallel_for(images.size(), jobs, [&](std::size_t i) {
        const auto fr = net::forward(network, *images[i].image);
        std::optional<std::span<const double>> truth;
        if (images[i].truth) truth = std::span<const double>(*images[i].truth);
        const auto seed = make_seed(network, fr.output, mode, truth);
        const auto maps = propagate(network, fr.trace, seed);
        for (auto& s : sets) {
            const auto& h = maps[static_cast<std::size_t>(s.layer + 1)];
            std::copy(h.values.begin(), h.values.end(), s.map(i).begin());
        }
    });
    HeatmapStore store;
    for (auto& s : sets) store.put(std::move(s));
    return store;
}

// ---------------------------------------------------------------------------
// Per-layer file: "HUDDHMP1", i32 layer, u64 N, u64 M, u64 image count, then
// per image: length-prefixed ID followed by N*M row-major float64 entries.

inline constexpr std::string_view kHeatmapMagic = "HUDDHMP1";

inline void save_heatmaps(const HeatmapSet& set, const std::string& path) {
    io::ByteWriter w;
    w.raw(kHeatmapMagic);
    w.put<std::int32_t>(set.layer);
    w.u64(set.rows);
    w.u64(set.cols);
    w.u64(set.count());
    for (std::size_t i = 0; i < set.count(); ++i) {
        w.str(set.ids[i]);
        for (double v : set.map(i)) w.f64(v);
    }
    w.save(path);
}

inline HeatmapSet load_heatmaps(const std::string& path) {
    auto r = io::ByteReader::from_file(path);
    if (r.remaining() < kHeatmapMagic.size() || r.raw(kHeatmapMagic.size()) != kHeatmapMagic) {
        throw VersionError("not a heatmap file: " + path, 0);
    }
    HeatmapSet s;
    s.layer = r.get<std::int32_t>("layer");
    s.rows = r.u64("N");
    s.cols = r.u64("M");
    const auto count = r.u64("image count");
    const auto entries = s.rows * s.cols;
    if (entries != 0 && count > r.remaining() / (entries * sizeof(double))) throw FormatError("truncated heatmap payload", r.offset());
    s.values.reserve(count * entries);
    for (std::uint64_t i = 0; i < count; ++i) {
        s.ids.push_back(r.str("image id"));
        for (std::size_t k = 0; k < entries; ++k) s.values.push_back(r.f64("heatmap entry"));
    }
    if (!r.done()) throw FormatError("trailing bytes in heatmap file", r.offset());
    return s;
}

}  // namespace hudd::lrp
