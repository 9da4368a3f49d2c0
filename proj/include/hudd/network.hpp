#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hudd/binary_io.hpp"
#include "hudd/layers.hpp"
#include "hudd/random.hpp"
#include "hudd/tensor.hpp"

namespace hudd::net {

enum class Task : std::uint8_t { classification = 0, regression = 1 };

/// Ordered layer stack plus the metadata needed to interpret its output.
struct Network {
    Shape input_shape;
    Task task = Task::classification;
    std::vector<std::string> outputs;  // class labels or regression output names
    std::vector<Layer> layers;

    /// Shapes at every layer boundary: [input, out(layer 0), ..., out(layer L-1)].
    std::vector<Shape> boundary_shapes() const {
        std::vector<Shape> shapes{input_shape};
        for (const auto& l : layers) shapes.push_back(output_shape(l, shapes.back()));
        return shapes;
    }

    std::size_t output_width() const { return shape_size(boundary_shapes().back()); }

    void validate() const {
        if (layers.empty()) throw ShapeError("network has no layers");
        if (std::none_of(layers.begin(), layers.end(), is_parameterized)) {
            throw ShapeError("network needs at least one dense or conv2d layer");
        }
        const auto shapes = boundary_shapes();
        if (shapes.back().size() != 1) throw ShapeError("final layer must produce a vector");
        if (shapes.back()[0] != outputs.size()) {
            throw ShapeError("final width " + std::to_string(shapes.back()[0]) + " != " +
                             std::to_string(outputs.size()) + " declared outputs");
        }
    }

    /// Uniform weights in +-1/sqrt(fan_in), zero biases.
    void initialize(std::uint64_t seed) {
        Rng rng(seed);
        for (auto& layer : layers) {
            if (auto* d = std::get_if<Dense>(&layer)) {
                const double bound = 1.0 / std::sqrt(static_cast<double>(d->in));
                for (auto& w : d->weights) w = rng.uniform(-bound, bound);
                std::fill(d->bias.begin(), d->bias.end(), 0.0);
            } else if (auto* c = std::get_if<Conv2d>(&layer)) {
                const double bound = 1.0 / std::sqrt(static_cast<double>(c->in_channels * c->kernel * c->kernel));
                for (auto& w : c->weights) w = rng.uniform(-bound, bound);
                std::fill(c->bias.begin(), c->bias.end(), 0.0);
            }
        }
    }

    friend bool operator==(const Network&, const Network&) = default;
};

/// conv(8,3x3) relu pool2 conv(16,3x3) relu pool2 flatten dense(64) relu dense(classes)
inline Network make_default_classifier(std::vector<std::string> classes, Shape input = {1, 32, 32},
                                       std::uint64_t seed = 0) {
    Network n;
    n.input_shape = input;
    n.task = Task::classification;
    n.outputs = std::move(classes);
    n.layers.emplace_back(Conv2d(input[0], 8, 3));
    n.layers.emplace_back(Relu{});
    n.layers.emplace_back(MaxPool{2, 2});
    n.layers.emplace_back(Conv2d(8, 16, 3));
    n.layers.emplace_back(Relu{});
    n.layers.emplace_back(MaxPool{2, 2});
    n.layers.emplace_back(Flatten{});
    const auto flat = shape_size(n.boundary_shapes().back());
    n.layers.emplace_back(Dense(flat, 64));
    n.layers.emplace_back(Relu{});
    n.layers.emplace_back(Dense(64, n.outputs.size()));
    n.validate();
    n.initialize(seed);
    return n;
}

/// Values at every layer boundary recorded during one forward pass.
struct ActivationTrace {
    std::vector<Tensor> values;  // size L + 1

    std::size_t layer_count() const { return values.empty() ? 0 : values.size() - 1; }
    const Tensor& input(std::size_t layer) const { return values.at(layer); }
    const Tensor& output(std::size_t layer) const { return values.at(layer + 1); }
};

struct ForwardResult {
    Tensor output;  // softmax probabilities (classification) or raw outputs (regression)
    ActivationTrace trace;
};

inline void softmax_inplace(std::span<double> v) {
    const double m = *std::max_element(v.begin(), v.end());
    double s = 0.0;
    for (auto& x : v) {
        x = std::exp(x - m);
        s += x;
    }
    for (auto& x : v) x /= s;
}

/// Runs layers [first, L) on `input` and returns the raw final-layer values.
inline Tensor run_from(const Network& net, std::size_t first, const Tensor& input) {
    Tensor cur = input, next;
    for (std::size_t i = first; i < net.layers.size(); ++i) {
        forward(net.layers[i], cur, next);
        std::swap(cur, next);
    }
    return cur;
}

inline ForwardResult forward(const Network& net, const Tensor& image) {
    if (image.shape() != net.input_shape) {
        throw ShapeError("input shape " + shape_string(image.shape()) + " does not match network input " +
                         shape_string(net.input_shape));
    }
    ForwardResult r;
    r.trace.values.reserve(net.layers.size() + 1);
    r.trace.values.push_back(image);
    for (const auto& layer : net.layers) {
        Tensor out;
        forward(layer, r.trace.values.back(), out);
        r.trace.values.push_back(std::move(out));
    }
    r.output = r.trace.values.back();
    if (net.task == Task::classification) softmax_inplace(r.output.values());
    return r;
}

/// Lowest index wins ties.
inline std::size_t argmax(std::span<const double> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

struct Prediction {
    std::size_t label = 0;       // classification
    std::vector<double> values;  // network output (probabilities or regression vector)
};

inline Prediction predict(const Network& net, const Tensor& image) {
    auto r = forward(net, image);
    Prediction p;
    p.values = r.output.data();
    if (net.task == Task::classification) p.label = argmax(p.values);
    return p;
}

// ---------------------------------------------------------------------------
// Datasets, training, evaluation

struct LabeledDataset {
    std::vector<std::string> ids;
    std::vector<Tensor> images;
    std::vector<std::size_t> labels;            // classification targets
    std::vector<std::vector<double>> targets;   // regression targets

    std::size_t size() const { return images.size(); }
    bool empty() const { return images.empty(); }

    void add(std::string id, Tensor image, std::size_t label) {
        ids.push_back(std::move(id));
        images.push_back(std::move(image));
        labels.push_back(label);
    }

    void add(std::string id, Tensor image, std::vector<double> target) {
        ids.push_back(std::move(id));
        images.push_back(std::move(image));
        targets.push_back(std::move(target));
    }
};

struct TrainConfig {
    std::size_t epochs = 10;
    double learning_rate = 0.05;
    std::size_t batch_size = 16;
    std::uint64_t seed = 0;
    bool warm_start = true;  // false: re-initialize weights from seed first

    void validate() const {
        if (learning_rate <= 0.0 || !std::isfinite(learning_rate)) throw InvalidArgument("learning rate must be > 0");
        if (batch_size == 0) throw InvalidArgument("batch size must be > 0");
    }
};

namespace detail {

inline void check_dataset(const Network& net, const LabeledDataset& data) {
    if (data.empty()) throw InvalidArgument("empty dataset");
    if (net.task == Task::classification) {
        if (data.labels.size() != data.size()) throw InvalidArgument("dataset is missing class labels");
        for (std::size_t i = 0; i < data.size(); ++i)
            if (data.labels[i] >= net.outputs.size()) {
                throw InvalidArgument("label " + std::to_string(data.labels[i]) + " out of range for image " +
                                      data.ids[i]);
            }
    } else {
        if (data.targets.size() != data.size()) throw InvalidArgument("dataset is missing regression targets");
        for (std::size_t i = 0; i < data.size(); ++i)
            if (data.targets[i].size() != net.outputs.size()) {
                throw InvalidArgument("target width mismatch for image " + data.ids[i]);
            }
    }
}

/// dL/d(raw output) and the loss value for one sample.
inline double loss_gradient(const Network& net, const Tensor& raw, const LabeledDataset& data, std::size_t i,
                            Tensor& grad) {
    grad = Tensor(raw.shape());
    if (net.task == Task::classification) {
        std::vector<double> p = raw.data();
        softmax_inplace(p);
        const auto y = data.labels[i];
        for (std::size_t k = 0; k < p.size(); ++k) grad[k] = p[k] - (k == y ? 1.0 : 0.0);
        return -std::log(std::max(p[y], 1e-300));
    }
    const auto& t = data.targets[i];
    const double n = static_cast<double>(t.size());
    double loss = 0.0;
    for (std::size_t k = 0; k < t.size(); ++k) {
        const double d = raw[k] - t[k];
        loss += d * d / n;
        grad[k] = 2.0 * d / n;
    }
    return loss;
}

}  // namespace detail

/// Gradient of the summed per-sample loss w.r.t. every parameter, plus the
/// gradient w.r.t. the input image. Exposed for gradient checking.
struct Gradients {
    std::vector<ParamGrad> params;
    Tensor input;
    double loss = 0.0;
};

inline Gradients backprop(const Network& net, const ActivationTrace& trace, const Tensor& grad_output) {
    Gradients g;
    g.params.reserve(net.layers.size());
    for (const auto& l : net.layers) g.params.push_back(zero_grad(l));
    Tensor grad = grad_output, grad_in;
    for (std::size_t i = net.layers.size(); i-- > 0;) {
        auto* pg = is_parameterized(net.layers[i]) ? &g.params[i] : nullptr;
        backward(net.layers[i], trace.input(i), trace.output(i), grad, grad_in, pg);
        std::swap(grad, grad_in);
    }
    g.input = std::move(grad);
    return g;
}

/// Mean loss (cross-entropy or MSE) over the dataset.
inline double mean_loss(const Network& net, const LabeledDataset& data) {
    detail::check_dataset(net, data);
    double total = 0.0;
    Tensor grad;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto raw = run_from(net, 0, data.images[i]);
        total += detail::loss_gradient(net, raw, data, i, grad);
    }
    return total / static_cast<double>(data.size());
}

/// Mini-batch SGD with a fixed learning rate; single-threaded and
/// deterministic given the config seed.
inline Network train(Network net, const LabeledDataset& data, const TrainConfig& config) {
    config.validate();
    net.validate();
    detail::check_dataset(net, data);
    if (config.epochs == 0) return net;
    if (!config.warm_start) net.initialize(config.seed);

    Rng rng(mix_seed(config.seed, 0x7261696e));
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    std::vector<ParamGrad> acc;
    for (const auto& l : net.layers) acc.push_back(zero_grad(l));

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            for (auto& a : acc) {
                std::fill(a.weights.begin(), a.weights.end(), 0.0);
                std::fill(a.bias.begin(), a.bias.end(), 0.0);
            }
            for (std::size_t b = start; b < end; ++b) {
                const auto idx = order[b];
                auto fr = forward(net, data.images[idx]);
                Tensor grad;
                detail::loss_gradient(net, fr.trace.values.back(), data, idx, grad);
                // Inline backprop into the shared accumulators.
                Tensor g = std::move(grad), g_in;
                for (std::size_t i = net.layers.size(); i-- > 0;) {
                    if (i == 0 && !is_parameterized(net.layers[0])) break;
                    auto* pg = is_parameterized(net.layers[i]) ? &acc[i] : nullptr;
                    backward(net.layers[i], fr.trace.input(i), fr.trace.output(i), g, g_in, pg);
                    std::swap(g, g_in);
                }
            }
            const double step = config.learning_rate / static_cast<double>(end - start);
            for (std::size_t i = 0; i < net.layers.size(); ++i) {
                auto apply = [&](auto& layer) {
                    for (std::size_t k = 0; k < layer.weights.size(); ++k) layer.weights[k] -= step * acc[i].weights[k];
                    for (std::size_t k = 0; k < layer.bias.size(); ++k) layer.bias[k] -= step * acc[i].bias[k];
                };
                if (auto* d = std::get_if<Dense>(&net.layers[i])) apply(*d);
                else if (auto* c = std::get_if<Conv2d>(&net.layers[i])) apply(*c);
            }
        }
    }
    return net;
}

struct EvalConfig {
    double regression_threshold = 4.0;  // max mean landmark distance still counted correct
    std::size_t point_dim = 2;          // regression outputs grouped into points of this dimension
};

struct AccuracyReport {
    double accuracy = 0.0;
    std::size_t correct_count = 0;
    std::vector<bool> correct;           // per image
    std::vector<std::size_t> predicted;  // classification only
};

/// Mean Euclidean distance between predicted and true points.
inline double mean_point_error(std::span<const double> pred, std::span<const double> truth, std::size_t dim) {
    if (dim == 0 || pred.size() % dim != 0) dim = 1;
    const std::size_t points = pred.size() / dim;
    double total = 0.0;
    for (std::size_t p = 0; p < points; ++p) {
        double s = 0.0;
        for (std::size_t d = 0; d < dim; ++d) {
            const double diff = pred[p * dim + d] - truth[p * dim + d];
            s += diff * diff;
        }
        total += std::sqrt(s);
    }
    return total / static_cast<double>(points);
}

inline AccuracyReport evaluate(const Network& net, const LabeledDataset& data, const EvalConfig& config = {}) {
    detail::check_dataset(net, data);
    AccuracyReport r;
    r.correct.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto p = predict(net, data.images[i]);
        bool ok;
        if (net.task == Task::classification) {
            r.predicted.push_back(p.label);
            ok = p.label == data.labels[i];
        } else {
            ok = mean_point_error(p.values, data.targets[i], config.point_dim) <= config.regression_threshold;
        }
        r.correct[i] = ok;
        r.correct_count += ok ? 1 : 0;
    }
    r.accuracy = static_cast<double>(r.correct_count) / static_cast<double>(data.size());
    return r;
}

// ---------------------------------------------------------------------------
// Model file: "HUDDNET1", u32 layer count, per-layer records
// (u8 kind, u32 n, u64 dims[n], then weights and biases as u64 count + f64
// values for dense/conv2d), followed by the metadata block (u8 task, u32 rank,
// u64 input dims, u32 output count, length-prefixed output names).

inline constexpr std::string_view kModelMagic = "HUDDNET1";

inline std::vector<char> serialize(const Network& net) {
    io::ByteWriter w;
    w.raw(kModelMagic);
    w.u32(static_cast<std::uint32_t>(net.layers.size()));
    for (const auto& layer : net.layers) {
        w.u8(static_cast<std::uint8_t>(kind_of(layer)));
        std::vector<std::uint64_t> dims;
        if (const auto* d = std::get_if<Dense>(&layer)) dims = {d->in, d->out};
        else if (const auto* c = std::get_if<Conv2d>(&layer)) dims = {c->in_channels, c->out_channels, c->kernel, c->stride, c->padding};
        else if (const auto* m = std::get_if<MaxPool>(&layer)) dims = {m->window, m->stride};
        w.u32(static_cast<std::uint32_t>(dims.size()));
        for (auto v : dims) w.u64(v);
        if (const auto* d = std::get_if<Dense>(&layer)) {
            w.f64s(d->weights);
            w.f64s(d->bias);
        } else if (const auto* c = std::get_if<Conv2d>(&layer)) {
            w.f64s(c->weights);
            w.f64s(c->bias);
        }
    }
    w.u8(static_cast<std::uint8_t>(net.task));
    w.u32(static_cast<std::uint32_t>(net.input_shape.size()));
    for (auto v : net.input_shape) w.u64(v);
    w.u32(static_cast<std::uint32_t>(net.outputs.size()));
    for (const auto& s : net.outputs) w.str(s);
    return w.bytes();
}

inline Network deserialize(std::vector<char> bytes) {
    io::ByteReader r(std::move(bytes));
    if (r.remaining() < kModelMagic.size()) throw FormatError("file too short for model header", 0);
    const auto magic = r.raw(kModelMagic.size());
    if (magic != kModelMagic) {
        if (magic.starts_with("HUDDNET")) throw VersionError("unsupported model format version '" + magic + "'", 0);
        throw VersionError("not a model file (bad magic)", 0);
    }
    Network net;
    const auto count = r.u32("layer count");
    for (std::uint32_t li = 0; li < count; ++li) {
        const auto at = r.offset();
        const auto kind = r.u8("layer kind");
        const auto ndims = r.u32("dim count");
        if (ndims > 16) throw FormatError("implausible dim count", at);
        std::vector<std::uint64_t> dims(ndims);
        for (auto& d : dims) d = r.u64("layer dim");
        auto expect_dims = [&](std::size_t n) {
            if (dims.size() != n) throw FormatError("wrong dim count for layer kind", at);
        };
        auto read_params = [&](std::vector<double>& weights, std::vector<double>& bias) {
            const auto wat = r.offset();
            auto wv = r.f64s("weights");
            if (wv.size() != weights.size()) throw FormatError("weight count mismatch", wat);
            const auto bat = r.offset();
            auto bv = r.f64s("bias");
            if (bv.size() != bias.size()) throw FormatError("bias count mismatch", bat);
            weights = std::move(wv);
            bias = std::move(bv);
        };
        switch (static_cast<LayerKind>(kind)) {
            case LayerKind::dense: {
                expect_dims(2);
                if (dims[0] * dims[1] > r.remaining()) throw FormatError("implausible dense size", at);
                Dense d(dims[0], dims[1]);
                read_params(d.weights, d.bias);
                net.layers.emplace_back(std::move(d));
                break;
            }
            case LayerKind::conv2d: {
                expect_dims(5);
                if (dims[0] * dims[1] * dims[2] * dims[2] > r.remaining() || dims[3] == 0) {
                    throw FormatError("implausible conv2d parameters", at);
                }
                Conv2d c(dims[0], dims[1], dims[2], dims[3], dims[4]);
                read_params(c.weights, c.bias);
                net.layers.emplace_back(std::move(c));
                break;
            }
            case LayerKind::relu: expect_dims(0); net.layers.emplace_back(Relu{}); break;
            case LayerKind::maxpool:
                expect_dims(2);
                if (dims[0] == 0 || dims[1] == 0) throw FormatError("maxpool window and stride must be > 0", at);
                net.layers.emplace_back(MaxPool{dims[0], dims[1]});
                break;
            case LayerKind::flatten: expect_dims(0); net.layers.emplace_back(Flatten{}); break;
            default: throw FormatError("unknown layer kind " + std::to_string(kind), at);
        }
    }
    const auto task_at = r.offset();
    const auto task = r.u8("task");
    if (task > 1) throw FormatError("unknown task tag", task_at);
    net.task = static_cast<Task>(task);
    const auto rank = r.u32("input rank");
    if (rank > 8) throw FormatError("implausible input rank", r.offset());
    for (std::uint32_t i = 0; i < rank; ++i) net.input_shape.push_back(r.u64("input dim"));
    const auto outs = r.u32("output count");
    for (std::uint32_t i = 0; i < outs; ++i) net.outputs.push_back(r.str("output name"));
    if (!r.done()) throw FormatError("trailing bytes after model", r.offset());
    try {
        net.validate();
    } catch (const ShapeError& e) {
        throw FormatError(std::string("inconsistent model: ") + e.what(), r.offset());
    }
    return net;
}

inline void save(const Network& net, const std::string& path) {
    io::ByteWriter w;
    const auto bytes = serialize(net);
    w.raw(std::string_view(bytes.data(), bytes.size()));
    w.save(path);
}

inline Network load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("cannot open model " + path);
    std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(std::move(data));
}

}  // namespace hudd::net
