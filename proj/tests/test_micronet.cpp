#include <gtest/gtest.h>

#include <filesystem>
#include <functional>

#include "hudd/network.hpp"
#include "test_util.hpp"

using namespace hudd;
using namespace hudd::net;
using hudd::testing::random_tensor;
using hudd::testing::rel_error;

namespace {

// Straight-from-the-definition convolution with zero padding.
Tensor conv_oracle(const Conv2d& l, const Tensor& in) {
    const auto h = in.shape()[1], w = in.shape()[2];
    const auto oh = (h + 2 * l.padding - l.kernel) / l.stride + 1;
    const auto ow = (w + 2 * l.padding - l.kernel) / l.stride + 1;
    Tensor out({l.out_channels, oh, ow});
    for (std::size_t oc = 0; oc < l.out_channels; ++oc)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x) {
                double s = l.bias[oc];
                for (std::size_t ic = 0; ic < l.in_channels; ++ic)
                    for (std::size_t ky = 0; ky < l.kernel; ++ky)
                        for (std::size_t kx = 0; kx < l.kernel; ++kx) {
                            const long iy = static_cast<long>(y * l.stride + ky) - static_cast<long>(l.padding);
                            const long ix = static_cast<long>(x * l.stride + kx) - static_cast<long>(l.padding);
                            if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                            s += l.weights[l.widx(oc, ic, ky, kx)] * in[(ic * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)];
                        }
                out[(oc * oh + y) * ow + x] = s;
            }
    return out;
}

/// Network with one layer of interest sandwiched so that its gradient is
/// observable: the loss is a fixed random linear functional of the raw output.
struct GradCase {
    Network net;
    Tensor input;
    Tensor weights_out;  // dLoss/dOutput
};

double linear_loss(const Network& n, const Tensor& input, const Tensor& c) {
    const auto out = run_from(n, 0, input);
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += c[i] * out[i];
    return s;
}

void check_gradients(GradCase gc) {
    const auto fr = forward(gc.net, gc.input);
    const auto g = backprop(gc.net, fr.trace, gc.weights_out);
    const double h = 1e-5;
    std::size_t checked = 0;
    auto check_param = [&](std::vector<double>& params, const std::vector<double>& analytic, const char* what) {
        ASSERT_EQ(params.size(), analytic.size());
        for (std::size_t k = 0; k < params.size(); ++k) {
            const double saved = params[k];
            params[k] = saved + h;
            const double up = linear_loss(gc.net, gc.input, gc.weights_out);
            params[k] = saved - h;
            const double down = linear_loss(gc.net, gc.input, gc.weights_out);
            params[k] = saved;
            const double numeric = (up - down) / (2 * h);
            EXPECT_LT(rel_error(analytic[k], numeric), 1e-3) << what << "[" << k << "] analytic " << analytic[k]
                                                              << " numeric " << numeric;
            ++checked;
        }
    };
    for (std::size_t i = 0; i < gc.net.layers.size(); ++i) {
        if (auto* d = std::get_if<Dense>(&gc.net.layers[i])) {
            check_param(d->weights, g.params[i].weights, "dense weights");
            check_param(d->bias, g.params[i].bias, "dense bias");
        } else if (auto* c = std::get_if<Conv2d>(&gc.net.layers[i])) {
            check_param(c->weights, g.params[i].weights, "conv weights");
            check_param(c->bias, g.params[i].bias, "conv bias");
        }
    }
    std::vector<double> input = gc.input.data();
    for (std::size_t k = 0; k < input.size(); ++k) {
        Tensor up = gc.input, down = gc.input;
        up[k] += h;
        down[k] -= h;
        const double numeric = (linear_loss(gc.net, up, gc.weights_out) - linear_loss(gc.net, down, gc.weights_out)) / (2 * h);
        EXPECT_LT(rel_error(g.input[k], numeric), 1e-3) << "input[" << k << "]";
        ++checked;
    }
    EXPECT_GT(checked, 0u);
}

GradCase make_case(std::vector<Layer> layers, Shape input, std::uint64_t seed) {
    Rng rng(seed);
    GradCase gc;
    gc.net.input_shape = input;
    gc.net.layers = std::move(layers);
    const auto shapes = gc.net.boundary_shapes();
    if (shapes.back().size() != 1) gc.net.layers.emplace_back(Flatten{});
    gc.net.outputs = hudd::testing::names(gc.net.output_width());
    hudd::testing::randomize(gc.net, rng, 0.3);
    gc.input = random_tensor(input, rng);
    gc.weights_out = random_tensor({gc.net.output_width()}, rng);
    return gc;
}

}  // namespace

TEST(Layers, OutputShapes) {
    EXPECT_EQ(output_shape(Layer(Dense(5, 3)), {5}), (Shape{3}));
    EXPECT_EQ(output_shape(Layer(Conv2d(2, 4, 3)), {2, 8, 9}), (Shape{4, 6, 7}));
    EXPECT_EQ(output_shape(Layer(Conv2d(2, 4, 3, 2, 1)), {2, 8, 9}), (Shape{4, 4, 5}));
    EXPECT_EQ(output_shape(Layer(MaxPool{}), {3, 7, 8}), (Shape{3, 3, 4}));
    EXPECT_EQ(output_shape(Layer(Flatten{}), {3, 2, 2}), (Shape{12}));
    EXPECT_EQ(output_shape(Layer(Relu{}), {3, 2, 2}), (Shape{3, 2, 2}));
    EXPECT_THROW(output_shape(Layer(Dense(5, 3)), {4}), ShapeError);
    EXPECT_THROW(output_shape(Layer(Conv2d(2, 4, 3)), {3, 8, 8}), ShapeError);
    EXPECT_THROW(output_shape(Layer(Conv2d(1, 1, 5)), {1, 3, 3}), ShapeError);
}

TEST(Layers, ConvForwardMatchesOracle) {
    Rng rng(11);
    for (auto [k, s, p] : {std::tuple{3u, 1u, 0u}, {3u, 2u, 1u}, {2u, 1u, 1u}, {5u, 3u, 2u}}) {
        Conv2d l(2, 3, k, s, p);
        for (auto& w : l.weights) w = rng.uniform(-1, 1);
        for (auto& b : l.bias) b = rng.uniform(-1, 1);
        const auto in = random_tensor({2, 9, 8}, rng);
        Tensor out;
        forward(l, in, out);
        const auto expect = conv_oracle(l, in);
        ASSERT_EQ(out.shape(), expect.shape());
        for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], expect[i], 1e-12);
    }
}

TEST(Layers, DenseForwardMatchesOracle) {
    Rng rng(3);
    Dense l(4, 3);
    for (auto& w : l.weights) w = rng.uniform(-1, 1);
    for (auto& b : l.bias) b = rng.uniform(-1, 1);
    const auto in = random_tensor({4}, rng);
    Tensor out;
    forward(l, in, out);
    for (std::size_t o = 0; o < 3; ++o) {
        double s = l.bias[o];
        for (std::size_t i = 0; i < 4; ++i) s += l.w(o, i) * in[i];
        EXPECT_NEAR(out[o], s, 1e-14);
    }
}

TEST(Layers, MaxPoolFirstMaximumWins) {
    Tensor in({1, 2, 2}, {5, 5, 1, 5});
    EXPECT_EQ(maxpool_argmax(MaxPool{}, in, 0, 0, 0), 0u);
    Tensor grad_out({1, 1, 1}, {2.0}), grad_in;
    Tensor out;
    forward(MaxPool{}, in, out);
    backward(MaxPool{}, in, out, grad_out, grad_in, nullptr);
    EXPECT_EQ(grad_in.data(), (std::vector<double>{2, 0, 0, 0}));
}

TEST(Layers, ReluZeroesNegatives) {
    Tensor in({4}, {-1, 0, 2, -0.5}), out;
    forward(Relu{}, in, out);
    EXPECT_EQ(out.data(), (std::vector<double>{0, 0, 2, 0}));
}

TEST(GradientCheck, Dense) {
    for (std::uint64_t s = 0; s < 3; ++s) check_gradients(make_case({Dense(6, 4)}, {6}, s));
}

TEST(GradientCheck, Conv2d) {
    check_gradients(make_case({Conv2d(2, 3, 3)}, {2, 6, 6}, 1));
    check_gradients(make_case({Conv2d(2, 2, 3, 2, 1)}, {2, 7, 6}, 2));
}

TEST(GradientCheck, Relu) { check_gradients(make_case({Dense(6, 8), Relu{}, Dense(8, 3)}, {6}, 4)); }

TEST(GradientCheck, MaxPool) { check_gradients(make_case({Conv2d(1, 2, 3), MaxPool{}}, {1, 8, 8}, 5)); }

TEST(GradientCheck, Flatten) { check_gradients(make_case({Conv2d(1, 2, 3), Flatten{}, Dense(2 * 4 * 4, 3)}, {1, 6, 6}, 6)); }

TEST(GradientCheck, FullConvNetCrossEntropy) {
    auto n = hudd::testing::small_convnet(4, 1);
    Rng rng(9);
    hudd::testing::randomize(n, rng);
    LabeledDataset d;
    d.add("a", random_tensor(n.input_shape, rng), 2);
    const auto fr = forward(n, d.images[0]);
    Tensor grad;
    detail::loss_gradient(n, fr.trace.values.back(), d, 0, grad);
    const auto g = backprop(n, fr.trace, grad);
    auto& dense = std::get<Dense>(n.layers.back());
    const double h = 1e-5;
    for (std::size_t k = 0; k < dense.weights.size(); ++k) {
        const double saved = dense.weights[k];
        dense.weights[k] = saved + h;
        const double up = mean_loss(n, d);
        dense.weights[k] = saved - h;
        const double down = mean_loss(n, d);
        dense.weights[k] = saved;
        EXPECT_LT(rel_error(g.params.back().weights[k], (up - down) / (2 * h)), 1e-3);
    }
    auto& conv = std::get<Conv2d>(n.layers[0]);
    for (std::size_t k = 0; k < conv.weights.size(); ++k) {
        const double saved = conv.weights[k];
        conv.weights[k] = saved + h;
        const double up = mean_loss(n, d);
        conv.weights[k] = saved - h;
        const double down = mean_loss(n, d);
        conv.weights[k] = saved;
        EXPECT_LT(rel_error(g.params[0].weights[k], (up - down) / (2 * h)), 1e-3);
    }
}

TEST(GradientCheck, RegressionMse) {
    Network n;
    n.input_shape = {5};
    n.task = Task::regression;
    n.outputs = {"x", "y"};
    n.layers = {Dense(5, 4), Relu{}, Dense(4, 2)};
    Rng rng(4);
    hudd::testing::randomize(n, rng);
    LabeledDataset d;
    d.add("a", random_tensor({5}, rng), std::vector<double>{0.3, -0.2});
    const auto fr = forward(n, d.images[0]);
    Tensor grad;
    detail::loss_gradient(n, fr.trace.values.back(), d, 0, grad);
    const auto g = backprop(n, fr.trace, grad);
    auto& first = std::get<Dense>(n.layers[0]);
    for (std::size_t k = 0; k < first.weights.size(); ++k) {
        const double saved = first.weights[k], h = 1e-5;
        first.weights[k] = saved + h;
        const double up = mean_loss(n, d);
        first.weights[k] = saved - h;
        const double down = mean_loss(n, d);
        first.weights[k] = saved;
        EXPECT_LT(rel_error(g.params[0].weights[k], (up - down) / (2 * h)), 1e-3);
    }
}

TEST(Network, ValidateRejectsBadArchitectures) {
    Network n;
    n.input_shape = {4};
    n.outputs = {"a", "b"};
    EXPECT_THROW(n.validate(), ShapeError);
    n.layers = {Relu{}};
    EXPECT_THROW(n.validate(), ShapeError);
    n.layers = {Dense(4, 3)};
    EXPECT_THROW(n.validate(), ShapeError);
    n.layers = {Dense(4, 2)};
    EXPECT_NO_THROW(n.validate());
}

TEST(Network, DefaultClassifierShapes) {
    const auto n = make_default_classifier(hudd::testing::names(8));
    const auto shapes = n.boundary_shapes();
    ASSERT_EQ(shapes.size(), 11u);
    EXPECT_EQ(shapes[1], (Shape{8, 30, 30}));
    EXPECT_EQ(shapes[4], (Shape{16, 13, 13}));
    EXPECT_EQ(shapes[8], (Shape{64}));
    EXPECT_EQ(shapes.back(), (Shape{8}));
}

TEST(Network, ForwardRejectsWrongInputShape) {
    const auto n = hudd::testing::small_convnet(3, 0);
    EXPECT_THROW(forward(n, Tensor({1, 9, 10})), ShapeError);
}

TEST(Network, SoftmaxOutputsSumToOne) {
    const auto n = hudd::testing::small_convnet(5, 2);
    Rng rng(1);
    const auto r = forward(n, random_tensor(n.input_shape, rng));
    EXPECT_NEAR(r.output.sum(), 1.0, 1e-12);
}

TEST(Network, ArgmaxLowestIndexWinsTies) {
    const std::vector<double> v{0.1, 0.4, 0.4, 0.1};
    EXPECT_EQ(argmax(v), 1u);
}

namespace {

LabeledDataset separable(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    LabeledDataset d;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t label = i % 2;
        Tensor t({1, 10, 10});
        for (std::size_t k = 0; k < t.size(); ++k) t[k] = 0.1 * rng.uniform();
        for (std::size_t y = 0; y < 10; ++y) t[y * 10 + (label ? 7 : 2)] += 1.0;
        d.add("s" + std::to_string(i), t, label);
    }
    return d;
}

}  // namespace

TEST(Training, ReducesLossAndLearnsSeparableData) {
    const auto data = separable(40, 1);
    auto n = hudd::testing::small_convnet(2, 3);
    const double before = mean_loss(n, data);
    TrainConfig c{30, 0.1, 8, 5, true};
    const auto trained = train(n, data, c);
    EXPECT_LT(mean_loss(trained, data), before * 0.5);
    EXPECT_EQ(evaluate(trained, data).accuracy, 1.0);
}

TEST(Training, DeterministicForSameSeed) {
    const auto data = separable(20, 2);
    const auto n = hudd::testing::small_convnet(2, 3);
    TrainConfig c{3, 0.05, 4, 9, true};
    EXPECT_EQ(train(n, data, c), train(n, data, c));
    TrainConfig other = c;
    other.seed = 10;
    EXPECT_NE(train(n, data, c), train(n, data, other));
}

TEST(Training, ZeroEpochsIsIdentityAndColdStartReinitializes) {
    const auto data = separable(8, 2);
    const auto n = hudd::testing::small_convnet(2, 3);
    EXPECT_EQ(train(n, data, {0, 0.1, 4, 0, true}), n);
    auto reinit = hudd::testing::small_convnet(2, 77);
    Network expect = reinit;
    expect.initialize(3);
    const TrainConfig cold{1, 0.1, 4, 3, false};
    EXPECT_EQ(train(reinit, data, cold), train(expect, data, {1, 0.1, 4, 3, true}));
}

TEST(Training, RejectsBadInput) {
    const auto n = hudd::testing::small_convnet(2, 3);
    EXPECT_THROW(train(n, LabeledDataset{}, {}), InvalidArgument);
    auto d = separable(4, 1);
    d.labels[0] = 7;
    EXPECT_THROW(train(n, d, {}), InvalidArgument);
    EXPECT_THROW(train(n, separable(4, 1), {1, 0.0, 4, 0, true}), InvalidArgument);
    EXPECT_THROW(train(n, separable(4, 1), {1, 0.1, 0, 0, true}), InvalidArgument);
}

TEST(Evaluate, RegressionUsesPointThreshold) {
    Network n;
    n.input_shape = {2};
    n.task = Task::regression;
    n.outputs = {"x", "y"};
    Dense id(2, 2);
    id.weights = {1, 0, 0, 1};
    n.layers = {id};
    LabeledDataset d;
    d.add("near", Tensor({2}, {0, 0}), std::vector<double>{3, 0});
    d.add("far", Tensor({2}, {0, 0}), std::vector<double>{3, 4});
    const auto r = evaluate(n, d, {4.0, 2});
    EXPECT_TRUE(r.correct[0]);
    EXPECT_FALSE(r.correct[1]);
    EXPECT_DOUBLE_EQ(r.accuracy, 0.5);
}

TEST(ModelFile, RoundTripIsExact) {
    auto n = hudd::testing::small_convnet(3, 1);
    Rng rng(2);
    hudd::testing::randomize(n, rng);
    const auto bytes = serialize(n);
    EXPECT_EQ(deserialize(bytes), n);
    const auto path = (std::filesystem::temp_directory_path() / "hudd_model_roundtrip.bin").string();
    save(n, path);
    EXPECT_EQ(load(path), n);
    std::filesystem::remove(path);
}

TEST(ModelFile, RejectsForeignAndNewerFiles) {
    const auto bytes = serialize(hudd::testing::small_convnet(2, 0));
    auto newer = bytes;
    newer[7] = '2';
    EXPECT_THROW(deserialize(newer), VersionError);
    auto foreign = bytes;
    foreign[0] = 'X';
    EXPECT_THROW(deserialize(foreign), VersionError);
}

TEST(ModelFile, TruncationAndTrailingBytesReportOffsets) {
    const auto bytes = serialize(hudd::testing::small_convnet(2, 0));
    for (std::size_t cut : {std::size_t{3}, std::size_t{12}, bytes.size() / 2, bytes.size() - 1}) {
        std::vector<char> shorter(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
        try {
            deserialize(shorter);
            FAIL() << "truncated file accepted";
        } catch (const FormatError& e) {
            EXPECT_LE(e.offset(), cut);
        }
    }
    auto longer = bytes;
    longer.push_back('x');
    try {
        deserialize(longer);
        FAIL() << "trailing byte accepted";
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset(), bytes.size());
    }
    EXPECT_THROW(load("/nonexistent/model.bin"), NotFoundError);
}
