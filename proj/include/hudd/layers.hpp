#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <variant>
#include <vector>

#include "hudd/tensor.hpp"

namespace hudd::net {

enum class LayerKind : std::uint8_t { dense = 0, conv2d = 1, relu = 2, maxpool = 3, flatten = 4 };

inline const char* kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::dense: return "dense";
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::relu: return "relu";
        case LayerKind::maxpool: return "maxpool";
        case LayerKind::flatten: return "flatten";
    }
    return "unknown";
}

/// Fully connected layer. weights are out x in, row-major.
struct Dense {
    std::size_t in = 0;
    std::size_t out = 0;
    std::vector<double> weights;
    std::vector<double> bias;

    Dense() = default;
    Dense(std::size_t in_width, std::size_t out_width)
        : in(in_width), out(out_width), weights(in_width * out_width, 0.0), bias(out_width, 0.0) {}

    double w(std::size_t o, std::size_t i) const { return weights[o * in + i]; }
    friend bool operator==(const Dense&, const Dense&) = default;
};

/// 2-D convolution over CHW input. weights are out x in x kernel x kernel.
struct Conv2d {
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t kernel = 0;
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::vector<double> weights;
    std::vector<double> bias;

    Conv2d() = default;
    Conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t k, std::size_t s = 1, std::size_t pad = 0)
        : in_channels(in_ch), out_channels(out_ch), kernel(k), stride(s), padding(pad),
          weights(out_ch * in_ch * k * k, 0.0), bias(out_ch, 0.0) {}

    std::size_t widx(std::size_t oc, std::size_t ic, std::size_t ky, std::size_t kx) const {
        return ((oc * in_channels + ic) * kernel + ky) * kernel + kx;
    }
    friend bool operator==(const Conv2d&, const Conv2d&) = default;
};

struct Relu {
    friend bool operator==(const Relu&, const Relu&) = default;
};

struct MaxPool {
    std::size_t window = 2;
    std::size_t stride = 2;
    friend bool operator==(const MaxPool&, const MaxPool&) = default;
};

struct Flatten {
    friend bool operator==(const Flatten&, const Flatten&) = default;
};

using Layer = std::variant<Dense, Conv2d, Relu, MaxPool, Flatten>;

inline LayerKind kind_of(const Layer& layer) { return static_cast<LayerKind>(layer.index()); }

inline bool is_parameterized(const Layer& layer) {
    return std::holds_alternative<Dense>(layer) || std::holds_alternative<Conv2d>(layer);
}

/// Gradient buffers for one layer; empty for parameter-free layers.
struct ParamGrad {
    std::vector<double> weights;
    std::vector<double> bias;
};

namespace detail {

inline std::size_t conv_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    if (in + 2 * pad < k) return 0;
    return (in + 2 * pad - k) / stride + 1;
}

inline void require_rank(const Shape& in, std::size_t rank, const char* who) {
    if (in.size() != rank) {
        throw ShapeError(std::string(who) + " expects rank-" + std::to_string(rank) + " input, got " +
                         shape_string(in));
    }
}

}  // namespace detail

inline Shape output_shape(const Layer& layer, const Shape& in) {
    return std::visit(
        [&](const auto& l) -> Shape {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, Dense>) {
                detail::require_rank(in, 1, "dense");
                if (in[0] != l.in) {
                    throw ShapeError("dense expects width " + std::to_string(l.in) + ", got " + shape_string(in));
                }
                return {l.out};
            } else if constexpr (std::is_same_v<T, Conv2d>) {
                detail::require_rank(in, 3, "conv2d");
                if (in[0] != l.in_channels) {
                    throw ShapeError("conv2d expects " + std::to_string(l.in_channels) + " channels, got " +
                                     shape_string(in));
                }
                const auto h = detail::conv_extent(in[1], l.kernel, l.stride, l.padding);
                const auto w = detail::conv_extent(in[2], l.kernel, l.stride, l.padding);
                if (h == 0 || w == 0) throw ShapeError("conv2d kernel larger than input " + shape_string(in));
                return {l.out_channels, h, w};
            } else if constexpr (std::is_same_v<T, MaxPool>) {
                detail::require_rank(in, 3, "maxpool");
                const auto h = detail::conv_extent(in[1], l.window, l.stride, 0);
                const auto w = detail::conv_extent(in[2], l.window, l.stride, 0);
                if (h == 0 || w == 0) throw ShapeError("maxpool window larger than input " + shape_string(in));
                return {in[0], h, w};
            } else if constexpr (std::is_same_v<T, Flatten>) {
                return {shape_size(in)};
            } else {
                return in;
            }
        },
        layer);
}

// ---------------------------------------------------------------------------
// Forward

inline void forward(const Dense& l, const Tensor& in, Tensor& out) {
    out = Tensor({l.out});
    const double* x = in.values().data();
    for (std::size_t o = 0; o < l.out; ++o) {
        const double* row = l.weights.data() + o * l.in;
        double acc = l.bias[o];
        for (std::size_t i = 0; i < l.in; ++i) acc += row[i] * x[i];
        out[o] = acc;
    }
}

inline void forward(const Conv2d& l, const Tensor& in, Tensor& out) {
    const auto& s = in.shape();
    const std::size_t ih = s[1], iw = s[2];
    const auto os = output_shape(l, s);
    const std::size_t oh = os[1], ow = os[2];
    out = Tensor(os);
    const long pad = static_cast<long>(l.padding);
    for (std::size_t oc = 0; oc < l.out_channels; ++oc) {
        double* dst = out.values().data() + oc * oh * ow;
        std::fill(dst, dst + oh * ow, l.bias[oc]);
        for (std::size_t ic = 0; ic < l.in_channels; ++ic) {
            const double* src = in.values().data() + ic * ih * iw;
            for (std::size_t ky = 0; ky < l.kernel; ++ky) {
                for (std::size_t kx = 0; kx < l.kernel; ++kx) {
                    const double wv = l.weights[l.widx(oc, ic, ky, kx)];
                    for (std::size_t oy = 0; oy < oh; ++oy) {
                        const long y = static_cast<long>(oy * l.stride + ky) - pad;
                        if (y < 0 || y >= static_cast<long>(ih)) continue;
                        const double* srow = src + static_cast<std::size_t>(y) * iw;
                        double* drow = dst + oy * ow;
                        if (l.stride == 1 && pad == 0) {
                            const double* sp = srow + kx;
                            for (std::size_t ox = 0; ox < ow; ++ox) drow[ox] += wv * sp[ox];
                        } else {
                            for (std::size_t ox = 0; ox < ow; ++ox) {
                                const long x = static_cast<long>(ox * l.stride + kx) - pad;
                                if (x < 0 || x >= static_cast<long>(iw)) continue;
                                drow[ox] += wv * srow[x];
                            }
                        }
                    }
                }
            }
        }
    }
}

inline void forward(const Relu&, const Tensor& in, Tensor& out) {
    out = in;
    for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
}

/// Index of the window maximum; first occurrence in scan order wins.
inline std::size_t maxpool_argmax(const MaxPool& l, const Tensor& in, std::size_t c, std::size_t oy, std::size_t ox) {
    const auto& s = in.shape();
    const std::size_t ih = s[1], iw = s[2];
    std::size_t best = c * ih * iw + (oy * l.stride) * iw + ox * l.stride;
    double best_v = in[best];
    for (std::size_t dy = 0; dy < l.window; ++dy) {
        for (std::size_t dx = 0; dx < l.window; ++dx) {
            const std::size_t idx = c * ih * iw + (oy * l.stride + dy) * iw + (ox * l.stride + dx);
            if (in[idx] > best_v) {
                best_v = in[idx];
                best = idx;
            }
        }
    }
    return best;
}

inline void forward(const MaxPool& l, const Tensor& in, Tensor& out) {
    const auto os = output_shape(l, in.shape());
    out = Tensor(os);
    std::size_t o = 0;
    for (std::size_t c = 0; c < os[0]; ++c)
        for (std::size_t y = 0; y < os[1]; ++y)
            for (std::size_t x = 0; x < os[2]; ++x) out[o++] = in[maxpool_argmax(l, in, c, y, x)];
}

inline void forward(const Flatten&, const Tensor& in, Tensor& out) { out = in.reshaped({in.size()}); }

inline void forward(const Layer& layer, const Tensor& in, Tensor& out) {
    std::visit([&](const auto& l) { forward(l, in, out); }, layer);
}

// ---------------------------------------------------------------------------
// Backward: grad_in = dL/d(in); parameter gradients are accumulated into pg.

inline void backward(const Dense& l, const Tensor& in, const Tensor&, const Tensor& grad_out, Tensor& grad_in,
                     ParamGrad* pg) {
    grad_in = Tensor({l.in});
    for (std::size_t o = 0; o < l.out; ++o) {
        const double g = grad_out[o];
        if (g == 0.0) continue;
        const double* row = l.weights.data() + o * l.in;
        for (std::size_t i = 0; i < l.in; ++i) grad_in[i] += row[i] * g;
        if (pg) {
            double* gw = pg->weights.data() + o * l.in;
            for (std::size_t i = 0; i < l.in; ++i) gw[i] += in[i] * g;
            pg->bias[o] += g;
        }
    }
}

inline void backward(const Conv2d& l, const Tensor& in, const Tensor& out, const Tensor& grad_out, Tensor& grad_in,
                     ParamGrad* pg) {
    const auto& s = in.shape();
    const std::size_t ih = s[1], iw = s[2];
    const std::size_t oh = out.shape()[1], ow = out.shape()[2];
    grad_in = Tensor(s);
    const long pad = static_cast<long>(l.padding);
    const bool fast = l.stride == 1 && pad == 0;
    for (std::size_t oc = 0; oc < l.out_channels; ++oc) {
        const double* go = grad_out.values().data() + oc * oh * ow;
        if (pg) {
            double b = 0.0;
            for (std::size_t i = 0; i < oh * ow; ++i) b += go[i];
            pg->bias[oc] += b;
        }
        for (std::size_t ic = 0; ic < l.in_channels; ++ic) {
            const double* src = in.values().data() + ic * ih * iw;
            double* gsrc = grad_in.values().data() + ic * ih * iw;
            for (std::size_t ky = 0; ky < l.kernel; ++ky) {
                for (std::size_t kx = 0; kx < l.kernel; ++kx) {
                    const std::size_t wi = l.widx(oc, ic, ky, kx);
                    const double wv = l.weights[wi];
                    double gw = 0.0;
                    for (std::size_t oy = 0; oy < oh; ++oy) {
                        const long y = static_cast<long>(oy * l.stride + ky) - pad;
                        if (y < 0 || y >= static_cast<long>(ih)) continue;
                        const double* grow = go + oy * ow;
                        if (fast) {
                            const double* sp = src + static_cast<std::size_t>(y) * iw + kx;
                            double* gp = gsrc + static_cast<std::size_t>(y) * iw + kx;
                            for (std::size_t ox = 0; ox < ow; ++ox) {
                                gw += grow[ox] * sp[ox];
                                gp[ox] += grow[ox] * wv;
                            }
                        } else {
                            for (std::size_t ox = 0; ox < ow; ++ox) {
                                const long x = static_cast<long>(ox * l.stride + kx) - pad;
                                if (x < 0 || x >= static_cast<long>(iw)) continue;
                                const std::size_t p = static_cast<std::size_t>(y) * iw + static_cast<std::size_t>(x);
                                gw += grow[ox] * src[p];
                                gsrc[p] += grow[ox] * wv;
                            }
                        }
                    }
                    if (pg) pg->weights[wi] += gw;
                }
            }
        }
    }
}

inline void backward(const Relu&, const Tensor& in, const Tensor&, const Tensor& grad_out, Tensor& grad_in,
                     ParamGrad*) {
    grad_in = grad_out;
    for (std::size_t i = 0; i < in.size(); ++i)
        if (in[i] <= 0.0) grad_in[i] = 0.0;
}

inline void backward(const MaxPool& l, const Tensor& in, const Tensor& out, const Tensor& grad_out, Tensor& grad_in,
                     ParamGrad*) {
    grad_in = Tensor(in.shape());
    const auto& os = out.shape();
    std::size_t o = 0;
    for (std::size_t c = 0; c < os[0]; ++c)
        for (std::size_t y = 0; y < os[1]; ++y)
            for (std::size_t x = 0; x < os[2]; ++x) grad_in[maxpool_argmax(l, in, c, y, x)] += grad_out[o++];
}

inline void backward(const Flatten&, const Tensor& in, const Tensor&, const Tensor& grad_out, Tensor& grad_in,
                     ParamGrad*) {
    grad_in = grad_out.reshaped(in.shape());
}

inline void backward(const Layer& layer, const Tensor& in, const Tensor& out, const Tensor& grad_out,
                     Tensor& grad_in, ParamGrad* pg) {
    std::visit([&](const auto& l) { backward(l, in, out, grad_out, grad_in, pg); }, layer);
}

inline ParamGrad zero_grad(const Layer& layer) {
    if (const auto* d = std::get_if<Dense>(&layer)) return {std::vector<double>(d->weights.size()), std::vector<double>(d->bias.size())};
    if (const auto* c = std::get_if<Conv2d>(&layer)) return {std::vector<double>(c->weights.size()), std::vector<double>(c->bias.size())};
    return {};
}

}  // namespace hudd::net
