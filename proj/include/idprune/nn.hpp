#pragma once

// Feedforward network runtime: layer descriptors, shape validation, forward
// evaluation with activation capture, FLOPs accounting and batch-norm folding.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "idprune/error.hpp"
#include "idprune/matrix.hpp"
#include "idprune/tensor.hpp"

namespace idprune {

// y = W^T x + b with W stored d_in x d_out.
struct FullyConnected {
    Matrix weight;
    std::vector<double> bias;

    std::size_t in_features() const { return weight.rows(); }
    std::size_t out_features() const { return weight.cols(); }
};

// Weight layout [out_ch][in_ch][kh][kw].
struct Conv2d {
    Tensor weight;
    std::vector<double> bias;
    std::size_t stride = 1;
    std::size_t padding = 0;

    std::size_t out_channels() const { return weight.dim(0); }
    std::size_t in_channels() const { return weight.dim(1); }
    std::size_t kernel_h() const { return weight.dim(2); }
    std::size_t kernel_w() const { return weight.dim(3); }
};

struct MaxPool2d {
    std::size_t size = 2;
    std::size_t stride = 2;
};

struct AvgPool2d {
    std::size_t size = 2;
    std::size_t stride = 2;
};

// (batch, c, h, w) -> (batch, c*h*w), channel index slowest.
struct Flatten {};

struct ReLU {};

// Inference-mode normalization over channels (4-D) or features (2-D).
struct BatchNorm {
    std::vector<double> gamma;
    std::vector<double> beta;
    std::vector<double> mean;
    std::vector<double> var;
    double eps = 1e-5;
};

// The block input is added to the activation at the matching end marker.
struct ResidualBlockStart {
    int id = 0;
};

struct ResidualBlockEnd {
    int id = 0;
};

using Layer = std::variant<FullyConnected, Conv2d, MaxPool2d, AvgPool2d, Flatten, ReLU, BatchNorm,
                           ResidualBlockStart, ResidualBlockEnd>;

inline std::string layer_kind(const Layer& layer) {
    static constexpr const char* names[] = {"fully_connected", "conv2d",     "max_pool2d",
                                            "avg_pool2d",      "flatten",    "relu",
                                            "batch_norm",      "residual_start", "residual_end"};
    return names[layer.index()];
}

inline bool is_weighted(const Layer& layer) {
    return std::holds_alternative<FullyConnected>(layer) || std::holds_alternative<Conv2d>(layer);
}

// Layers that act on each channel (or neuron) independently; they commute
// with channel sub-selection.
inline bool is_channelwise(const Layer& layer) {
    return std::holds_alternative<ReLU>(layer) || std::holds_alternative<MaxPool2d>(layer) ||
           std::holds_alternative<AvgPool2d>(layer) || std::holds_alternative<BatchNorm>(layer);
}

// Output width (neurons or channels) of a weighted layer.
inline std::size_t layer_width(const Layer& layer) {
    if (const auto* fc = std::get_if<FullyConnected>(&layer)) return fc->out_features();
    if (const auto* conv = std::get_if<Conv2d>(&layer)) return conv->out_channels();
    throw InvalidInput("layer_width: " + layer_kind(layer) + " has no width");
}

struct Model {
    std::string name = "model";
    Shape input_shape;  // per sample, without the batch dimension
    std::size_t num_classes = 0;
    std::vector<Layer> layers;
    // Free-form provenance (seed, config hash, version, ...), saved with the model.
    std::map<std::string, std::string> metadata;

    std::vector<std::size_t> weighted_layers() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < layers.size(); ++i)
            if (is_weighted(layers[i])) out.push_back(i);
        return out;
    }
};

namespace detail {

[[noreturn]] inline void layer_error(std::size_t index, const Layer& layer, const std::string& msg) {
    throw ShapeError("layer " + std::to_string(index) + " (" + layer_kind(layer) + "): " + msg);
}

inline std::size_t pooled_extent(std::size_t in, std::size_t size, std::size_t stride) {
    return in < size ? 0 : (in - size) / stride + 1;
}

inline std::size_t conv_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    return in + 2 * pad < k ? 0 : (in + 2 * pad - k) / stride + 1;
}

}  // namespace detail

// Per-sample output shape of `layer` given its per-sample input shape.
inline Shape layer_output_shape(const Layer& layer, const Shape& in, std::size_t index = 0) {
    return std::visit(
        [&](const auto& l) -> Shape {
            using L = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<L, FullyConnected>) {
                if (in.size() != 1 || in[0] != l.in_features())
                    detail::layer_error(index, layer, "expects (" + std::to_string(l.in_features()) +
                                                          "), got " + shape_string(in));
                if (l.bias.size() != l.out_features()) detail::layer_error(index, layer, "bias length");
                return {l.out_features()};
            } else if constexpr (std::is_same_v<L, Conv2d>) {
                if (l.weight.rank() != 4) detail::layer_error(index, layer, "weight must be 4-D");
                if (in.size() != 3 || in[0] != l.in_channels())
                    detail::layer_error(index, layer, "expects " + std::to_string(l.in_channels()) +
                                                          " input channels, got " + shape_string(in));
                if (l.bias.size() != l.out_channels()) detail::layer_error(index, layer, "bias length");
                if (l.stride == 0) detail::layer_error(index, layer, "stride must be positive");
                const auto h = detail::conv_extent(in[1], l.kernel_h(), l.stride, l.padding);
                const auto w = detail::conv_extent(in[2], l.kernel_w(), l.stride, l.padding);
                if (h == 0 || w == 0) detail::layer_error(index, layer, "kernel larger than input");
                return {l.out_channels(), h, w};
            } else if constexpr (std::is_same_v<L, MaxPool2d> || std::is_same_v<L, AvgPool2d>) {
                if (in.size() != 3) detail::layer_error(index, layer, "expects (c, h, w) input");
                if (l.size == 0 || l.stride == 0) detail::layer_error(index, layer, "bad pool geometry");
                const auto h = detail::pooled_extent(in[1], l.size, l.stride);
                const auto w = detail::pooled_extent(in[2], l.size, l.stride);
                if (h == 0 || w == 0) detail::layer_error(index, layer, "window larger than input");
                return {in[0], h, w};
            } else if constexpr (std::is_same_v<L, Flatten>) {
                return {shape_volume(in)};
            } else if constexpr (std::is_same_v<L, BatchNorm>) {
                const std::size_t c = in[0];
                if (l.gamma.size() != c || l.beta.size() != c || l.mean.size() != c || l.var.size() != c)
                    detail::layer_error(index, layer, "parameter length does not match " + std::to_string(c));
                for (double v : l.var)
                    if (!(v > 0.0)) detail::layer_error(index, layer, "variance entries must be > 0");
                return in;
            } else {
                return in;
            }
        },
        layer);
}

// Validates shapes and residual nesting; returns the per-sample output shape
// of every layer.
inline std::vector<Shape> validate_model(const Model& model) {
    if (model.input_shape.empty()) throw ShapeError("model has no input shape");
    std::vector<Shape> shapes;
    shapes.reserve(model.layers.size());
    Shape current = model.input_shape;
    std::vector<std::pair<int, Shape>> open;
    std::vector<int> seen;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const Layer& layer = model.layers[i];
        if (const auto* s = std::get_if<ResidualBlockStart>(&layer)) {
            if (std::find(seen.begin(), seen.end(), s->id) != seen.end())
                throw StructuralError("residual block id " + std::to_string(s->id) + " reused at layer " +
                                      std::to_string(i));
            seen.push_back(s->id);
            open.emplace_back(s->id, current);
        } else if (const auto* e = std::get_if<ResidualBlockEnd>(&layer)) {
            if (open.empty() || open.back().first != e->id)
                throw StructuralError("residual end " + std::to_string(e->id) + " at layer " +
                                      std::to_string(i) + " does not close the innermost open block");
            if (open.back().second != current)
                detail::layer_error(i, layer, "block input " + shape_string(open.back().second) +
                                                  " cannot be added to " + shape_string(current));
            open.pop_back();
        } else {
            current = layer_output_shape(layer, current, i);
        }
        shapes.push_back(current);
    }
    if (!open.empty())
        throw StructuralError("residual block " + std::to_string(open.back().first) + " is never closed");
    if (model.num_classes != 0 && current != Shape{model.num_classes})
        throw ShapeError("final output " + shape_string(current) + " does not match class count " +
                         std::to_string(model.num_classes));
    return shapes;
}

// ---------------------------------------------------------------------------
// Layer kernels on batched tensors.

inline Tensor fc_forward(const FullyConnected& fc, const Tensor& x) {
    const std::size_t b = x.batch();
    const std::size_t din = fc.in_features();
    const std::size_t dout = fc.out_features();
    Tensor y({b, dout});
    for (std::size_t s = 0; s < b; ++s) {
        double* ys = y.data() + s * dout;
        std::copy(fc.bias.begin(), fc.bias.end(), ys);
        const double* xs = x.data() + s * din;
        for (std::size_t i = 0; i < din; ++i) {
            const double xi = xs[i];
            if (xi == 0.0) continue;
            const double* wi = fc.weight.row(i).data();
            for (std::size_t j = 0; j < dout; ++j) ys[j] += xi * wi[j];
        }
    }
    return y;
}

// Direct-loop 2-D convolution with zero padding.
inline Tensor conv_forward(const Conv2d& conv, const Tensor& x) {
    const std::size_t b = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t cout = conv.out_channels(), kh = conv.kernel_h(), kw = conv.kernel_w();
    const std::size_t stride = conv.stride;
    const auto pad = static_cast<std::ptrdiff_t>(conv.padding);
    const std::size_t ho = detail::conv_extent(h, kh, stride, conv.padding);
    const std::size_t wo = detail::conv_extent(w, kw, stride, conv.padding);
    Tensor y({b, cout, ho, wo});
    for (std::size_t s = 0; s < b; ++s) {
        for (std::size_t o = 0; o < cout; ++o) {
            double* out = &y.at4(s, o, 0, 0);
            std::fill(out, out + ho * wo, conv.bias[o]);
            for (std::size_t c = 0; c < cin; ++c) {
                const double* in = x.data() + (s * cin + c) * h * w;
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const double wv = conv.weight.at4(o, c, ky, kx);
                        if (wv == 0.0) continue;
                        for (std::size_t oy = 0; oy < ho; ++oy) {
                            const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - pad;
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                            const double* in_row = in + static_cast<std::size_t>(iy) * w;
                            double* out_row = out + oy * wo;
                            for (std::size_t ox = 0; ox < wo; ++ox) {
                                const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - pad;
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                                out_row[ox] += wv * in_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    return y;
}

template <bool IsMax>
inline Tensor pool_forward(std::size_t size, std::size_t stride, const Tensor& x) {
    const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t ho = detail::pooled_extent(h, size, stride);
    const std::size_t wo = detail::pooled_extent(w, size, stride);
    Tensor y({b, c, ho, wo});
    const double inv = 1.0 / static_cast<double>(size * size);
    for (std::size_t s = 0; s < b; ++s)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t oy = 0; oy < ho; ++oy)
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    double acc = IsMax ? -std::numeric_limits<double>::infinity() : 0.0;
                    for (std::size_t dy = 0; dy < size; ++dy)
                        for (std::size_t dx = 0; dx < size; ++dx) {
                            const double v = x.at4(s, ch, oy * stride + dy, ox * stride + dx);
                            if constexpr (IsMax) acc = std::max(acc, v);
                            else acc += v;
                        }
                    y.at4(s, ch, oy, ox) = IsMax ? acc : acc * inv;
                }
    return y;
}

inline Tensor relu_forward(Tensor x) {
    for (double& v : x.values()) v = v > 0.0 ? v : 0.0;
    return x;
}

inline Tensor batchnorm_forward(const BatchNorm& bn, Tensor x) {
    const std::size_t c = x.dim(1);
    const std::size_t inner = x.sample_size() / c;
    for (std::size_t s = 0; s < x.batch(); ++s)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double scale = bn.gamma[ch] / std::sqrt(bn.var[ch] + bn.eps);
            const double shift = bn.beta[ch] - bn.mean[ch] * scale;
            double* p = x.data() + (s * c + ch) * inner;
            for (std::size_t i = 0; i < inner; ++i) p[i] = p[i] * scale + shift;
        }
    return x;
}

// Applies a non-marker layer to a batch.
inline Tensor apply_layer(const Layer& layer, const Tensor& x) {
    return std::visit(
        [&](const auto& l) -> Tensor {
            using L = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<L, FullyConnected>) return fc_forward(l, x);
            else if constexpr (std::is_same_v<L, Conv2d>) return conv_forward(l, x);
            else if constexpr (std::is_same_v<L, MaxPool2d>) return pool_forward<true>(l.size, l.stride, x);
            else if constexpr (std::is_same_v<L, AvgPool2d>) return pool_forward<false>(l.size, l.stride, x);
            else if constexpr (std::is_same_v<L, Flatten>) return x.reshaped({x.batch(), x.sample_size()});
            else if constexpr (std::is_same_v<L, ReLU>) return relu_forward(x);
            else if constexpr (std::is_same_v<L, BatchNorm>) return batchnorm_forward(l, x);
            else return x;
        },
        layer);
}

namespace detail {

inline void check_input(const Model& model, const Tensor& x) {
    Shape expected{x.batch()};
    expected.insert(expected.end(), model.input_shape.begin(), model.input_shape.end());
    if (x.shape() != expected)
        throw ShapeError("input " + shape_string(x.shape()) + " does not match model input " +
                         shape_string(model.input_shape) + " with a leading batch dimension");
    if (x.batch() == 0) throw ShapeError("empty batch");
}

}  // namespace detail

// Activation after layer `upto_layer` (inclusive).
inline Tensor forward_prefix(const Model& model, const Tensor& x, std::size_t upto_layer) {
    if (upto_layer >= model.layers.size())
        throw InvalidInput("forward_prefix: layer index " + std::to_string(upto_layer) + " out of range");
    validate_model(model);
    detail::check_input(model, x);
    Tensor current = x;
    std::vector<std::pair<int, Tensor>> saved;
    for (std::size_t i = 0; i <= upto_layer; ++i) {
        const Layer& layer = model.layers[i];
        if (const auto* s = std::get_if<ResidualBlockStart>(&layer)) {
            saved.emplace_back(s->id, current);
        } else if (std::holds_alternative<ResidualBlockEnd>(layer)) {
            const Tensor& skip = saved.back().second;
            for (std::size_t j = 0; j < current.size(); ++j) current[j] += skip[j];
            saved.pop_back();
        } else {
            current = apply_layer(layer, current);
        }
    }
    return current;
}

inline Tensor forward(const Model& model, const Tensor& x) {
    if (model.layers.empty()) {
        detail::check_input(model, x);
        return x;
    }
    return forward_prefix(model, x, model.layers.size() - 1);
}

// Rows are (batch, y, x) positions, columns are channels.
inline Matrix reshape_channels(const Tensor& z) {
    if (z.rank() != 4) throw ShapeError("reshape_channels expects a 4-D tensor, got " + shape_string(z.shape()));
    const std::size_t b = z.dim(0), c = z.dim(1), h = z.dim(2), w = z.dim(3);
    Matrix m(b * h * w, c);
    for (std::size_t s = 0; s < b; ++s)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double* src = z.data() + (s * c + ch) * h * w;
            for (std::size_t p = 0; p < h * w; ++p) m(s * h * w + p, ch) = src[p];
        }
    return m;
}

// Inverse of reshape_channels.
inline Tensor unreshape_channels(const Matrix& m, std::size_t batch, std::size_t h, std::size_t w) {
    if (m.rows() != batch * h * w) throw ShapeError("unreshape_channels: row count mismatch");
    const std::size_t c = m.cols();
    Tensor z({batch, c, h, w});
    for (std::size_t s = 0; s < batch; ++s)
        for (std::size_t ch = 0; ch < c; ++ch) {
            double* dst = &z.at4(s, ch, 0, 0);
            for (std::size_t p = 0; p < h * w; ++p) dst[p] = m(s * h * w + p, ch);
        }
    return z;
}

// ---------------------------------------------------------------------------
// FLOPs: one multiply-add counts as 2; pooling, activations, normalization,
// flatten and residual additions count as 0. Per sample.

struct FlopsReport {
    std::vector<std::pair<std::size_t, std::uint64_t>> per_layer;
    std::uint64_t total = 0;
};

inline FlopsReport count_flops(const Model& model, const Shape& input_shape) {
    Model probe = model;
    probe.input_shape = input_shape;
    probe.num_classes = 0;
    FlopsReport report;
    if (model.layers.empty()) return report;
    const auto shapes = validate_model(probe);
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        std::uint64_t f = 0;
        if (const auto* fc = std::get_if<FullyConnected>(&model.layers[i])) {
            f = 2ULL * fc->in_features() * fc->out_features();
        } else if (const auto* conv = std::get_if<Conv2d>(&model.layers[i])) {
            const Shape& out = shapes[i];
            f = 2ULL * conv->kernel_h() * conv->kernel_w() * conv->in_channels() * conv->out_channels() *
                out[1] * out[2];
        } else {
            continue;
        }
        report.per_layer.emplace_back(i, f);
        report.total += f;
    }
    return report;
}

inline FlopsReport count_flops(const Model& model) { return count_flops(model, model.input_shape); }

// 1 - pruned / original.
inline double flops_reduction(std::uint64_t original, std::uint64_t pruned) {
    if (original == 0) return 0.0;
    return 1.0 - static_cast<double>(pruned) / static_cast<double>(original);
}

// ---------------------------------------------------------------------------

// Folds every BatchNorm into the FC or Conv2d layer right before it.
inline Model absorb_batchnorm(const Model& model) {
    validate_model(model);
    Model out = model;
    out.layers.clear();
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const auto* bn = std::get_if<BatchNorm>(&model.layers[i]);
        if (!bn) {
            out.layers.push_back(model.layers[i]);
            continue;
        }
        if (out.layers.empty() || !is_weighted(out.layers.back()) || !is_weighted(model.layers[i - 1]))
            throw StructuralError("batch norm at layer " + std::to_string(i) +
                                  " does not follow a fully connected or convolution layer");
        Layer& prev = out.layers.back();
        const std::size_t width = layer_width(prev);
        for (std::size_t c = 0; c < width; ++c) {
            const double scale = bn->gamma[c] / std::sqrt(bn->var[c] + bn->eps);
            if (auto* fc = std::get_if<FullyConnected>(&prev)) {
                for (std::size_t r = 0; r < fc->in_features(); ++r) fc->weight(r, c) *= scale;
                fc->bias[c] = (fc->bias[c] - bn->mean[c]) * scale + bn->beta[c];
            } else {
                auto& conv = std::get<Conv2d>(prev);
                const std::size_t per = conv.weight.size() / conv.out_channels();
                double* wc = conv.weight.data() + c * per;
                for (std::size_t k = 0; k < per; ++k) wc[k] *= scale;
                conv.bias[c] = (conv.bias[c] - bn->mean[c]) * scale + bn->beta[c];
            }
        }
    }
    return out;
}

inline bool has_batchnorm(const Model& model) {
    return std::any_of(model.layers.begin(), model.layers.end(),
                       [](const Layer& l) { return std::holds_alternative<BatchNorm>(l); });
}

}  // namespace idprune
