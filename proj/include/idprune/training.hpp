#pragma once

// Mini-batch SGD with per-epoch learning-rate decay, backprop for the layer
// set in nn.hpp, and evaluation. Everything runs in double precision on one
// thread, so a (model, data, config) triple always yields the same bits.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "idprune/data.hpp"
#include "idprune/error.hpp"
#include "idprune/format.hpp"
#include "idprune/nn.hpp"
#include "idprune/rng.hpp"

namespace idprune {

enum class Loss { cross_entropy, mse };

inline std::string loss_name(Loss l) { return l == Loss::cross_entropy ? "cross_entropy" : "mse"; }

inline Loss parse_loss(const std::string& s) {
    if (s == "cross_entropy") return Loss::cross_entropy;
    if (s == "mse") return Loss::mse;
    throw InvalidInput("unknown loss '" + s + "' (expected cross_entropy or mse)");
}

struct TrainConfig {
    std::size_t epochs = 50;
    std::size_t batch_size = 64;
    double lr = 0.3;
    double lr_decay = 0.9;  // lr for epoch e is lr * lr_decay^e
    Loss loss = Loss::cross_entropy;
    std::uint64_t seed = 0;
    double init_scale = 1.0;  // init std = init_scale / sqrt(fan_in)
    double momentum = 0.0;

    void validate() const {
        if (batch_size == 0) throw InvalidInput("batch_size must be >= 1");
        if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw InvalidInput("lr_decay must lie in (0, 1]");
        if (!(lr > 0.0) || !std::isfinite(lr)) throw InvalidInput("lr must be positive");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidInput("momentum must lie in [0, 1)");
        if (!(init_scale > 0.0)) throw InvalidInput("init_scale must be positive");
    }
};

// Train metrics are accumulated over the epoch's mini-batches before each
// update; eval metrics are NaN when no evaluation set was given. Accuracy is
// NaN for regression targets.
struct EpochStats {
    std::size_t epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double train_accuracy = 0.0;
    double eval_loss = std::numeric_limits<double>::quiet_NaN();
    double eval_accuracy = std::numeric_limits<double>::quiet_NaN();
};

struct TrainLog {
    std::string phase = "train";
    std::vector<EpochStats> epochs;

    std::string to_csv() const {
        std::string out = "phase,epoch,lr,train_loss,train_accuracy,eval_loss,eval_accuracy\n";
        for (const auto& e : epochs)
            out += phase + "," + std::to_string(e.epoch) + "," + format_double(e.lr) + "," +
                   format_double(e.train_loss) + "," + format_double(e.train_accuracy) + "," +
                   format_double(e.eval_loss) + "," + format_double(e.eval_accuracy) + "\n";
        return out;
    }
};

struct TrainResult {
    Model model;
    TrainLog log;
};

struct EvalResult {
    double loss = 0.0;
    double accuracy = std::numeric_limits<double>::quiet_NaN();
};

// Gaussian weights with std init_scale / sqrt(fan_in), zero biases.
inline void initialize_parameters(Model& model, double init_scale, Rng& rng) {
    for (Layer& layer : model.layers) {
        if (auto* fc = std::get_if<FullyConnected>(&layer)) {
            const double s = init_scale / std::sqrt(static_cast<double>(fc->in_features()));
            for (double& v : fc->weight.values()) v = s * rng.normal();
            std::fill(fc->bias.begin(), fc->bias.end(), 0.0);
        } else if (auto* conv = std::get_if<Conv2d>(&layer)) {
            const double fan_in = static_cast<double>(conv->in_channels() * conv->kernel_h() * conv->kernel_w());
            const double s = init_scale / std::sqrt(fan_in);
            for (double& v : conv->weight.values()) v = s * rng.normal();
            std::fill(conv->bias.begin(), conv->bias.end(), 0.0);
        }
    }
}

// ---------------------------------------------------------------------------
// Backprop.

// Gradient of the loss with respect to one layer's parameters; empty for
// layers without trainable parameters (batch norm is treated as a fixed
// affine map).
struct ParamGrad {
    std::vector<double> weight;
    std::vector<double> bias;
};

struct Gradients {
    double loss = 0.0;
    std::vector<ParamGrad> layers;
    Tensor input;  // d loss / d x
    Tensor output;  // network output for the batch
};

// Batch targets: class labels or a regression matrix.
struct TargetView {
    std::span<const int> labels;
    const Matrix* targets = nullptr;
    std::size_t offset = 0;  // first target row (regression) of this batch

    double target(std::size_t sample, std::size_t j) const {
        if (targets) return (*targets)(offset + sample, j);
        return labels[sample] == static_cast<int>(j) ? 1.0 : 0.0;
    }
};

namespace detail {

// Returns mean loss over the batch and fills d loss / d output.
inline double loss_and_grad(const Tensor& y, const TargetView& t, Loss loss, Tensor& grad) {
    const std::size_t b = y.batch(), k = y.sample_size();
    grad = Tensor(y.shape());
    const double inv_b = 1.0 / static_cast<double>(b);
    double total = 0.0;
    for (std::size_t s = 0; s < b; ++s) {
        const double* ys = y.data() + s * k;
        double* gs = grad.data() + s * k;
        if (loss == Loss::cross_entropy) {
            if (t.targets) throw InvalidInput("cross-entropy needs class labels");
            const int label = t.labels[s];
            if (label < 0 || static_cast<std::size_t>(label) >= k)
                throw InvalidInput("label " + std::to_string(label) + " outside the " + std::to_string(k) +
                                   " model outputs");
            const double mx = *std::max_element(ys, ys + k);
            double z = 0.0;
            for (std::size_t j = 0; j < k; ++j) z += std::exp(ys[j] - mx);
            const double log_z = mx + std::log(z);
            total += log_z - ys[label];
            for (std::size_t j = 0; j < k; ++j)
                gs[j] = (std::exp(ys[j] - log_z) - (static_cast<int>(j) == label ? 1.0 : 0.0)) * inv_b;
        } else {
            for (std::size_t j = 0; j < k; ++j) {
                const double r = ys[j] - t.target(s, j);
                total += r * r;
                gs[j] = 2.0 * r * inv_b;
            }
        }
    }
    return total * inv_b;
}

inline std::size_t argmax_row(const double* p, std::size_t k) {
    return static_cast<std::size_t>(std::max_element(p, p + k) - p);
}

inline Tensor fc_backward(const FullyConnected& fc, const Tensor& x, const Tensor& g, ParamGrad& pg) {
    const std::size_t b = x.batch(), din = fc.in_features(), dout = fc.out_features();
    pg.weight.assign(din * dout, 0.0);
    pg.bias.assign(dout, 0.0);
    Tensor dx({b, din});
    for (std::size_t s = 0; s < b; ++s) {
        const double* xs = x.data() + s * din;
        const double* gs = g.data() + s * dout;
        double* dxs = dx.data() + s * din;
        for (std::size_t j = 0; j < dout; ++j) pg.bias[j] += gs[j];
        for (std::size_t i = 0; i < din; ++i) {
            const double* wi = fc.weight.row(i).data();
            double* gw = pg.weight.data() + i * dout;
            const double xi = xs[i];
            double acc = 0.0;
            for (std::size_t j = 0; j < dout; ++j) {
                gw[j] += xi * gs[j];
                acc += wi[j] * gs[j];
            }
            dxs[i] = acc;
        }
    }
    return dx;
}

inline Tensor conv_backward(const Conv2d& conv, const Tensor& x, const Tensor& g, ParamGrad& pg) {
    const std::size_t b = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t cout = conv.out_channels(), kh = conv.kernel_h(), kw = conv.kernel_w();
    const std::size_t ho = g.dim(2), wo = g.dim(3);
    const std::size_t stride = conv.stride;
    const auto pad = static_cast<std::ptrdiff_t>(conv.padding);
    pg.weight.assign(conv.weight.size(), 0.0);
    pg.bias.assign(cout, 0.0);
    Tensor dx(x.shape());
    for (std::size_t s = 0; s < b; ++s) {
        for (std::size_t o = 0; o < cout; ++o) {
            const double* go = g.data() + (s * cout + o) * ho * wo;
            for (std::size_t p = 0; p < ho * wo; ++p) pg.bias[o] += go[p];
            for (std::size_t c = 0; c < cin; ++c) {
                const double* in = x.data() + (s * cin + c) * h * w;
                double* din = dx.data() + (s * cin + c) * h * w;
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const std::size_t widx = ((o * cin + c) * kh + ky) * kw + kx;
                        const double wv = conv.weight[widx];
                        double gw = 0.0;
                        for (std::size_t oy = 0; oy < ho; ++oy) {
                            const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - pad;
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                            const std::size_t row = static_cast<std::size_t>(iy) * w;
                            for (std::size_t ox = 0; ox < wo; ++ox) {
                                const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - pad;
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                                const double gv = go[oy * wo + ox];
                                gw += gv * in[row + static_cast<std::size_t>(ix)];
                                din[row + static_cast<std::size_t>(ix)] += wv * gv;
                            }
                        }
                        pg.weight[widx] += gw;
                    }
                }
            }
        }
    }
    return dx;
}

template <bool IsMax>
inline Tensor pool_backward(std::size_t size, std::size_t stride, const Tensor& x, const Tensor& g) {
    const std::size_t b = x.dim(0), c = x.dim(1);
    const std::size_t ho = g.dim(2), wo = g.dim(3);
    const double inv = 1.0 / static_cast<double>(size * size);
    Tensor dx(x.shape());
    for (std::size_t s = 0; s < b; ++s)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t oy = 0; oy < ho; ++oy)
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    const double gv = g.at4(s, ch, oy, ox);
                    if constexpr (IsMax) {
                        // First maximal entry in scan order, as in the forward pass.
                        std::size_t by = oy * stride, bx = ox * stride;
                        double best = x.at4(s, ch, by, bx);
                        for (std::size_t dy = 0; dy < size; ++dy)
                            for (std::size_t dxi = 0; dxi < size; ++dxi) {
                                const double v = x.at4(s, ch, oy * stride + dy, ox * stride + dxi);
                                if (v > best) {
                                    best = v;
                                    by = oy * stride + dy;
                                    bx = ox * stride + dxi;
                                }
                            }
                        dx.at4(s, ch, by, bx) += gv;
                    } else {
                        for (std::size_t dy = 0; dy < size; ++dy)
                            for (std::size_t dxi = 0; dxi < size; ++dxi)
                                dx.at4(s, ch, oy * stride + dy, ox * stride + dxi) += gv * inv;
                    }
                }
    return dx;
}

inline Tensor batchnorm_backward(const BatchNorm& bn, const Tensor& g) {
    Tensor dx = g;
    const std::size_t c = g.dim(1);
    const std::size_t inner = g.sample_size() / c;
    for (std::size_t s = 0; s < g.batch(); ++s)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double scale = bn.gamma[ch] / std::sqrt(bn.var[ch] + bn.eps);
            double* p = dx.data() + (s * c + ch) * inner;
            for (std::size_t i = 0; i < inner; ++i) p[i] *= scale;
        }
    return dx;
}

}  // namespace detail

// Mean loss of the batch and its gradient with respect to every parameter.
inline Gradients compute_gradients(const Model& model, const Tensor& x, const TargetView& t, Loss loss) {
    validate_model(model);
    const std::size_t n = model.layers.size();
    // acts[i] is the input of layer i; acts[n] the network output.
    std::vector<Tensor> acts;
    acts.reserve(n + 1);
    acts.push_back(x);
    std::vector<Tensor> saved;
    for (const Layer& layer : model.layers) {
        const Tensor& cur = acts.back();
        if (std::holds_alternative<ResidualBlockStart>(layer)) {
            saved.push_back(cur);
            acts.push_back(cur);
        } else if (std::holds_alternative<ResidualBlockEnd>(layer)) {
            Tensor sum = cur;
            const Tensor& skip = saved.back();
            for (std::size_t j = 0; j < sum.size(); ++j) sum[j] += skip[j];
            saved.pop_back();
            acts.push_back(std::move(sum));
        } else {
            acts.push_back(apply_layer(layer, cur));
        }
    }

    Gradients out;
    out.layers.resize(n);
    out.output = acts.back();
    Tensor g;
    out.loss = detail::loss_and_grad(acts.back(), t, loss, g);

    std::vector<Tensor> skip_grads;
    for (std::size_t i = n; i-- > 0;) {
        const Layer& layer = model.layers[i];
        const Tensor& in = acts[i];
        std::visit(
            [&](const auto& l) {
                using L = std::decay_t<decltype(l)>;
                if constexpr (std::is_same_v<L, FullyConnected>) g = detail::fc_backward(l, in, g, out.layers[i]);
                else if constexpr (std::is_same_v<L, Conv2d>) g = detail::conv_backward(l, in, g, out.layers[i]);
                else if constexpr (std::is_same_v<L, MaxPool2d>) g = detail::pool_backward<true>(l.size, l.stride, in, g);
                else if constexpr (std::is_same_v<L, AvgPool2d>) g = detail::pool_backward<false>(l.size, l.stride, in, g);
                else if constexpr (std::is_same_v<L, Flatten>) g = g.reshaped(in.shape());
                else if constexpr (std::is_same_v<L, ReLU>) {
                    for (std::size_t j = 0; j < g.size(); ++j)
                        if (!(in[j] > 0.0)) g[j] = 0.0;
                } else if constexpr (std::is_same_v<L, BatchNorm>) g = detail::batchnorm_backward(l, g);
                else if constexpr (std::is_same_v<L, ResidualBlockEnd>) skip_grads.push_back(g);
                else if constexpr (std::is_same_v<L, ResidualBlockStart>) {
                    const Tensor& sg = skip_grads.back();
                    for (std::size_t j = 0; j < g.size(); ++j) g[j] += sg[j];
                    skip_grads.pop_back();
                }
            },
            layer);
    }
    out.input = std::move(g);
    return out;
}

// ---------------------------------------------------------------------------
// Parameter access shared by the optimizer and gradient checks.

inline std::span<double> weight_values(Layer& layer) {
    if (auto* fc = std::get_if<FullyConnected>(&layer)) return fc->weight.values();
    if (auto* conv = std::get_if<Conv2d>(&layer)) return conv->weight.values();
    return {};
}

inline std::span<double> bias_values(Layer& layer) {
    if (auto* fc = std::get_if<FullyConnected>(&layer)) return fc->bias;
    if (auto* conv = std::get_if<Conv2d>(&layer)) return conv->bias;
    return {};
}

namespace detail {

inline void check_dataset(const Model& model, const LabeledDataset& data, Loss loss) {
    data.validate();
    if (data.size() == 0) throw InvalidInput("dataset is empty");
    Shape expected{data.size()};
    expected.insert(expected.end(), model.input_shape.begin(), model.input_shape.end());
    if (data.inputs.shape() != expected)
        throw ShapeError("dataset inputs " + shape_string(data.inputs.shape()) + " do not match model input " +
                         shape_string(model.input_shape));
    if (loss == Loss::cross_entropy && data.is_regression())
        throw InvalidInput("cross-entropy loss needs a labelled classification dataset");
}

inline TargetView batch_targets(const LabeledDataset& data, std::span<const int> labels, std::size_t offset) {
    TargetView t;
    if (data.is_regression()) {
        t.targets = &data.targets;
        t.offset = offset;
    } else {
        t.labels = labels;
    }
    return t;
}

inline std::size_t count_correct(const Tensor& y, std::span<const int> labels) {
    const std::size_t k = y.sample_size();
    std::size_t correct = 0;
    for (std::size_t s = 0; s < y.batch(); ++s)
        if (static_cast<int>(argmax_row(y.data() + s * k, k)) == labels[s]) ++correct;
    return correct;
}

}  // namespace detail

// Mean loss and top-1 accuracy (NaN for regression data).
inline EvalResult evaluate(const Model& model, const LabeledDataset& data, Loss loss,
                           std::size_t chunk = 512) {
    detail::check_dataset(model, data, loss);
    const std::size_t n = data.size();
    double total = 0.0;
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < n; begin += chunk) {
        const std::size_t count = std::min(chunk, n - begin);
        const Tensor y = forward(model, data.inputs.slice_batch(begin, count));
        const std::span<const int> labels =
            data.is_regression() ? std::span<const int>{} : std::span<const int>(data.labels).subspan(begin, count);
        Tensor unused;
        total += detail::loss_and_grad(y, detail::batch_targets(data, labels, begin), loss, unused) *
                 static_cast<double>(count);
        if (!data.is_regression()) correct += detail::count_correct(y, labels);
    }
    EvalResult r;
    r.loss = total / static_cast<double>(n);
    if (!data.is_regression()) r.accuracy = static_cast<double>(correct) / static_cast<double>(n);
    return r;
}

// Plain SGD (optionally with momentum) from the model's current parameters.
inline TrainResult train(const Model& model, const LabeledDataset& data, const TrainConfig& config,
                         const LabeledDataset* eval = nullptr, const std::string& phase = "train") {
    config.validate();
    detail::check_dataset(model, data, config.loss);
    if (eval) detail::check_dataset(model, *eval, config.loss);

    TrainResult result{model, {phase, {}}};
    Model& m = result.model;
    Rng rng(config.seed);
    const std::size_t n = data.size();
    std::vector<std::vector<double>> vel_w(m.layers.size()), vel_b(m.layers.size());
    LabeledDataset batch_holder;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const double lr = config.lr * std::pow(config.lr_decay, static_cast<double>(epoch));
        const std::vector<std::size_t> order = rng.permutation(n);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t begin = 0; begin < n; begin += config.batch_size) {
            const std::size_t count = std::min(config.batch_size, n - begin);
            const std::span<const std::size_t> idx(order.data() + begin, count);
            batch_holder = data.subset(idx);
            const TargetView t = detail::batch_targets(batch_holder, batch_holder.labels, 0);
            const Gradients grads = compute_gradients(m, batch_holder.inputs, t, config.loss);
            if (!std::isfinite(grads.loss))
                throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch starting at " +
                                    std::to_string(begin) + " (lr " + format_double(lr) + ")");
            loss_sum += grads.loss * static_cast<double>(count);
            if (!data.is_regression()) correct += detail::count_correct(grads.output, batch_holder.labels);

            for (std::size_t i = 0; i < m.layers.size(); ++i) {
                const ParamGrad& pg = grads.layers[i];
                if (pg.weight.empty()) continue;
                auto step = [&](std::span<double> p, const std::vector<double>& gr, std::vector<double>& vel) {
                    if (config.momentum > 0.0) {
                        if (vel.empty()) vel.assign(p.size(), 0.0);
                        for (std::size_t j = 0; j < p.size(); ++j) {
                            vel[j] = config.momentum * vel[j] + gr[j];
                            p[j] -= lr * vel[j];
                        }
                    } else {
                        for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr * gr[j];
                    }
                };
                step(weight_values(m.layers[i]), pg.weight, vel_w[i]);
                step(bias_values(m.layers[i]), pg.bias, vel_b[i]);
            }
        }
        EpochStats st;
        st.epoch = epoch;
        st.lr = lr;
        st.train_loss = loss_sum / static_cast<double>(n);
        st.train_accuracy = data.is_regression() ? std::numeric_limits<double>::quiet_NaN()
                                                 : static_cast<double>(correct) / static_cast<double>(n);
        if (eval) {
            const EvalResult er = evaluate(m, *eval, config.loss);
            st.eval_loss = er.loss;
            st.eval_accuracy = er.accuracy;
        }
        result.log.epochs.push_back(st);
    }
    return result;
}

// Training of an already pruned model; reported under its own phase name.
inline TrainResult fine_tune(const Model& pruned, const LabeledDataset& data, const TrainConfig& config,
                             const LabeledDataset* eval = nullptr) {
    return train(pruned, data, config, eval, "fine_tune");
}

}  // namespace idprune
