#pragma once

// Structured pruning by interpolative decomposition of layer activations.
//
// For a layer with post-activation outputs Z (samples x neurons) the ID
// Z ~= Z(:, I) T keeps the neurons in I and folds T into the successor's
// incoming weights. The multi-layer driver always takes Z from the original
// model and carries T forward through flatten layers as T (x) I.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "idprune/data.hpp"
#include "idprune/error.hpp"
#include "idprune/format.hpp"
#include "idprune/linalg.hpp"
#include "idprune/nn.hpp"

namespace idprune {

// ---------------------------------------------------------------------------
// Index selection on one activation matrix.

struct LayerSelection {
    Interpolation id;
    bool clamped = false;     // requested k exceeded the rank bound min(samples, width)
    bool unprunable = false;  // epsilon mode needed the full width
};

namespace detail {

// Indices ascending, rows of T permuted to match.
inline void sort_selection(Interpolation& id) {
    std::vector<std::size_t> order(id.indices.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return id.indices[a] < id.indices[b]; });
    std::vector<std::size_t> idx;
    std::vector<std::size_t> rows;
    for (std::size_t o : order) {
        idx.push_back(id.indices[o]);
        rows.push_back(o);
    }
    id.indices = std::move(idx);
    id.t = id.t.select_rows(rows);
}

inline Interpolation selection_matrix(std::vector<std::size_t> indices, std::size_t width) {
    std::sort(indices.begin(), indices.end());
    Interpolation id;
    id.t = Matrix(indices.size(), width);
    for (std::size_t r = 0; r < indices.size(); ++r) id.t(r, indices[r]) = 1.0;
    id.indices = std::move(indices);
    return id;
}

inline Interpolation identity_selection(std::size_t width) {
    std::vector<std::size_t> all(width);
    std::iota(all.begin(), all.end(), std::size_t{0});
    Interpolation id = selection_matrix(std::move(all), width);
    id.certified = true;
    return id;
}

}  // namespace detail

// ID of an activation matrix whose columns are neurons or channels.
inline LayerSelection id_select(const Matrix& act, const RankCriterion& criterion,
                                RankDeficiencyPolicy policy = RankDeficiencyPolicy::truncate) {
    criterion.validate();
    if (act.empty()) throw InvalidInput("id_select: empty activation matrix");
    const std::size_t m = act.cols();
    const std::size_t bound = std::min(act.rows(), m);
    LayerSelection out;
    const bool fixed = criterion.mode == RankCriterion::Mode::fixed_rank;

    if (fixed && criterion.rank >= m) {
        out.clamped = criterion.rank > m;
        out.id = detail::identity_selection(m);
        return out;
    }
    if (act.max_abs() == 0.0) {
        // Dead layer: any selection reproduces it exactly.
        std::vector<std::size_t> first(fixed ? criterion.rank : 1);
        std::iota(first.begin(), first.end(), std::size_t{0});
        out.id = detail::selection_matrix(std::move(first), m);
        out.id.certified = true;
        return out;
    }
    RankCriterion c = criterion;
    if (fixed && c.rank > bound) {
        c.rank = bound;
        out.clamped = true;
    }
    out.id = interpolative_decomposition(act, c, policy);
    if (out.id.indices.size() == m) {
        out.id = detail::identity_selection(m);
        out.unprunable = !fixed;
        return out;
    }
    detail::sort_selection(out.id);
    return out;
}

// ---------------------------------------------------------------------------
// Weight surgery.

// Rows of the FC weight (inputs) mixed by t: W <- t W.
inline FullyConnected fold_inputs(const FullyConnected& fc, const Matrix& t) {
    if (t.cols() != fc.in_features())
        throw StructuralError("interpolation has " + std::to_string(t.cols()) + " columns but the layer takes " +
                              std::to_string(fc.in_features()) + " inputs");
    return FullyConnected{matmul(t, fc.weight), fc.bias};
}

// Input channels of the conv weight mixed by t:
// W'[o, i', ...] = sum_i t[i', i] W[o, i, ...].
inline Conv2d fold_inputs(const Conv2d& conv, const Matrix& t) {
    const std::size_t cin = conv.in_channels();
    if (t.cols() != cin)
        throw StructuralError("interpolation has " + std::to_string(t.cols()) + " columns but the convolution has " +
                              std::to_string(cin) + " input channels");
    const std::size_t cout = conv.out_channels(), k = t.rows();
    const std::size_t s = conv.kernel_h() * conv.kernel_w();
    Conv2d out = conv;
    out.weight = Tensor({cout, k, conv.kernel_h(), conv.kernel_w()});
    for (std::size_t o = 0; o < cout; ++o) {
        const Matrix wo(cin, s, std::vector<double>(conv.weight.data() + o * cin * s, conv.weight.data() + (o + 1) * cin * s));
        const Matrix folded = matmul(t, wo);
        std::copy(folded.storage().begin(), folded.storage().end(), out.weight.data() + o * k * s);
    }
    return out;
}

inline FullyConnected select_outputs(const FullyConnected& fc, std::span<const std::size_t> idx) {
    FullyConnected out{fc.weight.select_columns(idx), {}};
    for (std::size_t i : idx) out.bias.push_back(fc.bias.at(i));
    return out;
}

inline Conv2d select_outputs(const Conv2d& conv, std::span<const std::size_t> idx) {
    const std::size_t per = conv.weight.size() / conv.out_channels();
    Conv2d out = conv;
    Shape s = conv.weight.shape();
    s[0] = idx.size();
    std::vector<double> w;
    w.reserve(idx.size() * per);
    out.bias.clear();
    for (std::size_t i : idx) {
        w.insert(w.end(), conv.weight.data() + i * per, conv.weight.data() + (i + 1) * per);
        out.bias.push_back(conv.bias.at(i));
    }
    out.weight = Tensor(std::move(s), std::move(w));
    return out;
}

// T (x) I_s: carries a channel interpolation through a channel-major flatten.
inline Matrix expand_flatten(const Matrix& t, std::size_t spatial_size) {
    if (spatial_size == 0) throw InvalidInput("expand_flatten: spatial size must be positive");
    return kron_identity(t, spatial_size);
}

// ---------------------------------------------------------------------------
// Single-pair primitives.

struct FcPairResult {
    FullyConnected layer;
    FullyConnected next;
    LayerSelection selection;
};

// `z` holds the layer's post-activation outputs on the pruning set
// (samples x neurons). The successor bias is left unchanged.
inline FcPairResult prune_fc_pair(const FullyConnected& layer, const FullyConnected& next, const Matrix& z,
                                  const RankCriterion& criterion,
                                  RankDeficiencyPolicy policy = RankDeficiencyPolicy::truncate) {
    if (z.cols() != layer.out_features() || next.in_features() != layer.out_features())
        throw StructuralError("prune_fc_pair: layer widths do not line up");
    FcPairResult r;
    r.selection = id_select(z, criterion, policy);
    r.layer = select_outputs(layer, r.selection.id.indices);
    r.next = fold_inputs(next, r.selection.id.t);
    return r;
}

struct ConvPairResult {
    Conv2d layer;
    Conv2d next;
    LayerSelection selection;
};

// `z` is the layer's (activation and pooling) output on the pruning set.
inline ConvPairResult prune_conv_pair(const Conv2d& layer, const Conv2d& next, const Tensor& z,
                                      const RankCriterion& criterion,
                                      RankDeficiencyPolicy policy = RankDeficiencyPolicy::truncate) {
    if (next.in_channels() != layer.out_channels())
        throw StructuralError("prune_conv_pair: successor takes " + std::to_string(next.in_channels()) +
                              " channels, layer produces " + std::to_string(layer.out_channels()));
    if (z.rank() != 4 || z.dim(1) != layer.out_channels())
        throw ShapeError("prune_conv_pair: activation shape " + shape_string(z.shape()) + " does not match layer");
    ConvPairResult r;
    r.selection = id_select(reshape_channels(z), criterion, policy);
    r.layer = select_outputs(layer, r.selection.id.indices);
    r.next = fold_inputs(next, r.selection.id.t);
    return r;
}

// ---------------------------------------------------------------------------
// Multi-layer driver.

enum class PruneMethod { id, magnitude };

inline std::string method_name(PruneMethod m) { return m == PruneMethod::id ? "id" : "magnitude"; }

struct PruneConfig {
    enum class Mode { fraction, epsilon };

    Mode mode = Mode::fraction;
    double fraction = 0.5;  // alpha: k = ceil((1 - alpha) * width)
    std::map<std::size_t, double> layer_fractions;
    std::map<std::size_t, std::size_t> layer_ranks;  // explicit k, overrides both modes
    double epsilon = 0.1;
    bool certify = false;
    std::set<std::size_t> skip_layers;
    RankDeficiencyPolicy on_rank_deficiency = RankDeficiencyPolicy::truncate;

    void validate() const {
        auto check_fraction = [](double a) {
            if (!(a >= 0.0 && a < 1.0)) throw InvalidInput("pruning fraction must lie in [0, 1), got " + format_double(a));
        };
        check_fraction(fraction);
        for (const auto& [l, a] : layer_fractions) check_fraction(a);
        for (const auto& [l, k] : layer_ranks)
            if (k == 0) throw InvalidInput("explicit rank for layer " + std::to_string(l) + " must be >= 1");
        if (mode == Mode::epsilon && !(epsilon > 0.0 && epsilon < 1.0))
            throw InvalidInput("epsilon must lie in (0, 1), got " + format_double(epsilon));
    }
};

// Neurons kept by fraction alpha. The small slack keeps e.g. 0.7 * 10 from
// rounding up to 8.
inline std::size_t kept_width(std::size_t width, double alpha) {
    const double exact = (1.0 - alpha) * static_cast<double>(width);
    const auto k = static_cast<std::size_t>(std::ceil(exact - 1e-9 * static_cast<double>(width)));
    return std::clamp<std::size_t>(k, 1, width);
}

struct LayerReport {
    std::size_t layer = 0;
    std::string kind;
    std::size_t width_before = 0;
    std::size_t width_after = 0;
    std::optional<double> achieved_error;  // ID error estimate (||R22||_2 when certified)
    double t_norm = 1.0;
    bool skipped = false;
    std::string skip_reason;
    bool unprunable = false;
    bool clamped = false;
    bool rank_truncated = false;
    bool certified = false;
    std::vector<std::size_t> kept;
};

struct PruneReport {
    std::string method;
    std::vector<LayerReport> layers;
    std::uint64_t flops_before = 0;
    std::uint64_t flops_after = 0;
    std::size_t pruning_set_size = 0;
    nlohmann::json theory;  // null unless attached by the caller

    double flops_reduction() const { return idprune::flops_reduction(flops_before, flops_after); }

    const LayerReport& at(std::size_t layer) const {
        for (const auto& l : layers)
            if (l.layer == layer) return l;
        throw InvalidInput("no report entry for layer " + std::to_string(layer));
    }

    nlohmann::json to_json() const {
        nlohmann::json ls = nlohmann::json::array();
        for (const auto& l : layers) {
            ls.push_back({{"layer", l.layer},
                          {"kind", l.kind},
                          {"width_before", l.width_before},
                          {"width_after", l.width_after},
                          {"achieved_error", l.achieved_error ? nlohmann::json(*l.achieved_error) : nlohmann::json()},
                          {"t_norm", l.t_norm},
                          {"skipped", l.skipped},
                          {"skip_reason", l.skip_reason},
                          {"unprunable", l.unprunable},
                          {"clamped", l.clamped},
                          {"rank_truncated", l.rank_truncated},
                          {"certified", l.certified},
                          {"kept", l.kept}});
        }
        nlohmann::json j = {{"schema", "idprune.prune_report/1"},
                            {"method", method},
                            {"layers", ls},
                            {"flops_before", flops_before},
                            {"flops_after", flops_after},
                            {"flops_reduction", flops_reduction()},
                            {"pruning_set_size", pruning_set_size}};
        if (!theory.is_null()) j["theory"] = theory;
        return j;
    }

    std::string to_csv() const {
        std::string out =
            "layer,kind,width_before,width_after,achieved_error,t_norm,skipped,skip_reason,unprunable,clamped,"
            "rank_truncated,certified\n";
        auto b = [](bool v) { return std::string(v ? "1" : "0"); };
        for (const auto& l : layers)
            out += std::to_string(l.layer) + "," + l.kind + "," + std::to_string(l.width_before) + "," +
                   std::to_string(l.width_after) + "," + (l.achieved_error ? format_double(*l.achieved_error) : "") +
                   "," + format_double(l.t_norm) + "," + b(l.skipped) + "," + l.skip_reason + "," + b(l.unprunable) +
                   "," + b(l.clamped) + "," + b(l.rank_truncated) + "," + b(l.certified) + "\n";
        return out;
    }
};

struct PruneResult {
    Model model;
    PruneReport report;
};

namespace detail {

// Last layer of the unit formed by a weighted layer and the parameter-free
// channel-wise layers after it.
inline std::size_t group_end(const Model& model, std::size_t l) {
    std::size_t e = l;
    while (e + 1 < model.layers.size()) {
        const Layer& next = model.layers[e + 1];
        if (!(std::holds_alternative<ReLU>(next) || std::holds_alternative<MaxPool2d>(next) ||
              std::holds_alternative<AvgPool2d>(next)))
            break;
        ++e;
    }
    return e;
}

// Why a weighted layer must keep its width, or "" if it may be pruned.
inline std::string forced_skip_reason(const Model& model, std::size_t l, std::size_t last_weighted) {
    if (l == last_weighted) return "final layer";
    const std::size_t e = group_end(model, l);
    if (e + 1 < model.layers.size()) {
        const Layer& next = model.layers[e + 1];
        if (std::holds_alternative<ResidualBlockEnd>(next)) return "last layer of residual block";
        if (std::holds_alternative<ResidualBlockStart>(next)) return "feeds residual shortcut";
    }
    return "";
}

inline std::vector<double> magnitude_scores(const Layer& layer) {
    std::vector<double> s;
    if (const auto* fc = std::get_if<FullyConnected>(&layer)) {
        s.assign(fc->out_features(), 0.0);
        for (std::size_t i = 0; i < fc->in_features(); ++i)
            for (std::size_t j = 0; j < fc->out_features(); ++j) s[j] += std::abs(fc->weight(i, j));
        for (std::size_t j = 0; j < s.size(); ++j) s[j] += std::abs(fc->bias[j]);
    } else {
        const auto& conv = std::get<Conv2d>(layer);
        const std::size_t per = conv.weight.size() / conv.out_channels();
        s.assign(conv.out_channels(), 0.0);
        for (std::size_t o = 0; o < conv.out_channels(); ++o) {
            for (std::size_t p = 0; p < per; ++p) s[o] += std::abs(conv.weight[o * per + p]);
            s[o] += std::abs(conv.bias[o]);
        }
    }
    return s;
}

}  // namespace detail

// Largest-L1 neurons or channels (incoming weights plus bias); ties keep the
// lower index.
inline std::vector<std::size_t> magnitude_select(const Layer& layer, std::size_t k) {
    const std::vector<double> s = detail::magnitude_scores(layer);
    std::vector<std::size_t> order(s.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
    order.resize(std::min(k, order.size()));
    std::sort(order.begin(), order.end());
    return order;
}

// Prunes every eligible FC/Conv2d layer front to back. The input model is
// not modified.
inline PruneResult prune_model(const Model& model, const PruningSet& prune_set, const PruneConfig& config,
                               PruneMethod method = PruneMethod::id) {
    config.validate();
    validate_model(model);
    if (has_batchnorm(model))
        throw StructuralError("model contains batch norm layers; absorb them into the preceding layers first");
    if (prune_set.size() == 0) throw InvalidInput("pruning set is empty");
    detail::check_input(model, prune_set.inputs);

    const auto weighted = model.weighted_layers();
    if (weighted.empty()) throw InvalidInput("model has no prunable layers");
    for (std::size_t s : config.skip_layers)
        if (std::find(weighted.begin(), weighted.end(), s) == weighted.end())
            throw InvalidInput("skip layer " + std::to_string(s) + " is not a fully connected or convolution layer");
    for (const auto& [l, k] : config.layer_ranks)
        if (std::find(weighted.begin(), weighted.end(), l) == weighted.end())
            throw InvalidInput("explicit rank given for layer " + std::to_string(l) +
                               ", which is not a fully connected or convolution layer");
    if (method == PruneMethod::magnitude && config.mode == PruneConfig::Mode::epsilon)
        throw InvalidInput("magnitude pruning needs a fraction or explicit ranks, not an epsilon");

    const auto shapes = validate_model(model);
    PruneResult result;
    result.report.method = method_name(method);
    result.report.pruning_set_size = prune_set.size();
    Model& out = result.model;
    out = model;
    out.layers.clear();

    std::optional<Matrix> carry;  // interpolation still to be folded into the next weighted layer
    constexpr std::size_t none = static_cast<std::size_t>(-1);
    std::size_t pending = none;  // weighted layer awaiting its activations
    Tensor current = prune_set.inputs;  // original model's activation
    std::vector<Tensor> saved;

    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const Layer& layer = model.layers[i];
        if (std::holds_alternative<ResidualBlockStart>(layer)) {
            saved.push_back(current);
        } else if (std::holds_alternative<ResidualBlockEnd>(layer)) {
            for (std::size_t j = 0; j < current.size(); ++j) current[j] += saved.back()[j];
            saved.pop_back();
        } else {
            current = apply_layer(layer, current);
        }

        if (is_weighted(layer)) {
            Layer folded = layer;
            if (carry) {
                std::visit(
                    [&](auto& l) {
                        using L = std::decay_t<decltype(l)>;
                        if constexpr (std::is_same_v<L, FullyConnected> || std::is_same_v<L, Conv2d>)
                            l = fold_inputs(l, *carry);
                    },
                    folded);
                carry.reset();
            }
            out.layers.push_back(std::move(folded));

            LayerReport rep;
            rep.layer = i;
            rep.kind = layer_kind(layer);
            rep.width_before = rep.width_after = layer_width(layer);
            std::string reason = detail::forced_skip_reason(model, i, weighted.back());
            if (reason.empty() && config.skip_layers.count(i)) reason = "requested";
            if (!reason.empty()) {
                rep.skipped = true;
                rep.skip_reason = reason;
            } else {
                pending = i;
            }
            result.report.layers.push_back(std::move(rep));
        } else if (std::holds_alternative<Flatten>(layer)) {
            if (carry) {
                const Shape& in = i == 0 ? model.input_shape : shapes[i - 1];
                carry = expand_flatten(*carry, shape_volume(in) / in[0]);
            }
            out.layers.push_back(layer);
        } else {
            if (carry && (std::holds_alternative<ResidualBlockStart>(layer) ||
                          std::holds_alternative<ResidualBlockEnd>(layer)))
                throw StructuralError("internal: pruned width reaches residual marker at layer " + std::to_string(i));
            out.layers.push_back(layer);
        }

        if (pending != none && i == detail::group_end(model, pending)) {
            const std::size_t l = pending;
            pending = none;
            const Layer& original = model.layers[l];
            const std::size_t width = layer_width(original);
            LayerReport& rep = result.report.layers.back();

            std::optional<std::size_t> k;
            if (auto it = config.layer_ranks.find(l); it != config.layer_ranks.end()) {
                k = it->second;
            } else if (config.mode == PruneConfig::Mode::fraction) {
                auto it2 = config.layer_fractions.find(l);
                k = kept_width(width, it2 != config.layer_fractions.end() ? it2->second : config.fraction);
            }

            LayerSelection sel;
            if (method == PruneMethod::id) {
                const Matrix act = current.rank() == 4 ? reshape_channels(current) : current.as_matrix();
                const RankCriterion crit = k ? RankCriterion::fixed(*k, config.certify)
                                             : RankCriterion::tolerance(config.epsilon, config.certify);
                sel = id_select(act, crit, config.on_rank_deficiency);
                rep.achieved_error = sel.id.achieved_error;
            } else {
                sel.clamped = *k > width;
                if (*k >= width) {
                    sel.id = detail::identity_selection(width);
                } else {
                    sel.id = detail::selection_matrix(magnitude_select(original, *k), width);
                }
            }

            Layer& target = out.layers[l];
            std::visit(
                [&](auto& t) {
                    using L = std::decay_t<decltype(t)>;
                    if constexpr (std::is_same_v<L, FullyConnected> || std::is_same_v<L, Conv2d>)
                        t = select_outputs(t, sel.id.indices);
                },
                target);
            rep.width_after = sel.id.indices.size();
            rep.kept = sel.id.indices;
            rep.unprunable = sel.unprunable;
            rep.clamped = sel.clamped;
            rep.rank_truncated = sel.id.rank_truncated;
            rep.certified = sel.id.certified;
            rep.t_norm = spectral_norm(sel.id.t, 1e-10, 5000);
            if (sel.id.indices.size() < width) carry = sel.id.t;
        }
    }

    result.report.flops_before = count_flops(model).total;
    result.report.flops_after = count_flops(out).total;
    validate_model(out);
    return result;
}

inline PruneResult magnitude_prune_model(const Model& model, const PruningSet& prune_set, const PruneConfig& config) {
    return prune_model(model, prune_set, config, PruneMethod::magnitude);
}

// Per-layer kept widths of a report, for pruning a second model to the same shape.
inline std::map<std::size_t, std::size_t> report_widths(const PruneReport& report) {
    std::map<std::size_t, std::size_t> out;
    for (const auto& l : report.layers)
        if (!l.skipped) out[l.layer] = l.width_after;
    return out;
}

}  // namespace idprune
