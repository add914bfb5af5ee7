#pragma once

// IDNET v1 model container.
//
//   "IDNET v1\n"
//   <manifest byte length, decimal>"\n"
//   <manifest: JSON object>
//   <blob: little-endian IEEE-754 float32 values>
//
// The manifest lists layers in order together with their tensors (name,
// shape, float offset into the blob). Tensors are row-major; conv weights are
// [out_ch][in_ch][kh][kw]. Values are widened to double on load, so
// save -> load -> save reproduces the file byte for byte.

#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "idprune/error.hpp"
#include "idprune/nn.hpp"

namespace idprune {

inline constexpr const char* kModelMagic = "IDNET v1";

namespace detail {

inline void put_f32_le(std::string& out, double v) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
}

inline double get_f32_le(const unsigned char* p) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return static_cast<double>(std::bit_cast<float>(bits));
}

class BlobWriter {
public:
    nlohmann::json add(const std::string& name, const Shape& shape, std::span<const double> values) {
        nlohmann::json t = {{"name", name}, {"shape", shape}, {"offset", count_}};
        for (double v : values) put_f32_le(bytes_, v);
        count_ += values.size();
        return t;
    }
    const std::string& bytes() const { return bytes_; }
    std::size_t count() const { return count_; }

private:
    std::string bytes_;
    std::size_t count_ = 0;
};

class BlobReader {
public:
    BlobReader(const unsigned char* data, std::size_t floats) : data_(data), floats_(floats) {}

    std::vector<double> read(const nlohmann::json& t, const std::string& name, const Shape& expected) {
        if (t.at("name").get<std::string>() != name)
            throw FormatError("expected tensor '" + name + "', found '" + t.at("name").get<std::string>() + "'");
        const auto shape = t.at("shape").get<Shape>();
        if (shape != expected)
            throw FormatError("tensor '" + name + "' has shape " + shape_string(shape) + ", expected " +
                              shape_string(expected));
        const auto offset = t.at("offset").get<std::size_t>();
        const std::size_t count = shape_volume(shape);
        if (offset + count > floats_) throw FormatError("tensor '" + name + "' runs past the end of the blob");
        std::vector<double> out(count);
        for (std::size_t i = 0; i < count; ++i) out[i] = get_f32_le(data_ + 4 * (offset + i));
        return out;
    }

private:
    const unsigned char* data_;
    std::size_t floats_;
};

}  // namespace detail

inline std::string serialize_model(const Model& model) {
    validate_model(model);
    detail::BlobWriter blob;
    nlohmann::json layers = nlohmann::json::array();
    for (const Layer& layer : model.layers) {
        nlohmann::json j = {{"kind", layer_kind(layer)}};
        std::visit(
            [&](const auto& l) {
                using L = std::decay_t<decltype(l)>;
                if constexpr (std::is_same_v<L, FullyConnected>) {
                    j["in"] = l.in_features();
                    j["out"] = l.out_features();
                    j["tensors"] = {blob.add("weight", {l.in_features(), l.out_features()}, l.weight.values()),
                                    blob.add("bias", {l.out_features()}, l.bias)};
                } else if constexpr (std::is_same_v<L, Conv2d>) {
                    j["stride"] = l.stride;
                    j["padding"] = l.padding;
                    j["tensors"] = {blob.add("weight", l.weight.shape(), l.weight.values()),
                                    blob.add("bias", {l.out_channels()}, l.bias)};
                } else if constexpr (std::is_same_v<L, MaxPool2d> || std::is_same_v<L, AvgPool2d>) {
                    j["size"] = l.size;
                    j["stride"] = l.stride;
                } else if constexpr (std::is_same_v<L, BatchNorm>) {
                    const Shape s{l.gamma.size()};
                    j["eps"] = l.eps;
                    j["tensors"] = {blob.add("gamma", s, l.gamma), blob.add("beta", s, l.beta),
                                    blob.add("mean", s, l.mean), blob.add("var", s, l.var)};
                } else if constexpr (std::is_same_v<L, ResidualBlockStart> || std::is_same_v<L, ResidualBlockEnd>) {
                    j["id"] = l.id;
                }
            },
            layer);
        layers.push_back(std::move(j));
    }
    const nlohmann::json manifest = {{"format", "IDNET"},
                                     {"version", 1},
                                     {"name", model.name},
                                     {"input_shape", model.input_shape},
                                     {"num_classes", model.num_classes},
                                     {"metadata", model.metadata},
                                     {"layers", layers},
                                     {"blob_floats", blob.count()}};
    const std::string text = manifest.dump(1);
    std::string out = std::string(kModelMagic) + "\n" + std::to_string(text.size()) + "\n" + text;
    out += blob.bytes();
    return out;
}

inline Model deserialize_model(const std::string& bytes, const std::string& source = "<memory>") {
    const std::string magic = std::string(kModelMagic) + "\n";
    if (bytes.compare(0, magic.size(), magic) != 0)
        throw FormatError(source + ": not an IDNET v1 model (bad magic)");
    const std::size_t nl = bytes.find('\n', magic.size());
    if (nl == std::string::npos) throw FormatError(source + ": truncated header");
    std::size_t manifest_len = 0;
    try {
        manifest_len = std::stoull(bytes.substr(magic.size(), nl - magic.size()));
    } catch (const std::exception&) {
        throw FormatError(source + ": bad manifest length");
    }
    const std::size_t manifest_begin = nl + 1;
    if (manifest_begin + manifest_len > bytes.size()) throw FormatError(source + ": truncated manifest");

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.substr(manifest_begin, manifest_len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(source + ": manifest is not valid JSON: " + e.what());
    }

    try {
        if (manifest.at("format") != "IDNET" || manifest.at("version") != 1)
            throw FormatError(source + ": unsupported format/version");
        const auto floats = manifest.at("blob_floats").get<std::size_t>();
        const std::size_t blob_begin = manifest_begin + manifest_len;
        if (bytes.size() - blob_begin != 4 * floats)
            throw FormatError(source + ": blob holds " + std::to_string(bytes.size() - blob_begin) +
                              " bytes, manifest declares " + std::to_string(4 * floats));
        detail::BlobReader blob(reinterpret_cast<const unsigned char*>(bytes.data()) + blob_begin, floats);

        Model model;
        model.name = manifest.at("name").get<std::string>();
        model.input_shape = manifest.at("input_shape").get<Shape>();
        model.num_classes = manifest.at("num_classes").get<std::size_t>();
        model.metadata = manifest.at("metadata").get<std::map<std::string, std::string>>();
        for (const auto& j : manifest.at("layers")) {
            const auto kind = j.at("kind").get<std::string>();
            if (kind == "fully_connected") {
                const auto in = j.at("in").get<std::size_t>();
                const auto out = j.at("out").get<std::size_t>();
                const auto& ts = j.at("tensors");
                FullyConnected fc;
                fc.weight = Matrix(in, out, blob.read(ts.at(0), "weight", {in, out}));
                fc.bias = blob.read(ts.at(1), "bias", {out});
                model.layers.emplace_back(std::move(fc));
            } else if (kind == "conv2d") {
                const auto& ts = j.at("tensors");
                const auto wshape = ts.at(0).at("shape").get<Shape>();
                if (wshape.size() != 4) throw FormatError(source + ": conv weight must be 4-D");
                Conv2d conv;
                conv.stride = j.at("stride").get<std::size_t>();
                conv.padding = j.at("padding").get<std::size_t>();
                conv.weight = Tensor(wshape, blob.read(ts.at(0), "weight", wshape));
                conv.bias = blob.read(ts.at(1), "bias", {wshape[0]});
                model.layers.emplace_back(std::move(conv));
            } else if (kind == "max_pool2d") {
                model.layers.emplace_back(MaxPool2d{j.at("size").get<std::size_t>(), j.at("stride").get<std::size_t>()});
            } else if (kind == "avg_pool2d") {
                model.layers.emplace_back(AvgPool2d{j.at("size").get<std::size_t>(), j.at("stride").get<std::size_t>()});
            } else if (kind == "flatten") {
                model.layers.emplace_back(Flatten{});
            } else if (kind == "relu") {
                model.layers.emplace_back(ReLU{});
            } else if (kind == "batch_norm") {
                const auto& ts = j.at("tensors");
                const Shape s = ts.at(0).at("shape").get<Shape>();
                BatchNorm bn;
                bn.eps = j.at("eps").get<double>();
                bn.gamma = blob.read(ts.at(0), "gamma", s);
                bn.beta = blob.read(ts.at(1), "beta", s);
                bn.mean = blob.read(ts.at(2), "mean", s);
                bn.var = blob.read(ts.at(3), "var", s);
                model.layers.emplace_back(std::move(bn));
            } else if (kind == "residual_start") {
                model.layers.emplace_back(ResidualBlockStart{j.at("id").get<int>()});
            } else if (kind == "residual_end") {
                model.layers.emplace_back(ResidualBlockEnd{j.at("id").get<int>()});
            } else {
                throw FormatError(source + ": unknown layer kind '" + kind + "'");
            }
        }
        validate_model(model);
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(source + ": malformed manifest: " + e.what());
    } catch (const ShapeError& e) {
        throw FormatError(source + ": " + e.what());
    }
}

inline void save_model(const Model& model, const std::string& path) {
    const std::string bytes = serialize_model(model);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open '" + path + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("failed writing '" + path + "'");
}

inline Model load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open model file '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return deserialize_model(ss.str(), path);
}

// Rounds every parameter to float32, i.e. what a save/load cycle produces.
inline Model round_to_storage_precision(const Model& model) {
    return deserialize_model(serialize_model(model));
}

}  // namespace idprune
