#pragma once

// Datasets: IDX image/label files, the synthetic unit-circle regression task,
// pruning-set splitting and a small binary export format.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "idprune/error.hpp"
#include "idprune/matrix.hpp"
#include "idprune/rng.hpp"
#include "idprune/tensor.hpp"

namespace idprune {

// Classification sets carry `labels`; regression sets carry `targets`
// (n x outputs) and leave `labels` empty.
struct LabeledDataset {
    Tensor inputs;
    std::vector<int> labels;
    Matrix targets;

    std::size_t size() const { return inputs.empty() ? 0 : inputs.batch(); }
    bool is_regression() const { return !targets.empty(); }

    void validate() const {
        if (inputs.empty()) return;
        if (is_regression()) {
            if (targets.rows() != size())
                throw ShapeError("dataset has " + std::to_string(size()) + " inputs but " +
                                 std::to_string(targets.rows()) + " targets");
            if (!labels.empty()) throw InvalidInput("dataset carries both labels and regression targets");
        } else if (labels.size() != size()) {
            throw ShapeError("dataset has " + std::to_string(size()) + " inputs but " +
                             std::to_string(labels.size()) + " labels");
        }
    }

    LabeledDataset subset(std::span<const std::size_t> idx) const {
        LabeledDataset out;
        out.inputs = inputs.gather_batch(idx);
        if (is_regression()) {
            out.targets = targets.select_rows(idx);
        } else {
            out.labels.reserve(idx.size());
            for (std::size_t i : idx) out.labels.push_back(labels.at(i));
        }
        return out;
    }
};

// Unlabeled samples used only to record activations for pruning. There is
// deliberately no way to carry labels here.
struct PruningSet {
    Tensor inputs;

    std::size_t size() const { return inputs.empty() ? 0 : inputs.batch(); }
};

// ---------------------------------------------------------------------------
// IDX files (big-endian headers, unsigned byte payload).

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open '" + path + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("failed writing '" + path + "'");
}

inline std::uint32_t be32(const std::string& b, std::size_t off) {
    return (std::uint32_t(static_cast<unsigned char>(b[off])) << 24) |
           (std::uint32_t(static_cast<unsigned char>(b[off + 1])) << 16) |
           (std::uint32_t(static_cast<unsigned char>(b[off + 2])) << 8) |
           std::uint32_t(static_cast<unsigned char>(b[off + 3]));
}

inline void put_be32(std::string& out, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((v >> s) & 0xFFu));
}

// Checks magic and length; returns the dimension list.
inline std::vector<std::uint32_t> idx_header(const std::string& bytes, std::uint32_t magic, std::size_t ndims,
                                             const std::string& path) {
    if (bytes.size() < 4) throw FormatError(path + ": truncated IDX header");
    const std::uint32_t found = be32(bytes, 0);
    if (found != magic) {
        std::ostringstream msg;
        msg << path << ": bad IDX magic 0x" << std::hex << found << ", expected 0x" << magic;
        throw FormatError(msg.str());
    }
    if (bytes.size() < 4 + 4 * ndims) throw FormatError(path + ": truncated IDX header");
    std::vector<std::uint32_t> dims(ndims);
    std::size_t payload = 1;
    for (std::size_t i = 0; i < ndims; ++i) {
        dims[i] = be32(bytes, 4 + 4 * i);
        payload *= dims[i];
    }
    if (bytes.size() != 4 + 4 * ndims + payload)
        throw FormatError(path + ": IDX payload is " + std::to_string(bytes.size() - 4 - 4 * ndims) +
                          " bytes, header declares " + std::to_string(payload));
    return dims;
}

}  // namespace detail

// Images scaled to [0, 1]; shape (n, 1, rows, cols), or (n, rows*cols) when
// `flatten` is set.
inline LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path,
                               bool flatten = false) {
    const std::string img = detail::read_file(images_path);
    const std::string lab = detail::read_file(labels_path);
    const auto idims = detail::idx_header(img, kIdxImagesMagic, 3, images_path);
    const auto ldims = detail::idx_header(lab, kIdxLabelsMagic, 1, labels_path);
    if (idims[0] != ldims[0])
        throw FormatError(images_path + " holds " + std::to_string(idims[0]) + " images but " + labels_path +
                          " holds " + std::to_string(ldims[0]) + " labels");
    const std::size_t n = idims[0], rows = idims[1], cols = idims[2];
    std::vector<double> pixels(n * rows * cols);
    for (std::size_t i = 0; i < pixels.size(); ++i)
        pixels[i] = static_cast<double>(static_cast<unsigned char>(img[16 + i])) / 255.0;
    LabeledDataset ds;
    ds.inputs = flatten ? Tensor({n, rows * cols}, std::move(pixels)) : Tensor({n, 1, rows, cols}, std::move(pixels));
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<unsigned char>(lab[8 + i]);
    return ds;
}

// Writes 8-bit images (values in [0, 1] are scaled by 255 and rounded) and
// labels in IDX form. Inputs must be (n, 1, rows, cols) or (n, rows*cols)
// with `rows` x `cols` given.
inline void write_idx(const LabeledDataset& ds, const std::string& images_path, const std::string& labels_path,
                      std::size_t rows, std::size_t cols) {
    ds.validate();
    if (ds.is_regression()) throw InvalidInput("write_idx needs class labels");
    const std::size_t n = ds.size();
    if (ds.inputs.sample_size() != rows * cols) throw ShapeError("write_idx: image size does not match rows x cols");
    std::string img;
    detail::put_be32(img, kIdxImagesMagic);
    detail::put_be32(img, static_cast<std::uint32_t>(n));
    detail::put_be32(img, static_cast<std::uint32_t>(rows));
    detail::put_be32(img, static_cast<std::uint32_t>(cols));
    for (double v : ds.inputs.values()) {
        const double c = std::round(std::clamp(v, 0.0, 1.0) * 255.0);
        img.push_back(static_cast<char>(static_cast<unsigned char>(c)));
    }
    std::string lab;
    detail::put_be32(lab, kIdxLabelsMagic);
    detail::put_be32(lab, static_cast<std::uint32_t>(n));
    for (int l : ds.labels) {
        if (l < 0 || l > 255) throw InvalidInput("IDX labels must fit in one byte");
        lab.push_back(static_cast<char>(static_cast<unsigned char>(l)));
    }
    detail::write_file(images_path, img);
    detail::write_file(labels_path, lab);
}

// Standard file names inside a Fashion-MNIST / MNIST directory.
inline LabeledDataset load_idx_dir(const std::string& dir, bool train, bool flatten = false) {
    const std::filesystem::path d(dir);
    const std::string stem = train ? "train" : "t10k";
    return load_idx((d / (stem + "-images-idx3-ubyte")).string(), (d / (stem + "-labels-idx1-ubyte")).string(),
                    flatten);
}

// ---------------------------------------------------------------------------
// Unit-circle regression task. The direction vectors come from
// `vector_seed` so that independently drawn train and test sets share them.

struct CircleSpec {
    std::size_t n = 1000;
    std::size_t num_vectors = 2;
    std::uint64_t seed = 0;
    std::uint64_t vector_seed = 0;

    void validate() const {
        if (n == 0) throw InvalidInput("circle dataset needs n >= 1");
        if (num_vectors == 0) throw InvalidInput("circle dataset needs at least one direction vector");
    }
};

inline std::vector<std::array<double, 2>> circle_vectors(std::size_t count, std::uint64_t vector_seed) {
    Rng rng(vector_seed);
    std::vector<std::array<double, 2>> v(count);
    for (auto& p : v) {
        const double a = rng.uniform(0.0, 2.0 * std::numbers::pi);
        p = {std::cos(a), std::sin(a)};
    }
    return v;
}

// Vector j contributes +1 (even j) or -1 (odd j) when <v_j, x> > 0.
inline double circle_label(std::span<const std::array<double, 2>> vectors, double x, double y) {
    double label = 0.0;
    for (std::size_t j = 0; j < vectors.size(); ++j)
        if (vectors[j][0] * x + vectors[j][1] * y > 0.0) label += (j % 2 == 0) ? 1.0 : -1.0;
    return label;
}

inline LabeledDataset generate_circle(const CircleSpec& spec) {
    spec.validate();
    const auto vectors = circle_vectors(spec.num_vectors, spec.vector_seed);
    Rng rng(spec.seed);
    LabeledDataset ds;
    ds.inputs = Tensor({spec.n, 2});
    ds.targets = Matrix(spec.n, 1);
    for (std::size_t i = 0; i < spec.n; ++i) {
        const double a = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double x = std::cos(a), y = std::sin(a);
        ds.inputs[2 * i] = x;
        ds.inputs[2 * i + 1] = y;
        ds.targets(i, 0) = circle_label(vectors, x, y);
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Pruning-set selection.

enum class PruneSetPolicy { held_out_from_test, from_train };

struct DataSplit {
    LabeledDataset train;
    LabeledDataset test;
    PruningSet prune;
};

// held_out_from_test removes `prune_size` random samples from the test set;
// from_train samples them from the training set, which is left intact.
inline DataSplit split_pruning_set(const LabeledDataset& train, const LabeledDataset& test, std::size_t prune_size,
                                   PruneSetPolicy policy, std::uint64_t seed) {
    DataSplit out{train, test, {}};
    if (prune_size == 0) return out;
    const LabeledDataset& source = policy == PruneSetPolicy::held_out_from_test ? test : train;
    const bool strict = policy == PruneSetPolicy::held_out_from_test;
    if (strict ? prune_size >= source.size() : prune_size > source.size())
        throw InvalidInput("pruning set of " + std::to_string(prune_size) + " needs more than the " +
                           std::to_string(source.size()) + " available samples");
    Rng rng(seed);
    std::vector<std::size_t> perm = rng.permutation(source.size());
    std::vector<std::size_t> chosen(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(prune_size));
    out.prune.inputs = source.inputs.gather_batch(chosen);
    if (strict) {
        std::vector<std::size_t> rest(perm.begin() + static_cast<std::ptrdiff_t>(prune_size), perm.end());
        std::sort(rest.begin(), rest.end());
        out.test = test.subset(rest);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset export:
//   "IDDATA v1\n" <manifest length>"\n" <JSON manifest> <little-endian f64 blob>
// Blob order: inputs, then labels (as f64) or targets.

inline constexpr const char* kDatasetMagic = "IDDATA v1";

inline std::string serialize_dataset(const LabeledDataset& ds) {
    ds.validate();
    std::string blob;
    auto put = [&](double v) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        for (int i = 0; i < 8; ++i) blob.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
    };
    for (double v : ds.inputs.values()) put(v);
    for (int l : ds.labels) put(static_cast<double>(l));
    for (double v : ds.targets.values()) put(v);
    const nlohmann::json manifest = {{"format", "IDDATA"},
                                     {"version", 1},
                                     {"input_shape", ds.inputs.shape()},
                                     {"kind", ds.is_regression() ? "regression" : "classification"},
                                     {"target_shape", Shape{ds.targets.rows(), ds.targets.cols()}},
                                     {"blob_doubles", blob.size() / 8}};
    const std::string text = manifest.dump(1);
    return std::string(kDatasetMagic) + "\n" + std::to_string(text.size()) + "\n" + text + blob;
}

inline LabeledDataset deserialize_dataset(const std::string& bytes, const std::string& source = "<memory>") {
    const std::string magic = std::string(kDatasetMagic) + "\n";
    if (bytes.compare(0, magic.size(), magic) != 0) throw FormatError(source + ": not an IDDATA v1 file");
    const std::size_t nl = bytes.find('\n', magic.size());
    if (nl == std::string::npos) throw FormatError(source + ": truncated header");
    try {
        const std::size_t len = std::stoull(bytes.substr(magic.size(), nl - magic.size()));
        if (nl + 1 + len > bytes.size()) throw FormatError(source + ": truncated manifest");
        const auto manifest = nlohmann::json::parse(bytes.substr(nl + 1, len));
        const std::size_t blob_begin = nl + 1 + len;
        const auto count = manifest.at("blob_doubles").get<std::size_t>();
        if (bytes.size() - blob_begin != 8 * count) throw FormatError(source + ": blob size mismatch");
        std::size_t pos = blob_begin;
        auto get = [&]() {
            std::uint64_t bits = 0;
            for (int i = 0; i < 8; ++i)
                bits |= std::uint64_t(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
            pos += 8;
            return std::bit_cast<double>(bits);
        };
        LabeledDataset ds;
        const auto shape = manifest.at("input_shape").get<Shape>();
        const auto tshape = manifest.at("target_shape").get<Shape>();
        const bool regression = manifest.at("kind") == "regression";
        const std::size_t n = shape.at(0);
        const std::size_t expected = shape_volume(shape) + (regression ? tshape.at(0) * tshape.at(1) : n);
        if (expected != count) throw FormatError(source + ": manifest shapes disagree with blob size");
        std::vector<double> x(shape_volume(shape));
        for (double& v : x) v = get();
        ds.inputs = Tensor(shape, std::move(x));
        if (regression) {
            ds.targets = Matrix(tshape[0], tshape[1]);
            for (double& v : ds.targets.values()) v = get();
        } else {
            ds.labels.resize(n);
            for (int& l : ds.labels) l = static_cast<int>(get());
        }
        ds.validate();
        return ds;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(source + ": malformed manifest: " + e.what());
    } catch (const std::invalid_argument&) {
        throw FormatError(source + ": bad manifest length");
    } catch (const ShapeError& e) {
        throw FormatError(source + ": " + e.what());
    }
}

inline void save_dataset(const LabeledDataset& ds, const std::string& path) {
    detail::write_file(path, serialize_dataset(ds));
}

inline LabeledDataset load_dataset(const std::string& path) {
    return deserialize_dataset(detail::read_file(path), path);
}

}  // namespace idprune
