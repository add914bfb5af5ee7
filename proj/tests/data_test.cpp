#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "idprune/data.hpp"
#include "idprune/nn.hpp"

using namespace idprune;
namespace fs = std::filesystem;

namespace {

class TempDir {
public:
    TempDir() {
        path_ = fs::temp_directory_path() /
                ("idprune_data_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
                 ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    std::string file(const std::string& name) const { return (path_ / name).string(); }

private:
    fs::path path_;
};

void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream f(path, std::ios::binary);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// One 2x3 all-zero image labelled 7, bytes written out by hand.
void write_single_image(const TempDir& dir) {
    write_bytes(dir.file("img"), {0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 0, 0, 0});
    write_bytes(dir.file("lab"), {0, 0, 8, 1, 0, 0, 0, 1, 7});
}

// Inputs whose first feature is the sample id, so splits can be traced.
LabeledDataset tagged(std::size_t n, std::size_t offset) {
    LabeledDataset ds;
    ds.inputs = Tensor({n, 2});
    for (std::size_t i = 0; i < n; ++i) {
        ds.inputs[2 * i] = static_cast<double>(offset + i);
        ds.labels.push_back(static_cast<int>(i % 10));
    }
    return ds;
}

std::set<double> ids(const Tensor& x) {
    std::set<double> out;
    for (std::size_t i = 0; i < x.batch(); ++i) out.insert(x[i * x.sample_size()]);
    return out;
}

}  // namespace

TEST(Idx, HandBuiltSingleImage) {
    TempDir dir;
    write_single_image(dir);
    const LabeledDataset ds = load_idx(dir.file("img"), dir.file("lab"));
    ASSERT_EQ(ds.size(), 1u);
    EXPECT_EQ(ds.labels, std::vector<int>{7});
    EXPECT_EQ(ds.inputs.shape(), (Shape{1, 1, 2, 3}));
    for (double v : ds.inputs.values()) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(load_idx(dir.file("img"), dir.file("lab"), true).inputs.shape(), (Shape{1, 6}));
}

TEST(Idx, WrongMagicNamesFile) {
    TempDir dir;
    write_single_image(dir);
    try {
        load_idx(dir.file("lab"), dir.file("lab"));
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find(dir.file("lab")), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos);
    }
}

TEST(Idx, TruncatedAndMismatchedFiles) {
    TempDir dir;
    write_bytes(dir.file("img"), {0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0});
    write_bytes(dir.file("lab"), {0, 0, 8, 1, 0, 0, 0, 1, 7});
    EXPECT_THROW(load_idx(dir.file("img"), dir.file("lab")), FormatError);
    write_bytes(dir.file("img"), {0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 9});
    write_bytes(dir.file("lab"), {0, 0, 8, 1, 0, 0, 0, 2, 7, 1});
    EXPECT_THROW(load_idx(dir.file("img"), dir.file("lab")), FormatError);
    EXPECT_THROW(load_idx(dir.file("missing"), dir.file("lab")), Error);
}

TEST(Idx, RoundTripIsLossless) {
    TempDir dir;
    Rng rng(1);
    LabeledDataset ds;
    ds.inputs = Tensor({5, 1, 4, 3});
    for (double& v : ds.inputs.values()) v = static_cast<double>(rng.below(256)) / 255.0;
    for (int i = 0; i < 5; ++i) ds.labels.push_back(static_cast<int>(rng.below(10)));
    write_idx(ds, dir.file("i"), dir.file("l"), 4, 3);
    const LabeledDataset back = load_idx(dir.file("i"), dir.file("l"));
    EXPECT_EQ(back.inputs, ds.inputs);
    EXPECT_EQ(back.labels, ds.labels);
}

TEST(Circle, LabelExamples) {
    const std::vector<std::array<double, 2>> one{{0.6, 0.8}};
    EXPECT_EQ(circle_label(one, 0.6, 0.8), 1.0);
    const std::vector<std::array<double, 2>> two{{1.0, 0.0}, {0.0, 1.0}};
    EXPECT_EQ(circle_label(two, -0.6, -0.8), 0.0);
    EXPECT_EQ(circle_label(two, 0.6, -0.8), 1.0);
    EXPECT_EQ(circle_label(two, -0.6, 0.8), -1.0);
    EXPECT_EQ(circle_label(two, 0.6, 0.8), 0.0);
}

TEST(Circle, GeneratedSetProperties) {
    for (std::size_t k : {1, 2, 5}) {
        const CircleSpec spec{500, k, 3, 4};
        const LabeledDataset ds = generate_circle(spec);
        ASSERT_EQ(ds.size(), 500u);
        EXPECT_TRUE(ds.is_regression());
        for (std::size_t i = 0; i < ds.size(); ++i) {
            EXPECT_NEAR(std::hypot(ds.inputs[2 * i], ds.inputs[2 * i + 1]), 1.0, 1e-12);
            const double y = ds.targets(i, 0);
            EXPECT_EQ(y, std::round(y));
            EXPECT_LE(std::abs(y), static_cast<double>(k));
        }
        const LabeledDataset again = generate_circle(spec);
        EXPECT_EQ(again.inputs, ds.inputs);
        EXPECT_EQ(again.targets, ds.targets);
    }
    for (const auto& v : circle_vectors(4, 9)) EXPECT_NEAR(std::hypot(v[0], v[1]), 1.0, 1e-12);
    EXPECT_THROW(generate_circle(CircleSpec{0, 2, 0, 1}), InvalidInput);
}

TEST(Circle, WidthFourPairNetworkFitsTask) {
    const CircleSpec spec{4000, 2, 11, 5};
    const auto v = circle_vectors(2, spec.vector_seed);
    // Each pair is u(ReLU(w c - b + d/2) - ReLU(w c - b - d/2)) with c = <v_j, x>;
    // b = d/2 puts the step at c = 0, u = +-1/d gives unit height.
    const double w = 1000.0, d = 1.0, b = d / 2;
    FullyConnected hidden{Matrix(2, 4), std::vector<double>(4)};
    FullyConnected out{Matrix(4, 1), {0.0}};
    for (std::size_t j = 0; j < 2; ++j) {
        const double sign = j == 0 ? 1.0 : -1.0;
        for (std::size_t r = 0; r < 2; ++r) {
            hidden.weight(r, 2 * j) = w * v[j][r];
            hidden.weight(r, 2 * j + 1) = w * v[j][r];
        }
        hidden.bias[2 * j] = -b + d / 2;
        hidden.bias[2 * j + 1] = -b - d / 2;
        out.weight(2 * j, 0) = sign / d;
        out.weight(2 * j + 1, 0) = -sign / d;
    }
    Model m;
    m.input_shape = {2};
    m.num_classes = 1;
    m.layers = {hidden, ReLU{}, out};
    const LabeledDataset ds = generate_circle(spec);
    const Tensor y = forward(m, ds.inputs);
    double mse = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) mse += std::pow(y[i] - ds.targets(i, 0), 2);
    mse /= static_cast<double>(ds.size());
    EXPECT_LE(mse, 0.05);
}

TEST(Split, ZeroSizeLeavesDataUnchanged) {
    const auto train = tagged(50, 0), test = tagged(20, 1000);
    const DataSplit s = split_pruning_set(train, test, 0, PruneSetPolicy::held_out_from_test, 1);
    EXPECT_EQ(s.train.inputs, train.inputs);
    EXPECT_EQ(s.test.inputs, test.inputs);
    EXPECT_EQ(s.prune.size(), 0u);
}

TEST(Split, HeldOutFromTestIsDisjoint) {
    const auto train = tagged(300, 0), test = tagged(10000, 100000);
    const DataSplit s = split_pruning_set(train, test, 1000, PruneSetPolicy::held_out_from_test, 42);
    EXPECT_EQ(s.test.size(), 9000u);
    EXPECT_EQ(s.prune.size(), 1000u);
    EXPECT_EQ(s.train.inputs, train.inputs);
    const auto test_ids = ids(s.test.inputs), prune_ids = ids(s.prune.inputs), train_ids = ids(s.train.inputs);
    EXPECT_EQ(prune_ids.size(), 1000u);
    for (double id : prune_ids) {
        EXPECT_FALSE(test_ids.count(id));
        EXPECT_FALSE(train_ids.count(id));
    }
    EXPECT_EQ(test_ids.size() + prune_ids.size(), 10000u);
    // Labels still line up with their inputs.
    for (std::size_t i = 0; i < s.test.size(); ++i)
        EXPECT_EQ(s.test.labels[i], static_cast<int>(static_cast<std::size_t>(s.test.inputs[2 * i] - 100000) % 10));
}

TEST(Split, FromTrainDrawsTrainingSamples) {
    const auto train = tagged(300, 0), test = tagged(100, 1000);
    const DataSplit s = split_pruning_set(train, test, 100, PruneSetPolicy::from_train, 5);
    EXPECT_EQ(s.train.size(), 300u);
    EXPECT_EQ(s.test.size(), 100u);
    for (double id : ids(s.prune.inputs)) EXPECT_LT(id, 300.0);
}

TEST(Split, SeededAndValidated) {
    const auto train = tagged(100, 0), test = tagged(100, 1000);
    const auto a = split_pruning_set(train, test, 30, PruneSetPolicy::held_out_from_test, 9);
    const auto b = split_pruning_set(train, test, 30, PruneSetPolicy::held_out_from_test, 9);
    const auto c = split_pruning_set(train, test, 30, PruneSetPolicy::held_out_from_test, 10);
    EXPECT_EQ(a.prune.inputs, b.prune.inputs);
    EXPECT_EQ(a.test.inputs, b.test.inputs);
    EXPECT_NE(a.prune.inputs, c.prune.inputs);
    EXPECT_THROW(split_pruning_set(train, test, 100, PruneSetPolicy::held_out_from_test, 1), InvalidInput);
    EXPECT_THROW(split_pruning_set(train, test, 101, PruneSetPolicy::from_train, 1), InvalidInput);
}

TEST(DatasetExport, RoundTripBothKinds) {
    const LabeledDataset circle = generate_circle({64, 3, 2, 2});
    const LabeledDataset back = deserialize_dataset(serialize_dataset(circle));
    EXPECT_EQ(back.inputs, circle.inputs);
    EXPECT_EQ(back.targets, circle.targets);
    EXPECT_TRUE(back.labels.empty());

    const LabeledDataset cls = tagged(10, 3);
    const LabeledDataset back2 = deserialize_dataset(serialize_dataset(cls));
    EXPECT_EQ(back2.inputs, cls.inputs);
    EXPECT_EQ(back2.labels, cls.labels);
    EXPECT_EQ(serialize_dataset(back2), serialize_dataset(cls));

    const std::string bytes = serialize_dataset(cls);
    EXPECT_THROW(deserialize_dataset(bytes.substr(0, bytes.size() - 1)), FormatError);
    EXPECT_THROW(deserialize_dataset("IDNET v1\n" + bytes), FormatError);
}
