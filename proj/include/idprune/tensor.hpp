#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "idprune/error.hpp"
#include "idprune/matrix.hpp"

namespace idprune {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_volume(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

// Dense row-major tensor of 1 to 4 dimensions. Activations use
// (batch, features) or (batch, channels, height, width).
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
        check_rank();
        data_.assign(shape_volume(shape_), fill);
    }

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_rank();
        if (data_.size() != shape_volume(shape_))
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_string(shape_));
    }

    // (rows, cols) tensor holding a copy of the matrix.
    static Tensor from_matrix(const Matrix& m) {
        return Tensor({m.rows(), m.cols()}, m.storage());
    }

    const Shape& shape() const { return shape_; }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    std::size_t batch() const { return shape_.empty() ? 0 : shape_[0]; }
    std::size_t sample_size() const { return shape_.empty() || shape_[0] == 0 ? 0 : data_.size() / shape_[0]; }

    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }
    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at4(std::size_t b, std::size_t c, std::size_t y, std::size_t x) {
        return data_[((b * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }
    double at4(std::size_t b, std::size_t c, std::size_t y, std::size_t x) const {
        return data_[((b * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    // Same data, new shape of equal volume.
    Tensor reshaped(Shape shape) const {
        if (shape_volume(shape) != data_.size())
            throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
        return Tensor(std::move(shape), data_);
    }

    // 2-D view copied into a matrix: (batch, rest).
    Matrix as_matrix() const {
        if (shape_.empty()) return {};
        return Matrix(shape_[0], sample_size(), data_);
    }

    // Samples [begin, begin + count).
    Tensor slice_batch(std::size_t begin, std::size_t count) const {
        Shape s = shape_;
        s[0] = count;
        const std::size_t per = sample_size();
        return Tensor(std::move(s),
                      std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(begin * per),
                                          data_.begin() + static_cast<std::ptrdiff_t>((begin + count) * per)));
    }

    Tensor gather_batch(std::span<const std::size_t> idx) const {
        Shape s = shape_;
        s[0] = idx.size();
        const std::size_t per = sample_size();
        std::vector<double> out;
        out.reserve(idx.size() * per);
        for (std::size_t i : idx) {
            const auto first = data_.begin() + static_cast<std::ptrdiff_t>(i * per);
            out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>(per));
        }
        return Tensor(std::move(s), std::move(out));
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    void check_rank() const {
        if (shape_.empty() || shape_.size() > 4)
            throw ShapeError("tensor rank must be 1..4, got " + std::to_string(shape_.size()));
    }

    Shape shape_;
    std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("max_abs_diff: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace idprune
