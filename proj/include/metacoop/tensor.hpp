#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace metacoop {

using Shape = std::vector<std::size_t>;

// Raised when operand shapes do not conform for an operation.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Raised when an operation produces NaN or Inf.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ')';
    return os.str();
}

// Dense row-major array of doubles. Rank 0 is a scalar; most ops work on rank 2.
class Array {
public:
    Array() : shape_{}, data_(1, 0.0) {}

    explicit Array(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(numel(shape_), fill) {}

    Array(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (numel(shape_) != data_.size()) {
            throw ShapeError("Array: shape " + to_string(shape_) + " does not match " +
                             std::to_string(data_.size()) + " values");
        }
    }

    static Array scalar(double v) { return Array(Shape{}, std::vector<double>{v}); }

    static Array matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
        return Array(Shape{rows, cols}, std::move(data));
    }

    static Array matrix(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.begin()->size() : 0;
        std::vector<double> data;
        data.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) throw ShapeError("Array::matrix: ragged rows");
            data.insert(data.end(), row.begin(), row.end());
        }
        return Array(Shape{r, c}, std::move(data));
    }

    // Column vector (n, 1).
    static Array column(std::vector<double> data) {
        const std::size_t n = data.size();
        return Array(Shape{n, 1}, std::move(data));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }

    std::size_t rows() const {
        require_rank2("rows");
        return shape_[0];
    }
    std::size_t cols() const {
        require_rank2("cols");
        return shape_[1];
    }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    const std::vector<double>& data() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    double item() const {
        if (data_.size() != 1) throw ShapeError("Array::item on shape " + to_string(shape_));
        return data_[0];
    }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    // Bitwise equality of shape and payload.
    friend bool operator==(const Array& a, const Array& b) {
        if (a.shape_ != b.shape_) return false;
        for (std::size_t i = 0; i < a.data_.size(); ++i) {
            if (std::bit_cast<std::uint64_t>(a.data_[i]) != std::bit_cast<std::uint64_t>(b.data_[i])) return false;
        }
        return true;
    }

private:
    void require_rank2(const char* what) const {
        if (shape_.size() != 2) throw ShapeError(std::string("Array::") + what + " needs rank 2, got " + to_string(shape_));
    }

    Shape shape_;
    std::vector<double> data_;
};

// Left-to-right sequential dot product.
inline double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

}  // namespace metacoop
