#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ravqa/errors.hpp"

namespace ravqa {

// Dense row-major array of doubles with rank 1..3 (batch x length x dim).
class Tensor {
public:
    using Shape = std::vector<std::size_t>;

    Tensor() : shape_{0} {}

    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        check_rank();
        data_.assign(count(shape_), 0.0);
    }

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_rank();
        if (count(shape_) != data_.size()) {
            throw DimensionError("tensor shape " + shape_str(shape_) + " does not match " +
                                 std::to_string(data_.size()) + " values");
        }
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, double value) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    static Tensor vector(std::initializer_list<double> values) {
        return Tensor({values.size()}, std::vector<double>(values));
    }

    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r == 0 ? 0 : rows.begin()->size();
        std::vector<double> data;
        data.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) {
                throw DimensionError("ragged matrix literal");
            }
            data.insert(data.end(), row.begin(), row.end());
        }
        return Tensor({r, c}, std::move(data));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

    // Matrix view helpers. A rank-1 tensor is treated as a single row.
    std::size_t rows() const noexcept { return rank() == 1 ? 1 : shape_[rank() - 2]; }
    std::size_t cols() const noexcept { return shape_.back(); }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }
    double& at(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
    std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols(), cols()}; }

    std::vector<double>& storage() noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    std::string shape_str() const { return shape_str(shape_); }

    static std::string shape_str(const Shape& s) {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < s.size(); ++i) {
            os << (i ? "x" : "") << s[i];
        }
        os << ']';
        return os.str();
    }

    static std::size_t count(const Shape& s) noexcept {
        return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
    }

private:
    void check_rank() const {
        if (shape_.empty() || shape_.size() > 3) {
            throw DimensionError("tensor rank must be 1..3, got " + std::to_string(shape_.size()));
        }
    }

    Shape shape_;
    std::vector<double> data_;
};

// Bitwise equality (distinguishes -0.0 from 0.0, equal NaN payloads compare equal).
inline bool bit_equal(const Tensor& a, const Tensor& b) noexcept {
    return a.shape() == b.shape() &&
           (a.size() == 0 || std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

namespace kernels {

// c[m x n] = a[m x k] * b[k x n]; each output accumulates over k in ascending order.
inline void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                   std::size_t k, std::size_t n) {
    std::fill(c.begin(), c.end(), 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            const double* bp = b.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                ci[j] += aip * bp[j];
            }
        }
    }
}

// In-place max-subtracted softmax over a contiguous line.
inline void softmax_line(std::span<double> x) {
    if (x.empty()) {
        return;
    }
    const double mx = *std::max_element(x.begin(), x.end());
    double sum = 0.0;
    for (double& v : x) {
        v = std::exp(v - mx);
        sum += v;
    }
    for (double& v : x) {
        v /= sum;
    }
}

inline double dot(std::span<const double> u, std::span<const double> v) {
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        s += u[i] * v[i];
    }
    return s;
}

inline double norm(std::span<const double> u) { return std::sqrt(dot(u, u)); }

// Normalizes one row into `out`; returns (mean, inverse std) for the backward pass.
inline std::pair<double, double> layer_norm_row(std::span<const double> x, std::span<const double> gain,
                                                std::span<const double> bias, double eps, std::span<double> out) {
    const double n = static_cast<double>(x.size());
    double mean = 0.0;
    for (double v : x) {
        mean += v;
    }
    mean /= n;
    double var = 0.0;
    for (double v : x) {
        var += (v - mean) * (v - mean);
    }
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = (x[i] - mean) * inv * gain[i] + bias[i];
    }
    return {mean, inv};
}

}  // namespace kernels

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() > 2 || b.rank() != 2 || a.cols() != b.rows()) {
        throw DimensionError("matmul shape mismatch: " + a.shape_str() + " x " + b.shape_str());
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor c(a.rank() == 1 ? Tensor::Shape{n} : Tensor::Shape{m, n});
    kernels::matmul(a.data(), b.data(), c.data(), m, k, n);
    return c;
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) {
        throw DimensionError("transpose expects a matrix, got " + a.shape_str());
    }
    Tensor t({a.cols(), a.rows()});
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
            t.at(j, i) = a.at(i, j);
        }
    }
    return t;
}

// Softmax along `axis` (negative axes count from the end).
inline Tensor softmax(const Tensor& x, int axis = -1) {
    const int r = static_cast<int>(x.rank());
    const int ax = axis < 0 ? axis + r : axis;
    if (ax < 0 || ax >= r) {
        throw DimensionError("softmax axis " + std::to_string(axis) + " out of range for " + x.shape_str());
    }
    std::size_t inner = 1;
    for (int i = ax + 1; i < r; ++i) {
        inner *= x.extent(static_cast<std::size_t>(i));
    }
    const std::size_t len = x.extent(static_cast<std::size_t>(ax));
    const std::size_t outer = x.size() / std::max<std::size_t>(1, len * inner);
    Tensor y = x;
    std::vector<double> line(len);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            for (std::size_t i = 0; i < len; ++i) {
                line[i] = x[base + i * inner];
            }
            kernels::softmax_line(line);
            for (std::size_t i = 0; i < len; ++i) {
                y[base + i * inner] = line[i];
            }
        }
    }
    return y;
}

// Arithmetic mean over the length axis of an L x D matrix.
inline Tensor mean_pool(const Tensor& h) {
    if (h.rank() != 2) {
        throw DimensionError("mean_pool expects L x D, got " + h.shape_str());
    }
    if (h.rows() == 0) {
        throw EmptySequenceError("mean_pool over an empty sequence");
    }
    Tensor g({h.cols()});
    for (std::size_t t = 0; t < h.rows(); ++t) {
        for (std::size_t j = 0; j < h.cols(); ++j) {
            g[j] += h.at(t, j);
        }
    }
    const double n = static_cast<double>(h.rows());
    for (std::size_t j = 0; j < h.cols(); ++j) {
        g[j] /= n;
    }
    return g;
}

inline constexpr double kDefaultCosineEps = 1e-8;

// u.v / (|u||v| + eps). All-zero inputs yield 0.
inline double cosine_sim(std::span<const double> u, std::span<const double> v, double eps = kDefaultCosineEps) {
    if (u.size() != v.size()) {
        throw DimensionError("cosine_sim dimension mismatch: " + std::to_string(u.size()) + " vs " +
                             std::to_string(v.size()));
    }
    if (!(eps > 0.0)) {
        throw ContractError("cosine_sim requires eps > 0");
    }
    return kernels::dot(u, v) / (kernels::norm(u) * kernels::norm(v) + eps);
}

inline double cosine_sim(const Tensor& u, const Tensor& v, double eps = kDefaultCosineEps) {
    return cosine_sim(u.data(), v.data(), eps);
}

// Indices of the k largest scores, descending; equal scores keep the smaller index first.
inline std::vector<std::size_t> topk_indices(std::span<const double> scores, std::size_t k) {
    if (k > scores.size()) {
        throw BudgetError("top-k budget " + std::to_string(k) + " exceeds length " + std::to_string(scores.size()));
    }
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) {
                          return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
                      });
    idx.resize(k);
    return idx;
}

inline std::vector<std::size_t> topk_indices(const Tensor& scores, std::size_t k) {
    return topk_indices(scores.data(), k);
}

// Normalizes over the last axis, then applies per-feature gain and bias.
inline Tensor layer_norm(const Tensor& h, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
    if (!(eps > 0.0)) {
        throw ContractError("layer_norm requires eps > 0");
    }
    if (gain.size() != h.cols() || bias.size() != h.cols()) {
        throw DimensionError("layer_norm gain/bias " + gain.shape_str() + "/" + bias.shape_str() +
                             " do not match " + h.shape_str());
    }
    Tensor y(h.shape());
    const std::size_t d = h.cols();
    for (std::size_t r = 0; r < h.size() / std::max<std::size_t>(1, d); ++r) {
        kernels::layer_norm_row({h.data().data() + r * d, d}, gain.data(), bias.data(), eps,
                                {y.data().data() + r * d, d});
    }
    return y;
}

}  // namespace ravqa
