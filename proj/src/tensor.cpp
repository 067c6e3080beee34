// Copyright 2026 The optgqa Authors
// SPDX-License-Identifier: Apache-2.0

#include "optgqa/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <utility>

namespace optgqa {

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(element_count(shape_), 0.0f) {}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (element_count(shape_) != data_.size()) {
        throw ShapeError("tensor: shape " + to_string(shape_) + " needs " + std::to_string(element_count(shape_)) +
                         " elements, got " + std::to_string(data_.size()));
    }
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<float> values) {
    return Tensor({rows, cols}, std::vector<float>(values));
}

Tensor Tensor::identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0f;
    return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for " + to_string(shape_));
    }
    return shape_[axis];
}

std::span<const float> Tensor::row(std::size_t index) const {
    if (shape_.empty()) throw ShapeError("tensor: row() on a rank-0 tensor");
    const std::size_t len = shape_.back();
    if (len == 0 || (index + 1) * len > data_.size()) {
        throw ShapeError("tensor: row " + std::to_string(index) + " out of range for " + to_string(shape_));
    }
    return std::span<const float>(data_).subspan(index * len, len);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor c({m, n});
    // i-t-j order streams rows of b and c.
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t t = 0; t < k; ++t) {
            const float av = a(i, t);
            for (std::size_t j = 0; j < n; ++j) c(i, j) += av * b(t, j);
        }
    }
    return c;
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + to_string(a.shape()));
    const std::size_t m = a.dim(0), n = a.dim(1);
    Tensor out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out(j, i) = a(i, j);
    return out;
}

bool softmax_inplace(std::span<float> row) noexcept {
    constexpr float neg_inf = -std::numeric_limits<float>::infinity();
    float max = neg_inf;
    for (float x : row) max = std::max(max, x);
    if (!(max > neg_inf)) return false;
    double sum = 0.0;
    for (float& x : row) {
        x = (x == neg_inf) ? 0.0f : std::exp(x - max);
        sum += x;
    }
    const auto inv = static_cast<float>(1.0 / sum);
    for (float& x : row) x *= inv;
    return true;
}

Tensor row_softmax(const Tensor& m) {
    if (m.rank() != 2) throw ShapeError("row_softmax: expected rank 2, got " + to_string(m.shape()));
    Tensor out = m;
    const std::size_t rows = m.dim(0), cols = m.dim(1);
    auto data = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        if (!softmax_inplace(data.subspan(r * cols, cols))) {
            throw MaskedRowError("row_softmax: row " + std::to_string(r) + " has no finite entry");
        }
    }
    return out;
}

Tensor reshape(const Tensor& t, Shape new_shape) {
    return reshape(Tensor(t), std::move(new_shape));
}

Tensor reshape(Tensor&& t, Shape new_shape) {
    if (element_count(new_shape) != t.numel()) {
        throw ShapeError("reshape: cannot view " + to_string(t.shape()) + " as " + to_string(new_shape));
    }
    t.shape_ = std::move(new_shape);
    return std::move(t);
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("max_abs_diff: shapes differ " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
    float worst = 0.0f;
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
        const float d = std::fabs(x[i] - y[i]);
        if (std::isnan(d)) return std::numeric_limits<float>::infinity();
        worst = std::max(worst, d);
    }
    return worst;
}

}  // namespace optgqa
