// Copyright 2026 The optgqa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace optgqa {

using Shape = std::vector<std::size_t>;

/// Raised when operand extents are incompatible. The message names the shapes involved.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised by row_softmax when a row has no finite entry.
class MaskedRowError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

std::string to_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

/// Dense row-major float32 array with an explicit shape.
///
/// Every operation in this library takes tensors by const reference and
/// returns a fresh tensor, so a tensor is never mutated after it has been
/// handed to an operation. The mutable accessors exist for construction.
class Tensor {
public:
    Tensor() = default;
    /// Zero-filled tensor of the given shape.
    explicit Tensor(Shape shape);
    /// Takes ownership of `data`; throws ShapeError if its length does not match `shape`.
    Tensor(Shape shape, std::vector<float> data);

    static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<float> values);
    static Tensor identity(std::size_t n);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<const float> data() const noexcept { return data_; }
    std::span<float> data() noexcept { return data_; }

    // Rank-2 element access, unchecked.
    float operator()(std::size_t row, std::size_t col) const noexcept { return data_[row * shape_[1] + col]; }
    float& operator()(std::size_t row, std::size_t col) noexcept { return data_[row * shape_[1] + col]; }

    /// Flat row `index` of length dim(rank-1), i.e. the tensor viewed as [numel/last, last].
    std::span<const float> row(std::size_t index) const;

    bool operator==(const Tensor& other) const = default;

private:
    friend Tensor reshape(Tensor&& t, Shape new_shape);

    Shape shape_;
    std::vector<float> data_;
};

/// c[i][j] = sum_t a[i][t] * b[t][j]
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor transpose(const Tensor& a);

/// Numerically stable softmax over the last axis of a rank-2 tensor.
/// Entries equal to -inf map to exactly 0.
Tensor row_softmax(const Tensor& m);

/// In-place stable softmax of one row. Returns false if the row has no finite entry.
bool softmax_inplace(std::span<float> row) noexcept;

/// Same data, new shape. Never reorders elements.
Tensor reshape(const Tensor& t, Shape new_shape);
Tensor reshape(Tensor&& t, Shape new_shape);

/// Largest absolute elementwise difference; throws ShapeError on shape mismatch.
float max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace optgqa
