// Copyright (C) 2026 the inferlab authors
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "inferlab/common.hpp"

namespace inferlab {

/// Dense row-major matrix. The models here are desk-scale, so the point is
/// explicit, auditable loops rather than a BLAS backend.
template <typename T = double>
struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> data;

    Mat() = default;
    Mat(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), data(r * c, fill) {}

    T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const T> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    bool empty() const { return data.empty(); }
    bool same_shape(const Mat& other) const { return rows == other.rows && cols == other.cols; }

    bool all_finite() const {
        return std::all_of(data.begin(), data.end(), [](T v) { return std::isfinite(static_cast<double>(v)); });
    }

    friend bool operator==(const Mat& a, const Mat& b) {
        return a.rows == b.rows && a.cols == b.cols && a.data == b.data;
    }
};

using Matrix = Mat<double>;

template <typename T>
double max_abs_diff(const Mat<T>& a, const Mat<T>& b) {
    INFERLAB_CHECK(a.same_shape(b), "max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
    return m;
}

/// In-place numerically stable softmax over a contiguous range.
template <typename T>
void softmax_inplace(std::span<T> v) {
    T m = v[0];
    for (const T x : v) m = std::max(m, x);
    T sum = T(0);
    for (T& x : v) {
        x = std::exp(x - m);
        sum += x;
    }
    for (T& x : v) x /= sum;
}

inline std::size_t argmax_index(std::span<const double> v) {
    // Lowest-index tie-break: max_element keeps the first of equal maxima.
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

} // namespace inferlab
