// Copyright (C) 2026 the inferlab authors
// SPDX-License-Identifier: Apache-2.0
//
// Scaled dot-product attention two ways: a reference implementation that
// materializes the full score/probability matrices (the oracle), and a
// blockwise online-softmax implementation that never materializes an NxN
// matrix yet is equivalent within floating-point tolerance. Both are
// templated on the scalar type; the 32-bit instantiation is the "kernel"
// path, the 64-bit one the reference path.
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>

#include "inferlab/common.hpp"
#include "inferlab/matrix.hpp"

namespace inferlab {

/// Finite stand-in for the -inf mask entries.
inline constexpr double kMaskSentinel = -1e30;

template <typename T = double>
struct AttentionInput {
    Mat<T> q; // N x d_k
    Mat<T> k; // N x d_k
    Mat<T> v; // N x d_v
    bool causal = false;

    std::size_t size() const { return q.rows; }

    void validate() const {
        INFERLAB_CHECK(q.rows >= 1 && q.cols >= 1 && v.cols >= 1, "attention input is empty");
        INFERLAB_CHECK(k.rows == q.rows && k.cols == q.cols && v.rows == q.rows,
                       "attention input shape mismatch");
        INFERLAB_CHECK(q.all_finite() && k.all_finite() && v.all_finite(),
                       "attention input has non-finite entries");
    }
};

struct BlockSpec {
    std::size_t block_rows = 8; // B_r
    std::size_t block_cols = 8; // B_c

    void validate() const {
        INFERLAB_CHECK(block_rows >= 1 && block_cols >= 1, "block sizes must be >= 1");
    }
};

/// O = softmax(Q K^T / sqrt(d_k) + mask) V, materializing scores and
/// probabilities. When `probs_out` is given it receives the full N x N
/// probability matrix (masked entries exactly zero).
template <typename T>
Mat<T> naive_attention(const AttentionInput<T>& input, Mat<T>* probs_out = nullptr) {
    input.validate();
    const std::size_t n = input.size();
    const std::size_t dk = input.q.cols;
    const std::size_t dv = input.v.cols;
    const T scale = T(1) / std::sqrt(static_cast<T>(dk));

    Mat<T> scores(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            if (input.causal && j > i) {
                scores(i, j) = static_cast<T>(kMaskSentinel);
                continue;
            }
            T acc = T(0);
            for (std::size_t c = 0; c < dk; ++c) acc += input.q(i, c) * input.k(j, c);
            scores(i, j) = acc * scale;
        }

    Mat<T> probs(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        T row_max = scores(i, 0);
        for (std::size_t j = 1; j < n; ++j) row_max = std::max(row_max, scores(i, j));
        T denom = T(0);
        for (std::size_t j = 0; j < n; ++j) {
            probs(i, j) = std::exp(scores(i, j) - row_max);
            denom += probs(i, j);
        }
        for (std::size_t j = 0; j < n; ++j) probs(i, j) /= denom;
    }

    Mat<T> out(n, dv);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < dv; ++c) {
            T acc = T(0);
            for (std::size_t j = 0; j < n; ++j) acc += probs(i, j) * input.v(j, c);
            out(i, c) = acc;
        }
    if (probs_out) *probs_out = std::move(probs);
    return out;
}

/// Blockwise attention with online softmax. Per query block the running
/// state is (O_i, l_i, m_i) initialized to (0, 0, -inf); each key/value
/// block contributes local scores S_ij, row maxima m_ij, exponentials
/// P_ij = exp(S_ij - m_ij) and sums l_ij, merged with
///
///   m_new = max(m_i, m_ij)
///   l_new = exp(m_i - m_new) l_i + exp(m_ij - m_new) l_ij
///   O_new = (exp(m_i - m_new) l_i O_i + exp(m_ij - m_new) P_ij V_j) / l_new
///
/// Tail blocks run at their true size; fully masked blocks are skipped, so
/// no padding value ever enters a softmax.
template <typename T>
Mat<T> flash_attention(const AttentionInput<T>& input, const BlockSpec& spec) {
    input.validate();
    spec.validate();
    const std::size_t n = input.size();
    const std::size_t dk = input.q.cols;
    const std::size_t dv = input.v.cols;
    const std::size_t br = std::min(spec.block_rows, n);
    const std::size_t bc = std::min(spec.block_cols, n);
    const T scale = T(1) / std::sqrt(static_cast<T>(dk));
    const T neg_inf = -std::numeric_limits<T>::infinity();

    Mat<T> out(n, dv);
    std::vector<T> scores(br * bc), p_hat(br * bc);
    std::vector<T> m(br), l(br), m_local(br), l_local(br);
    std::vector<T> acc; // unnormalized running output for the current query block

    for (std::size_t row0 = 0; row0 < n; row0 += br) {
        const std::size_t rows = std::min(br, n - row0);
        std::fill(m.begin(), m.begin() + rows, neg_inf);
        std::fill(l.begin(), l.begin() + rows, T(0));
        acc.assign(rows * dv, T(0));

        for (std::size_t col0 = 0; col0 < n; col0 += bc) {
            const std::size_t cols = std::min(bc, n - col0);
            // A block strictly above the causal diagonal contributes nothing.
            if (input.causal && col0 > row0 + rows - 1) continue;

            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) {
                    if (input.causal && col0 + c > row0 + r) {
                        scores[r * cols + c] = static_cast<T>(kMaskSentinel);
                        continue;
                    }
                    T dot = T(0);
                    for (std::size_t x = 0; x < dk; ++x)
                        dot += input.q(row0 + r, x) * input.k(col0 + c, x);
                    scores[r * cols + c] = dot * scale;
                }

            for (std::size_t r = 0; r < rows; ++r) {
                T row_max = scores[r * cols];
                for (std::size_t c = 1; c < cols; ++c)
                    row_max = std::max(row_max, scores[r * cols + c]);
                m_local[r] = row_max;
                T sum = T(0);
                for (std::size_t c = 0; c < cols; ++c) {
                    p_hat[r * cols + c] = std::exp(scores[r * cols + c] - row_max);
                    sum += p_hat[r * cols + c];
                }
                l_local[r] = sum;
            }

            for (std::size_t r = 0; r < rows; ++r) {
                const T m_new = std::max(m[r], m_local[r]);
                const T scale_old = (m[r] == neg_inf) ? T(0) : std::exp(m[r] - m_new);
                const T scale_loc = std::exp(m_local[r] - m_new);
                l[r] = scale_old * l[r] + scale_loc * l_local[r];
                m[r] = m_new;
                T* acc_row = acc.data() + r * dv;
                for (std::size_t x = 0; x < dv; ++x) acc_row[x] *= scale_old;
                for (std::size_t c = 0; c < cols; ++c) {
                    const T w = scale_loc * p_hat[r * cols + c];
                    if (w == T(0)) continue;
                    for (std::size_t x = 0; x < dv; ++x)
                        acc_row[x] += w * input.v(col0 + c, x);
                }
            }
        }

        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t x = 0; x < dv; ++x) out(row0 + r, x) = acc[r * dv + x] / l[r];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Analytic HBM traffic model
// ---------------------------------------------------------------------------

struct TransferCounts {
    std::uint64_t reads = 0;
    std::uint64_t writes = 0;
    std::uint64_t total() const { return reads + writes; }
};

struct AttentionStats {
    TransferCounts naive;
    TransferCounts blockwise;
    /// Elements of S/P the naive schedule spills to and reloads from HBM;
    /// zero when the whole problem fits in the modeled on-chip budget. The
    /// blockwise schedule never spills scores by construction.
    std::uint64_t naive_score_traffic = 0;
};

/// Element-transfer counts for both schedules under an analytic cost model
/// (no hardware is measured). The on-chip budget is taken to be the block
/// working set B_r*d_k + B_c*d_k + B_c*d_v + B_r*B_c; the naive schedule
/// spills S and P (write + reload each) whenever its own working set
/// exceeds that budget, and reloads V for the output pass.
inline AttentionStats attention_stats(std::size_t n, std::size_t d_k, std::size_t d_v,
                                      const BlockSpec& spec) {
    spec.validate();
    const std::uint64_t br = std::min<std::uint64_t>(spec.block_rows, n);
    const std::uint64_t bc = std::min<std::uint64_t>(spec.block_cols, n);
    const std::uint64_t tr = (n + br - 1) / br;
    const std::uint64_t sram = br * d_k + bc * d_k + bc * d_v + br * bc;

    AttentionStats stats;
    stats.naive.reads = static_cast<std::uint64_t>(n) * (2 * d_k + d_v);
    stats.naive.writes = static_cast<std::uint64_t>(n) * d_v;
    const std::uint64_t naive_ws =
        static_cast<std::uint64_t>(n) * (2 * d_k + d_v) + static_cast<std::uint64_t>(n) * n;
    if (naive_ws > sram) {
        const std::uint64_t nn = static_cast<std::uint64_t>(n) * n;
        stats.naive.writes += 2 * nn;            // spill S, spill P
        stats.naive.reads += 2 * nn;             // reload S, reload P
        stats.naive.reads += static_cast<std::uint64_t>(n) * d_v; // reload V for O = P V
        stats.naive_score_traffic = 4 * nn;
    }

    stats.blockwise.reads = static_cast<std::uint64_t>(n) * d_k +
                            tr * static_cast<std::uint64_t>(n) * (d_k + d_v);
    stats.blockwise.writes = static_cast<std::uint64_t>(n) * d_v +
                             2 * static_cast<std::uint64_t>(n); // m_i, l_i saved per row
    return stats;
}

template <typename T>
AttentionStats attention_stats(const AttentionInput<T>& input, const BlockSpec& spec) {
    input.validate();
    return attention_stats(input.size(), input.q.cols, input.v.cols, spec);
}

} // namespace inferlab
