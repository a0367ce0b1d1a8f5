// Copyright (C) 2026 the inferlab authors
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <span>
#include <vector>

#include "inferlab/model.hpp"

namespace inferlab {

/// Incremental autoregressive evaluation with a contiguous per-layer KV
/// cache. Appending a token runs one position through the model against the
/// cached keys/values; truncate() rolls speculative positions back, which is
/// what the lookahead decoder uses to discard unverified tokens.
///
/// The per-position arithmetic follows forward() operation-for-operation in
/// the same summation order, so logits here match a full forward pass on the
/// same prefix exactly.
class DecodeSession {
public:
    explicit DecodeSession(const ModelParams& params) : params_(&params) {
        params.config.validate();
        const auto& cfg = params.config;
        const std::size_t kv_width = cfg.num_kv_heads * cfg.head_dim();
        k_cache_.assign(params.layers.size(), Matrix(cfg.max_seq, kv_width));
        v_cache_.assign(params.layers.size(), Matrix(cfg.max_seq, kv_width));
        logits_ = Matrix(cfg.max_seq, cfg.vocab_size);
        tokens_.reserve(cfg.max_seq);
    }

    std::size_t size() const { return tokens_.size(); }
    std::size_t capacity() const { return params_->config.max_seq; }
    const TokenSeq& tokens() const { return tokens_; }
    const ModelParams& params() const { return *params_; }

    /// Logits produced when position `pos` was appended; rows survive
    /// truncation because they only ever depended on the prefix.
    std::span<const double> logits_at(std::size_t pos) const {
        INFERLAB_CHECK(pos < tokens_.size(), "logits_at: position ", pos, " not evaluated");
        return logits_.row(pos);
    }

    std::span<const double> last_logits() const {
        INFERLAB_CHECK(!tokens_.empty(), "last_logits: session is empty");
        return logits_.row(tokens_.size() - 1);
    }

    void append(Token token) { append(std::span<const Token>(&token, 1)); }

    void append(std::span<const Token> toks) {
        for (const Token t : toks) append_one(t);
    }

    /// Drops positions >= new_len. Cached keys/values and logits for the
    /// retained prefix stay valid.
    void truncate(std::size_t new_len) {
        INFERLAB_CHECK(new_len <= tokens_.size(), "truncate: cannot grow a session");
        tokens_.resize(new_len);
    }

private:
    void append_one(Token token) {
        const auto& cfg = params_->config;
        const std::size_t pos = tokens_.size();
        INFERLAB_CHECK(pos < cfg.max_seq, "decode session full (max_seq = ", cfg.max_seq, ")");
        INFERLAB_CHECK(token < cfg.vocab_size, "token ", token, " out of vocabulary");

        const std::size_t d = cfg.d_model;
        const std::size_t hq = cfg.num_q_heads;
        const std::size_t dh = cfg.head_dim();
        const std::size_t g = cfg.group_factor();
        const std::size_t kv_width = cfg.num_kv_heads * dh;
        const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

        std::vector<double> h(d), normed(d), ln_out(d), q(hq * dh), heads(d), attn_out(d);
        for (std::size_t i = 0; i < d; ++i)
            h[i] = params_->token_embedding(token, i) + params_->position_embedding(pos, i);

        for (std::size_t l = 0; l < params_->layers.size(); ++l) {
            const auto& lp = params_->layers[l];
            Matrix& kc = k_cache_[l];
            Matrix& vc = v_cache_[l];

            double inv_std = 0.0;
            detail::layer_norm_row(h, lp.ln_scale, lp.ln_shift, normed, ln_out, inv_std);

            std::fill(q.begin(), q.end(), 0.0);
            double* k_row = kc.data.data() + pos * kv_width;
            double* v_row = vc.data.data() + pos * kv_width;
            std::fill(k_row, k_row + kv_width, 0.0);
            std::fill(v_row, v_row + kv_width, 0.0);
            for (std::size_t i = 0; i < d; ++i) {
                const double xv = ln_out[i];
                if (xv == 0.0) continue;
                const double* wq = lp.w_q.data.data() + i * lp.w_q.cols;
                const double* wk = lp.w_k.data.data() + i * kv_width;
                const double* wv = lp.w_v.data.data() + i * kv_width;
                for (std::size_t j = 0; j < q.size(); ++j) q[j] += xv * wq[j];
                for (std::size_t j = 0; j < kv_width; ++j) {
                    k_row[j] += xv * wk[j];
                    v_row[j] += xv * wv[j];
                }
            }

            for (std::size_t head = 0; head < hq; ++head) {
                const std::size_t kv = gqa_head_map(head, g);
                const std::size_t qo = head * dh;
                const std::size_t ko = kv * dh;
                scores_.resize(pos + 1);
                double row_max = -std::numeric_limits<double>::infinity();
                for (std::size_t s = 0; s <= pos; ++s) {
                    const double* ks = kc.data.data() + s * kv_width + ko;
                    double score = 0.0;
                    for (std::size_t i = 0; i < dh; ++i) score += q[qo + i] * ks[i];
                    score *= inv_sqrt_dh;
                    scores_[s] = score;
                    row_max = std::max(row_max, score);
                }
                double denom = 0.0;
                for (std::size_t s = 0; s <= pos; ++s) {
                    scores_[s] = std::exp(scores_[s] - row_max);
                    denom += scores_[s];
                }
                for (std::size_t s = 0; s <= pos; ++s) scores_[s] /= denom;
                for (std::size_t i = 0; i < dh; ++i) {
                    double acc = 0.0;
                    for (std::size_t s = 0; s <= pos; ++s)
                        acc += scores_[s] * vc(s, ko + i);
                    heads[qo + i] = acc;
                }
            }

            std::fill(attn_out.begin(), attn_out.end(), 0.0);
            for (std::size_t i = 0; i < d; ++i) {
                const double xv = heads[i];
                if (xv == 0.0) continue;
                const double* wo = lp.w_o.data.data() + i * d;
                for (std::size_t j = 0; j < d; ++j) attn_out[j] += xv * wo[j];
            }

            const std::size_t ff = lp.ffn_width();
            std::vector<double> ffn(d, 0.0);
            for (std::size_t j = 0; j < ff; ++j) {
                const double* wg = lp.w1_gate.data.data() + j * d;
                const double* wu = lp.w1_up.data.data() + j * d;
                double a = 0.0, b = 0.0;
                for (std::size_t i = 0; i < d; ++i) {
                    a += wg[i] * attn_out[i];
                    b += wu[i] * attn_out[i];
                }
                const double z = detail::silu(a) * b;
                if (z == 0.0) continue;
                for (std::size_t i = 0; i < d; ++i) ffn[i] += lp.w2(i, j) * z;
            }

            for (std::size_t i = 0; i < d; ++i) h[i] += ffn[i];
        }

        double* logit_row = logits_.data.data() + pos * cfg.vocab_size;
        std::fill(logit_row, logit_row + cfg.vocab_size, 0.0);
        for (std::size_t i = 0; i < d; ++i) {
            const double xv = h[i];
            if (xv == 0.0) continue;
            const double* u = params_->unembedding.data.data() + i * cfg.vocab_size;
            for (std::size_t j = 0; j < cfg.vocab_size; ++j) logit_row[j] += xv * u[j];
        }

        tokens_.push_back(token);
    }

    const ModelParams* params_;
    std::vector<Matrix> k_cache_, v_cache_;
    Matrix logits_;
    TokenSeq tokens_;
    std::vector<double> scores_;
};

} // namespace inferlab
