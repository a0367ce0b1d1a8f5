// Copyright (C) 2026 the inferlab authors
// SPDX-License-Identifier: Apache-2.0
//
// Test-only reference implementation of the toy transformer, written as
// straight scalar loops with no code shared with the library's forward pass.
// Supports injecting an additive perturbation at a gradient site so site
// gradients can be checked by central finite differences against an
// independent computation path.
#pragma once

#include <cmath>
#include <vector>

#include "inferlab/model.hpp"

namespace refmodel {

struct Perturb {
    enum Kind { none, ffn_activation, residual_output };
    Kind kind = none;
    std::size_t layer = 0;
    std::size_t pos = 0;
    std::size_t idx = 0;
    double delta = 0.0;
};

// Row-per-position logits for the whole sequence.
inline std::vector<std::vector<double>> logits(const inferlab::ModelParams& p,
                                               const std::vector<inferlab::Token>& tokens,
                                               const Perturb& pert = {}) {
    const auto& cfg = p.config;
    const std::size_t T = tokens.size();
    const std::size_t D = cfg.d_model;
    const std::size_t dh = cfg.d_model / cfg.num_q_heads;
    const std::size_t group = cfg.num_q_heads / cfg.num_kv_heads;

    std::vector<std::vector<double>> h(T, std::vector<double>(D));
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t i = 0; i < D; ++i)
            h[t][i] = p.token_embedding(tokens[t], i) + p.position_embedding(t, i);

    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const auto& lp = p.layers[l];
        const std::size_t F = lp.w1_gate.rows;

        // pre-layer-norm
        std::vector<std::vector<double>> u(T, std::vector<double>(D));
        for (std::size_t t = 0; t < T; ++t) {
            double mean = 0.0;
            for (std::size_t i = 0; i < D; ++i) mean += h[t][i];
            mean /= double(D);
            double var = 0.0;
            for (std::size_t i = 0; i < D; ++i) var += (h[t][i] - mean) * (h[t][i] - mean);
            var /= double(D);
            const double inv = 1.0 / std::sqrt(var + 1e-5);
            for (std::size_t i = 0; i < D; ++i)
                u[t][i] = (h[t][i] - mean) * inv * lp.ln_scale[i] + lp.ln_shift[i];
        }

        // grouped-query attention
        std::vector<std::vector<double>> q(T, std::vector<double>(cfg.num_q_heads * dh, 0.0));
        std::vector<std::vector<double>> k(T, std::vector<double>(cfg.num_kv_heads * dh, 0.0));
        std::vector<std::vector<double>> v(T, std::vector<double>(cfg.num_kv_heads * dh, 0.0));
        for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t j = 0; j < cfg.num_q_heads * dh; ++j)
                for (std::size_t i = 0; i < D; ++i) q[t][j] += u[t][i] * p.layers[l].w_q(i, j);
            for (std::size_t j = 0; j < cfg.num_kv_heads * dh; ++j)
                for (std::size_t i = 0; i < D; ++i) {
                    k[t][j] += u[t][i] * lp.w_k(i, j);
                    v[t][j] += u[t][i] * lp.w_v(i, j);
                }
        }

        std::vector<std::vector<double>> concat(T, std::vector<double>(D, 0.0));
        for (std::size_t head = 0; head < cfg.num_q_heads; ++head) {
            const std::size_t kv = head / group;
            for (std::size_t t = 0; t < T; ++t) {
                std::vector<double> score(t + 1);
                double best = -1e300;
                for (std::size_t s = 0; s <= t; ++s) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < dh; ++i)
                        acc += q[t][head * dh + i] * k[s][kv * dh + i];
                    score[s] = acc / std::sqrt(double(dh));
                    if (score[s] > best) best = score[s];
                }
                double z = 0.0;
                for (std::size_t s = 0; s <= t; ++s) {
                    score[s] = std::exp(score[s] - best);
                    z += score[s];
                }
                for (std::size_t s = 0; s <= t; ++s)
                    for (std::size_t i = 0; i < dh; ++i)
                        concat[t][head * dh + i] += (score[s] / z) * v[s][kv * dh + i];
            }
        }

        std::vector<std::vector<double>> attn(T, std::vector<double>(D, 0.0));
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t j = 0; j < D; ++j)
                for (std::size_t i = 0; i < D; ++i) attn[t][j] += concat[t][i] * lp.w_o(i, j);

        // GLU feed-forward on the attention output, single residual add
        for (std::size_t t = 0; t < T; ++t) {
            std::vector<double> f(D, 0.0);
            for (std::size_t j = 0; j < F; ++j) {
                double a = 0.0, b = 0.0;
                for (std::size_t i = 0; i < D; ++i) {
                    a += lp.w1_gate(j, i) * attn[t][i];
                    b += lp.w1_up(j, i) * attn[t][i];
                }
                double z = (a / (1.0 + std::exp(-a))) * b;
                if (pert.kind == Perturb::ffn_activation && pert.layer == l && pert.pos == t &&
                    pert.idx == j)
                    z += pert.delta;
                for (std::size_t i = 0; i < D; ++i) f[i] += lp.w2(i, j) * z;
            }
            for (std::size_t i = 0; i < D; ++i) h[t][i] += f[i];
            if (pert.kind == Perturb::residual_output && pert.layer == l && pert.pos == t)
                h[t][pert.idx] += pert.delta;
        }
    }

    std::vector<std::vector<double>> out(T, std::vector<double>(cfg.vocab_size, 0.0));
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t j = 0; j < cfg.vocab_size; ++j)
            for (std::size_t i = 0; i < D; ++i) out[t][j] += h[t][i] * p.unembedding(i, j);
    return out;
}

inline double nll(const inferlab::ModelParams& p, const std::vector<inferlab::Token>& tokens,
                  const std::vector<inferlab::Token>& targets, const Perturb& pert = {}) {
    const auto lg = logits(p, tokens, pert);
    double loss = 0.0;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        double best = lg[t][0];
        for (const double x : lg[t]) best = std::max(best, x);
        double z = 0.0;
        for (const double x : lg[t]) z += std::exp(x - best);
        loss -= (lg[t][targets[t]] - best) - std::log(z);
    }
    return loss;
}

} // namespace refmodel
