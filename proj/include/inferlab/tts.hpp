// Copyright (C) 2026 the inferlab authors
// SPDX-License-Identifier: Apache-2.0
//
// Test-time inference scaling: sample N stochastic trajectories, score each
// by confidence-weighted entropy
//
//   w_t   = T * (alpha_t * |dL/dlogits_t|) / sum_t' (alpha_t' * |dL/dlogits_t'|)
//   Hw    = (1/T) sum_t w_t H_t
//   Score = lambda * Hw - (1 - lambda) * mean log P(y_t | .)
//
// (lower is better), keep the top-K, optionally revise them through a
// critic, and take the majority-vote answer over the consensus pool.
#pragma once

#include <functional>
#include <map>
#include <optional>

#include "inferlab/model.hpp"
#include "inferlab/session.hpp"

namespace inferlab {

struct Trajectory {
    TokenSeq tokens;                      // generated tokens y_1..y_T
    Matrix per_step_probs;                // T x |V| full conditional distributions
    std::vector<double> per_step_entropy; // H_t, natural log
    std::vector<double> logprobs;         // log P(y_t | x, y_<t)
    std::vector<double> weights;          // importance weights, sum to T
    double weighted_entropy = 0.0;
    double avg_logprob = 0.0;
    double score = 0.0;
    std::size_t sample_index = 0;
};

/// Shannon entropy of a normalized distribution, natural log, 0 log 0 := 0.
inline double token_entropy(std::span<const double> dist) {
    double sum = 0.0;
    double h = 0.0;
    for (const double p : dist) {
        INFERLAB_CHECK(p >= 0.0, "token_entropy: negative probability");
        sum += p;
        if (p > 0.0) h -= p * std::log(p);
    }
    INFERLAB_CHECK(std::abs(sum - 1.0) <= 1e-6, "token_entropy: distribution sums to ", sum);
    return h;
}

inline double weighted_entropy(std::span<const double> entropies, std::span<const double> weights) {
    INFERLAB_CHECK(entropies.size() == weights.size() && !entropies.empty(),
                   "weighted_entropy: length mismatch");
    double acc = 0.0;
    for (std::size_t t = 0; t < entropies.size(); ++t) acc += weights[t] * entropies[t];
    return acc / static_cast<double>(entropies.size());
}

inline double avg_logprob(std::span<const double> logprobs) {
    INFERLAB_CHECK(!logprobs.empty(), "avg_logprob: empty input");
    double acc = 0.0;
    for (const double lp : logprobs) acc += lp;
    return acc / static_cast<double>(logprobs.size());
}

/// Lower scores are better: lambda trades uncertainty against likelihood.
inline double trajectory_score(double weighted_entropy_value, double avg_logprob_value,
                               double lambda) {
    INFERLAB_CHECK(lambda >= 0.0 && lambda <= 1.0, "lambda must be in [0, 1]");
    return lambda * weighted_entropy_value - (1.0 - lambda) * avg_logprob_value;
}

/// Attention-weighted gradient attribution. alpha_t is the mean attention
/// received by generated position t across layers, heads and query
/// positions; the gradient magnitude is the L2 norm of the loss gradient at
/// the logits that predicted y_t (analytically P - onehot for the
/// trajectory's own negative log-likelihood). Weights normalize to sum T; a
/// degenerate all-zero attribution falls back to uniform weights.
inline std::vector<double> importance_weights(const ForwardTrace& trace,
                                              const GradientSites& grads,
                                              std::size_t prompt_len) {
    const std::size_t total = trace.seq_len();
    INFERLAB_CHECK(prompt_len >= 1 && prompt_len < total,
                   "importance_weights: need at least one generated position");
    INFERLAB_CHECK(grads.d_logits.rows == total, "importance_weights: gradient shape mismatch");
    INFERLAB_CHECK(trace.attn_mean.rows == total,
                   "importance_weights: trace lacks attention (blockwise backend?)");
    const std::size_t gen = total - prompt_len;

    std::vector<double> raw(gen);
    double denom = 0.0;
    for (std::size_t t = 0; t < gen; ++t) {
        const std::size_t token_pos = prompt_len + t;   // position holding y_t
        const std::size_t logit_pos = token_pos - 1;    // position predicting y_t
        double alpha = 0.0;
        for (std::size_t q = 0; q < total; ++q) alpha += trace.attn_mean(q, token_pos);
        alpha /= static_cast<double>(total);
        double norm2 = 0.0;
        for (std::size_t v = 0; v < grads.d_logits.cols; ++v)
            norm2 += grads.d_logits(logit_pos, v) * grads.d_logits(logit_pos, v);
        raw[t] = alpha * std::sqrt(norm2);
        denom += raw[t];
    }

    std::vector<double> weights(gen, 1.0);
    if (denom <= 1e-30) {
        log::warn("importance_weights: zero attribution, falling back to uniform weights");
        return weights;
    }
    for (std::size_t t = 0; t < gen; ++t)
        weights[t] = static_cast<double>(gen) * raw[t] / denom;
    return weights;
}

// ---------------------------------------------------------------------------
// Sampling and scoring
// ---------------------------------------------------------------------------

/// Independent seeded stochastic decodes; trajectory i draws from the
/// sub-stream (seed, "tts-traj", i). Records each step's full conditional
/// distribution, its entropy and the chosen token's log probability.
inline std::vector<Trajectory> sample_trajectories(const ModelParams& params,
                                                   std::span<const Token> prompt, std::size_t n,
                                                   const SamplingStrategy& strategy,
                                                   std::size_t gen_len, std::uint64_t seed) {
    INFERLAB_CHECK(n >= 1, "sample_trajectories: n must be >= 1");
    INFERLAB_CHECK(!prompt.empty(), "sample_trajectories: empty prompt");
    INFERLAB_CHECK(gen_len >= 1, "sample_trajectories: gen_len must be >= 1");
    INFERLAB_CHECK(prompt.size() + gen_len <= params.config.max_seq,
                   "sample_trajectories: prompt + gen_len exceeds max_seq");

    std::vector<Trajectory> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(Rng::derive(seed, "tts-traj", i));
        Trajectory& traj = out[i];
        traj.sample_index = i;
        traj.per_step_probs = Matrix(gen_len, params.config.vocab_size);
        traj.per_step_entropy.resize(gen_len);
        traj.logprobs.resize(gen_len);
        traj.tokens.reserve(gen_len);

        DecodeSession session(params);
        session.append(prompt);
        for (std::size_t t = 0; t < gen_len; ++t) {
            const auto logits = session.last_logits();
            auto probs_row = traj.per_step_probs.row(t);
            std::copy(logits.begin(), logits.end(), probs_row.begin());
            softmax_inplace(probs_row);
            traj.per_step_entropy[t] = token_entropy(probs_row);
            const Token chosen = sample_token(logits, strategy, rng);
            traj.logprobs[t] = std::log(probs_row[chosen]);
            traj.tokens.push_back(chosen);
            session.append(chosen);
        }
    }
    return out;
}

/// Fills weights, weighted entropy, average log-probability and the final
/// score from a fresh forward pass over prompt + trajectory. The loss behind
/// the gradient attribution is the trajectory's own NLL, whose logit
/// gradient is P - onehot(y_t) in closed form.
inline void score_trajectory(const ModelParams& params, std::span<const Token> prompt,
                             Trajectory& traj, double lambda) {
    INFERLAB_CHECK(!traj.tokens.empty(), "score_trajectory: empty trajectory");
    TokenSeq all(prompt.begin(), prompt.end());
    all.insert(all.end(), traj.tokens.begin(), traj.tokens.end());
    const ForwardTrace trace = forward(params, all);

    GradientSites grads;
    grads.d_logits = Matrix(all.size(), params.config.vocab_size);
    for (std::size_t t = 0; t < traj.tokens.size(); ++t) {
        const std::size_t logit_pos = prompt.size() - 1 + t;
        for (std::size_t v = 0; v < params.config.vocab_size; ++v)
            grads.d_logits(logit_pos, v) = trace.probs(logit_pos, v);
        grads.d_logits(logit_pos, traj.tokens[t]) -= 1.0;
    }

    traj.weights = importance_weights(trace, grads, prompt.size());
    traj.weighted_entropy = weighted_entropy(traj.per_step_entropy, traj.weights);
    traj.avg_logprob = avg_logprob(traj.logprobs);
    traj.score = trajectory_score(traj.weighted_entropy, traj.avg_logprob, lambda);
}

/// Indices of the K lowest-score trajectories, ties broken by earlier
/// sampling index.
inline std::vector<std::size_t> top_k_select(const std::vector<Trajectory>& trajectories,
                                             std::size_t k) {
    INFERLAB_CHECK(k >= 1 && k <= trajectories.size(), "top_k_select: k must be in [1, n]");
    std::vector<std::size_t> order(trajectories.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&trajectories](std::size_t a, std::size_t b) {
        if (trajectories[a].score != trajectories[b].score)
            return trajectories[a].score < trajectories[b].score;
        return trajectories[a].sample_index < trajectories[b].sample_index;
    });
    order.resize(k);
    return order;
}

// ---------------------------------------------------------------------------
// Reflection
// ---------------------------------------------------------------------------

using Critic = std::function<Trajectory(const Trajectory&)>;

inline Critic identity_critic() {
    return [](const Trajectory& traj) { return traj; };
}

/// Deterministic desk-scale critic: re-decodes greedily from the first
/// position whose token probability fell below `threshold`, then re-scores.
/// A revision that lowers the average log-probability is rejected and the
/// original returned unchanged, so reflection never degrades likelihood.
inline Critic greedy_resume_critic(const ModelParams& params, TokenSeq prompt, double lambda,
                                   double threshold = 0.5) {
    return [&params, prompt = std::move(prompt), lambda, threshold](const Trajectory& traj) {
        std::size_t resume = traj.tokens.size();
        for (std::size_t t = 0; t < traj.tokens.size(); ++t) {
            if (std::exp(traj.logprobs[t]) < threshold) {
                resume = t;
                break;
            }
        }
        if (resume == traj.tokens.size()) return traj;

        const std::size_t gen_len = traj.tokens.size();
        Trajectory revised;
        revised.sample_index = traj.sample_index;
        revised.per_step_probs = Matrix(gen_len, params.config.vocab_size);
        revised.per_step_entropy.resize(gen_len);
        revised.logprobs.resize(gen_len);

        DecodeSession session(params);
        session.append(prompt);
        for (std::size_t t = 0; t < gen_len; ++t) {
            const auto logits = session.last_logits();
            auto probs_row = revised.per_step_probs.row(t);
            std::copy(logits.begin(), logits.end(), probs_row.begin());
            softmax_inplace(probs_row);
            revised.per_step_entropy[t] = token_entropy(probs_row);
            const Token chosen = t < resume ? traj.tokens[t] : argmax_token(logits);
            revised.logprobs[t] = std::log(probs_row[chosen]);
            revised.tokens.push_back(chosen);
            session.append(chosen);
        }
        score_trajectory(params, prompt, revised, lambda);
        if (revised.avg_logprob < traj.avg_logprob) return traj;
        return revised;
    };
}

inline Trajectory reflect(const Trajectory& traj, const Critic& critic) {
    INFERLAB_CHECK(static_cast<bool>(critic), "reflect: no critic supplied");
    return critic(traj);
}

// ---------------------------------------------------------------------------
// Consensus
// ---------------------------------------------------------------------------

struct ConsensusPool {
    std::vector<Trajectory> originals;
    std::vector<Trajectory> revisions;
};

using AnswerExtractor = std::function<TokenSeq(const TokenSeq&)>;

/// Answer = the token span after the last occurrence of `separator`, or the
/// whole sequence when the separator never occurs.
inline AnswerExtractor separator_extractor(Token separator) {
    return [separator](const TokenSeq& tokens) {
        auto it = std::find(tokens.rbegin(), tokens.rend(), separator);
        if (it == tokens.rend()) return tokens;
        return TokenSeq(it.base(), tokens.end());
    };
}

/// Majority vote over extracted answers. Ties break toward the answer whose
/// members carry the lowest total score, then lexicographically, so the
/// result is deterministic and stable under duplicating the whole pool.
inline TokenSeq consensus(const ConsensusPool& pool, const AnswerExtractor& extractor) {
    INFERLAB_CHECK(static_cast<bool>(extractor), "consensus: no extractor supplied");
    INFERLAB_CHECK(!pool.originals.empty() || !pool.revisions.empty(), "consensus: empty pool");

    struct Tally {
        std::size_t count = 0;
        double total_score = 0.0;
    };
    std::map<TokenSeq, Tally> tallies;
    auto add = [&](const Trajectory& traj) {
        Tally& tally = tallies[extractor(traj.tokens)];
        tally.count += 1;
        tally.total_score += traj.score;
    };
    for (const auto& traj : pool.originals) add(traj);
    for (const auto& traj : pool.revisions) add(traj);

    const TokenSeq* best = nullptr;
    const Tally* best_tally = nullptr;
    for (const auto& [answer, tally] : tallies) {
        if (!best || tally.count > best_tally->count ||
            (tally.count == best_tally->count && tally.total_score < best_tally->total_score)) {
            best = &answer;
            best_tally = &tally;
        }
    }
    return *best;
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

struct TtsOptions {
    std::size_t num_trajectories = 4; // N
    std::size_t top_k = 2;            // K
    double lambda = 0.5;
    std::size_t gen_len = 24;
    SamplingStrategy strategy = Temperature{1.0};
    std::uint64_t seed = 0;
    Token separator = 0;
};

struct TtsResult {
    std::vector<Trajectory> trajectories;
    std::vector<std::size_t> top_k_indices;
    std::vector<Trajectory> revisions;
    TokenSeq answer;
};

/// Full pipeline: sample, score, top-K filter, reflect, consensus.
inline TtsResult run_tts(const ModelParams& params, std::span<const Token> prompt,
                         const TtsOptions& options, const Critic& critic) {
    INFERLAB_CHECK(options.top_k >= 1 && options.top_k <= options.num_trajectories,
                   "run_tts: top_k must be in [1, n]");
    TtsResult result;
    result.trajectories = sample_trajectories(params, prompt, options.num_trajectories,
                                              options.strategy, options.gen_len, options.seed);
    for (auto& traj : result.trajectories)
        score_trajectory(params, prompt, traj, options.lambda);
    result.top_k_indices = top_k_select(result.trajectories, options.top_k);

    ConsensusPool pool;
    for (const std::size_t i : result.top_k_indices) pool.originals.push_back(result.trajectories[i]);
    for (const auto& traj : pool.originals) result.revisions.push_back(reflect(traj, critic));
    pool.revisions = result.revisions;

    result.answer = consensus(pool, separator_extractor(options.separator));
    return result;
}

} // namespace inferlab
