// Copyright (C) 2026 the inferlab authors
// SPDX-License-Identifier: Apache-2.0
//
// Lossless parallel decoding. A trajectory window of N retained Jacobi
// iterations over L lookahead slots speculates future tokens; vertical
// N-grams feed a candidate pool; a verify-commit pass checks pool candidates
// against the argmax continuation and only ever commits tokens greedy
// decoding would have produced. Speculation quality affects speed, never
// output content.
#pragma once

#include <algorithm>
#include <deque>
#include <unordered_map>
#include <vector>

#include "inferlab/model.hpp"
#include "inferlab/session.hpp"

namespace inferlab {

struct LookaheadConfig {
    std::size_t window_rows = 5;    // N: retained Jacobi iterations
    std::size_t window_cols = 10;   // L: lookahead positions
    std::size_t max_candidates = 5; // G: candidates verified per step
    std::size_t pool_capacity = 64; // LRU entries per leading token

    void validate() const {
        INFERLAB_CHECK_CONFIG(window_rows >= 2, "lookahead needs window_rows >= 2");
        INFERLAB_CHECK_CONFIG(window_cols >= 1 && max_candidates >= 1 && pool_capacity >= 1,
                              "lookahead config values must be >= 1");
    }
};

struct LookaheadStats {
    std::size_t steps = 0;
    std::size_t committed_tokens = 0;     // includes the verification token of each step
    std::size_t speculative_tokens = 0;   // committed via pool verification only
    std::vector<std::size_t> accept_histogram; // index = speculative run length per step

    double mean_accept() const {
        return steps == 0 ? 0.0
                          : static_cast<double>(committed_tokens) / static_cast<double>(steps);
    }
};

/// Greedy reference decoder: T tokens, each the argmax continuation with
/// lowest-index tie-break, exactly T sequential forward extensions.
inline TokenSeq greedy_decode(const ModelParams& params, std::span<const Token> prompt,
                              std::size_t count) {
    INFERLAB_CHECK(!prompt.empty(), "greedy_decode: empty prompt");
    INFERLAB_CHECK(prompt.size() + count <= params.config.max_seq,
                   "greedy_decode: prompt + count exceeds max_seq");
    TokenSeq out;
    if (count == 0) return out;
    DecodeSession session(params);
    session.append(prompt);
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const Token next = argmax_token(session.last_logits());
        out.push_back(next);
        session.append(next);
    }
    return out;
}

/// Decode-session state of one lookahead run. The window holds the last
/// N-1 iterations' guesses; each step fills a fresh bottom row from diagonal
/// contexts, harvests vertical N-grams into the pool, then verifies up to G
/// candidates keyed by the last committed token.
class LookaheadState {
public:
    LookaheadState(const ModelParams& params, std::span<const Token> prompt,
                   const LookaheadConfig& config, std::uint64_t seed)
        : config_(config),
          session_(params),
          rng_(Rng::derive(seed, "window-init")),
          vocab_(params.config.vocab_size) {
        config.validate();
        INFERLAB_CHECK(!prompt.empty(), "lookahead: empty prompt");
        session_.append(prompt);
        prompt_len_ = prompt.size();
        rows_.assign(config.window_rows - 1, TokenSeq(config.window_cols));
        for (auto& row : rows_)
            for (auto& t : row) t = random_token();
    }

    std::size_t prompt_length() const { return prompt_len_; }
    std::size_t emitted() const { return session_.size() - prompt_len_; }
    std::size_t step_count() const { return stats_.steps; }
    const TokenSeq& committed() const { return session_.tokens(); }
    const LookaheadStats& stats() const { return stats_; }

    std::vector<TokenSeq> pool_entries(Token key) const {
        auto it = pool_.find(key);
        return it == pool_.end() ? std::vector<TokenSeq>{}
                                 : std::vector<TokenSeq>(it->second.begin(), it->second.end());
    }

    /// Test hook: pre-seeds a candidate as if it had been harvested.
    void inject_candidate(const TokenSeq& gram) {
        INFERLAB_CHECK(gram.size() == config_.window_rows, "candidate must be an N-gram");
        insert_gram(gram);
    }

    /// One predict-verify-commit step; commits at least one token.
    std::size_t step() {
        const std::size_t committed_len = session_.size();
        const std::size_t n = config_.window_rows;
        const std::size_t l = config_.window_cols;

        // Lookahead phase: fill the bottom row in parallel slots. Slot j
        // extends the committed prefix with the longest available diagonal
        // of prior-iteration guesses (up to N-1 tokens).
        TokenSeq new_row(l);
        for (std::size_t j = 0; j < l; ++j) {
            const std::size_t want = std::min<std::size_t>(n - 1, j);
            const std::size_t room = session_.capacity() - committed_len;
            const std::size_t depth = std::min(want, room);
            if (depth == 0) {
                new_row[j] = argmax_token(session_.last_logits());
                continue;
            }
            diag_.clear();
            for (std::size_t m = 0; m < want; ++m) diag_.push_back(rows_[m][j - want + m]);
            if (depth < want) diag_.erase(diag_.begin(), diag_.begin() + (want - depth));
            session_.append(diag_);
            new_row[j] = argmax_token(session_.last_logits());
            session_.truncate(committed_len);
        }

        // Harvest vertical N-grams.
        for (std::size_t j = 0; j < l; ++j) {
            TokenSeq gram;
            gram.reserve(n);
            for (const auto& row : rows_) gram.push_back(row[j]);
            gram.push_back(new_row[j]);
            insert_gram(gram);
        }

        // Verification phase: each candidate's speculative tail is evaluated
        // in one batched forward; token r is accepted iff it equals the
        // argmax continuation of the verified context before it. The argmax
        // at the first failing (or final) position is the bonus token.
        const Token pred0 = argmax_token(session_.last_logits());
        std::size_t best_run = 0;
        Token best_bonus = pred0;
        TokenSeq best_tail;

        auto it = pool_.find(session_.tokens().back());
        if (it != pool_.end()) {
            std::vector<const TokenSeq*> candidates;
            candidates.reserve(it->second.size());
            for (const auto& gram : it->second) candidates.push_back(&gram);
            if (candidates.size() > config_.max_candidates) {
                // Keep the G candidates agreeing longest with the fresh row.
                std::stable_sort(candidates.begin(), candidates.end(),
                                 [&new_row](const TokenSeq* a, const TokenSeq* b) {
                                     return window_agreement(*a, new_row) >
                                            window_agreement(*b, new_row);
                                 });
                candidates.resize(config_.max_candidates);
            }
            for (const TokenSeq* gram : candidates) {
                const std::size_t room = session_.capacity() - committed_len;
                const std::size_t tail_len = std::min(gram->size() - 1, room);
                if (tail_len == 0) continue;
                session_.append(std::span<const Token>(gram->data() + 1, tail_len));
                std::size_t run = 0;
                Token expected = pred0;
                while (run < tail_len) {
                    if ((*gram)[1 + run] != expected) break;
                    ++run;
                    expected = argmax_token(session_.logits_at(committed_len + run - 1));
                }
                session_.truncate(committed_len);
                if (run > best_run) {
                    best_run = run;
                    best_bonus = expected;
                    best_tail.assign(gram->begin() + 1, gram->begin() + 1 + run);
                }
            }
        }

        // Commit the verified run plus the token the verification pass
        // itself produced.
        session_.append(best_tail);
        session_.append(best_bonus);
        const std::size_t committed_now = best_run + 1;

        stats_.steps += 1;
        stats_.committed_tokens += committed_now;
        stats_.speculative_tokens += best_run;
        if (stats_.accept_histogram.size() < n) stats_.accept_histogram.resize(n, 0);
        stats_.accept_histogram[best_run] += 1;

        // Window update: retire the oldest row, keep the fresh one, then
        // shift columns left by the number of accepted tokens; vacated slots
        // are re-seeded randomly (any content is correct, only speed moves).
        rows_.erase(rows_.begin());
        rows_.push_back(std::move(new_row));
        const std::size_t shift = std::min(committed_now, l);
        for (auto& row : rows_) {
            if (shift < l) std::copy(row.begin() + shift, row.end(), row.begin());
            for (std::size_t j = l - shift; j < l; ++j) row[j] = random_token();
        }
        return committed_now;
    }

private:
    static std::size_t window_agreement(const TokenSeq& gram, const TokenSeq& row) {
        const std::size_t limit = std::min(gram.size() - 1, row.size());
        std::size_t i = 0;
        while (i < limit && gram[1 + i] == row[i]) ++i;
        return i;
    }

    Token random_token() { return static_cast<Token>(rng_.below(vocab_)); }

    void insert_gram(const TokenSeq& gram) {
        auto& bucket = pool_[gram.front()];
        auto found = std::find(bucket.begin(), bucket.end(), gram);
        if (found != bucket.end()) {
            // Move-to-front keeps recently confirmed grams alive.
            bucket.erase(found);
            bucket.push_front(gram);
            return;
        }
        bucket.push_front(gram);
        if (bucket.size() > config_.pool_capacity) bucket.pop_back();
    }

    LookaheadConfig config_;
    DecodeSession session_;
    Rng rng_;
    std::size_t vocab_;
    std::size_t prompt_len_ = 0;
    std::vector<TokenSeq> rows_; // N-1 retained iterations, oldest first
    std::unordered_map<Token, std::deque<TokenSeq>> pool_;
    LookaheadStats stats_;
    TokenSeq diag_;
};

inline std::size_t lookahead_step(LookaheadState& state) { return state.step(); }

struct LookaheadResult {
    TokenSeq tokens;
    LookaheadStats stats;
};

/// Decodes `count` tokens; the output is identical to greedy_decode on the
/// same prompt, in fewer sequential steps when speculation lands.
inline LookaheadResult lookahead_decode(const ModelParams& params, std::span<const Token> prompt,
                                        std::size_t count, const LookaheadConfig& config,
                                        std::uint64_t seed) {
    config.validate();
    INFERLAB_CHECK(!prompt.empty(), "lookahead_decode: empty prompt");
    INFERLAB_CHECK(prompt.size() + count <= params.config.max_seq,
                   "lookahead_decode: prompt + count exceeds max_seq");

    LookaheadResult result;
    result.stats.accept_histogram.assign(config.window_rows, 0);
    if (count == 0) return result;

    LookaheadState state(params, prompt, config, seed);
    while (state.emitted() < count) state.step();
    result.stats = state.stats();
    const TokenSeq& all = state.committed();
    result.tokens.assign(all.begin() + static_cast<std::ptrdiff_t>(prompt.size()),
                         all.begin() + static_cast<std::ptrdiff_t>(prompt.size() + count));
    return result;
}

} // namespace inferlab
