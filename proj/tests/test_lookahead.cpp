// Copyright (C) 2026 the inferlab authors
// SPDX-License-Identifier: Apache-2.0
//
#include <catch2/catch_amalgamated.hpp>

#include "inferlab/lookahead.hpp"

using namespace inferlab;

namespace {

ModelConfig decode_config(std::uint64_t seed) {
    ModelConfig cfg;
    cfg.seed = seed;
    return cfg; // default desk-scale model: L=2, d_model=32, V=64
}

TokenSeq random_prompt(Rng& rng, std::size_t len, std::size_t vocab) {
    TokenSeq p(len);
    for (auto& t : p) t = static_cast<Token>(rng.below(vocab));
    return p;
}

} // namespace

TEST_CASE("greedy_decode basics") {
    const auto params = init_params(decode_config(1));
    const TokenSeq prompt{1, 2, 3};

    SECTION("zero tokens requested gives an empty output") {
        CHECK(greedy_decode(params, prompt, 0).empty());
    }

    SECTION("one token equals the argmax after the prompt") {
        DecodeSession session(params);
        session.append(prompt);
        const Token expected = argmax_token(session.last_logits());
        const auto out = greedy_decode(params, prompt, 1);
        REQUIRE(out.size() == 1);
        CHECK(out[0] == expected);
    }

    SECTION("decoding is reproducible") {
        CHECK(greedy_decode(params, prompt, 64) == greedy_decode(params, prompt, 64));
    }

    SECTION("empty prompts and overlong requests are rejected") {
        CHECK_THROWS_AS(greedy_decode(params, TokenSeq{}, 4), error);
        CHECK_THROWS_AS(greedy_decode(params, prompt, params.config.max_seq), error);
    }
}

TEST_CASE("lookahead step semantics") {
    const auto params = init_params(decode_config(2));
    const TokenSeq prompt{5, 9, 11, 2};
    LookaheadConfig cfg;
    cfg.window_rows = 4;
    cfg.window_cols = 6;

    SECTION("an injected exact greedy candidate is fully accepted") {
        const auto greedy = greedy_decode(params, prompt, cfg.window_rows);
        LookaheadState state(params, prompt, cfg, 7);
        TokenSeq gram;
        gram.push_back(prompt.back());
        gram.insert(gram.end(), greedy.begin(), greedy.begin() + cfg.window_rows - 1);
        state.inject_candidate(gram);
        const std::size_t committed = state.step();
        CHECK(committed == cfg.window_rows); // N-1 speculative + 1 verification token
        CHECK(state.stats().speculative_tokens == cfg.window_rows - 1);
    }

    SECTION("a candidate failing immediately still commits one token") {
        const auto greedy = greedy_decode(params, prompt, 1);
        LookaheadState state(params, prompt, cfg, 7);
        TokenSeq gram(cfg.window_rows, prompt.back());
        gram[1] = static_cast<Token>((greedy[0] + 1) % params.config.vocab_size);
        state.inject_candidate(gram);
        const std::size_t committed = state.step();
        CHECK(committed >= 1);
        CHECK(state.committed()[prompt.size()] == greedy[0]);
    }

    SECTION("every step commits at least one token and never rewrites history") {
        LookaheadState state(params, prompt, cfg, 7);
        TokenSeq previous = state.committed();
        for (int i = 0; i < 20; ++i) {
            const std::size_t committed = state.step();
            CHECK(committed >= 1);
            const TokenSeq& now = state.committed();
            REQUIRE(now.size() == previous.size() + committed);
            CHECK(std::equal(previous.begin(), previous.end(), now.begin()));
            previous = now;
        }
        CHECK(state.step_count() == 20);
    }

    SECTION("pool hygiene: every entry is an N-gram keyed by its first token") {
        LookaheadState state(params, prompt, cfg, 7);
        for (int i = 0; i < 10; ++i) state.step();
        for (Token key = 0; key < params.config.vocab_size; ++key) {
            for (const auto& gram : state.pool_entries(key)) {
                CHECK(gram.size() == cfg.window_rows);
                CHECK(gram.front() == key);
            }
        }
    }
}

TEST_CASE("lookahead decoding is lossless") {
    SECTION("minimal configuration N=2, L=1, G=1") {
        const auto params = init_params(decode_config(3));
        LookaheadConfig cfg;
        cfg.window_rows = 2;
        cfg.window_cols = 1;
        cfg.max_candidates = 1;
        Rng rng(31);
        const auto prompt = random_prompt(rng, 5, params.config.vocab_size);
        const auto greedy = greedy_decode(params, prompt, 48);
        const auto look = lookahead_decode(params, prompt, 48, cfg, 99);
        CHECK(look.tokens == greedy);
        CHECK(look.stats.steps <= 48);
    }

    SECTION("ten seeded model/prompt pairs, T=64, N=5, L=10") {
        LookaheadConfig cfg; // defaults: N=5, L=10, G=5
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            const auto params = init_params(decode_config(100 + seed));
            Rng rng(Rng::derive(seed, "lookahead-prompt"));
            const auto prompt = random_prompt(rng, 8, params.config.vocab_size);
            const auto greedy = greedy_decode(params, prompt, 64);
            const auto look = lookahead_decode(params, prompt, 64, cfg, seed);
            REQUIRE(look.tokens == greedy);
            CHECK(look.stats.committed_tokens >= 64);
            std::size_t hist_total = 0;
            for (const auto c : look.stats.accept_histogram) hist_total += c;
            CHECK(hist_total == look.stats.steps);
        }
    }

    SECTION("speculation makes progress: mean accepted tokens above one") {
        LookaheadConfig cfg;
        double total_committed = 0.0, total_steps = 0.0;
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            const auto params = init_params(decode_config(500 + seed));
            Rng rng(Rng::derive(seed, "lookahead-accept"));
            const auto prompt = random_prompt(rng, 8, params.config.vocab_size);
            const auto look = lookahead_decode(params, prompt, 96, cfg, seed);
            total_committed += static_cast<double>(look.stats.committed_tokens);
            total_steps += static_cast<double>(look.stats.steps);
        }
        CHECK(total_committed / total_steps > 1.0);
    }

    SECTION("T=0 decodes nothing") {
        const auto params = init_params(decode_config(4));
        const auto look = lookahead_decode(params, TokenSeq{1}, 0, LookaheadConfig{}, 1);
        CHECK(look.tokens.empty());
        CHECK(look.stats.steps == 0);
    }
}
