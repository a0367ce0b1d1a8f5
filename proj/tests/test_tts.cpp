// Copyright (C) 2026 the inferlab authors
// SPDX-License-Identifier: Apache-2.0
//
#include <catch2/catch_amalgamated.hpp>

#include "inferlab/lookahead.hpp"
#include "inferlab/tts.hpp"

using namespace inferlab;

namespace {

ModelConfig tts_config(std::uint64_t seed) {
    ModelConfig cfg;
    cfg.vocab_size = 32;
    cfg.num_layers = 2;
    cfg.d_model = 16;
    cfg.num_q_heads = 2;
    cfg.num_kv_heads = 1;
    cfg.d_ff = 32;
    cfg.max_seq = 128;
    cfg.seed = seed;
    return cfg;
}

Trajectory make_scored(TokenSeq answer_tokens, double score) {
    Trajectory t;
    t.tokens = std::move(answer_tokens);
    t.score = score;
    return t;
}

} // namespace

TEST_CASE("token_entropy") {
    SECTION("one-hot distribution has zero entropy") {
        const std::vector<double> dist{0.0, 1.0, 0.0};
        CHECK(token_entropy(dist) == 0.0);
    }
    SECTION("uniform over 64 symbols gives ln 64") {
        const std::vector<double> dist(64, 1.0 / 64.0);
        CHECK(token_entropy(dist) == Catch::Approx(std::log(64.0)).epsilon(1e-12));
    }
    SECTION("half-half over two of four symbols gives ln 2") {
        const std::vector<double> dist{0.5, 0.5, 0.0, 0.0};
        CHECK(token_entropy(dist) == Catch::Approx(std::log(2.0)).epsilon(1e-12));
    }
    SECTION("unnormalized input is rejected") {
        const std::vector<double> dist{0.5, 0.2};
        CHECK_THROWS_AS(token_entropy(dist), error);
    }
}

TEST_CASE("importance weights") {
    SECTION("uniform attention and uniform gradient norms give all-ones") {
        const std::size_t total = 5, vocab = 4;
        ForwardTrace trace;
        trace.tokens = TokenSeq(total, 0);
        trace.logits = Matrix(total, vocab);
        trace.probs = Matrix(total, vocab, 1.0 / vocab);
        trace.attn_mean = Matrix(total, total, 1.0 / total);
        GradientSites grads;
        grads.d_logits = Matrix(total, vocab);
        for (std::size_t t = 0; t < total; ++t) {
            for (std::size_t v = 0; v < vocab; ++v) grads.d_logits(t, v) = 0.25;
            grads.d_logits(t, 1) = -0.75;
        }
        const auto w = importance_weights(trace, grads, 1);
        REQUIRE(w.size() == total - 1);
        for (const double x : w) CHECK(x == Catch::Approx(1.0).margin(1e-12));
    }

    SECTION("weights sum to T and are scale invariant in the gradients") {
        const auto params = init_params(tts_config(3));
        const TokenSeq prompt{1, 2, 3};
        auto trajs = sample_trajectories(params, prompt, 1, Temperature{1.0}, 12, 5);
        auto& traj = trajs[0];
        TokenSeq all(prompt.begin(), prompt.end());
        all.insert(all.end(), traj.tokens.begin(), traj.tokens.end());
        const auto trace = forward(params, all);
        GradientSites grads;
        grads.d_logits = Matrix(all.size(), params.config.vocab_size);
        for (std::size_t t = 0; t < traj.tokens.size(); ++t) {
            const std::size_t pos = prompt.size() - 1 + t;
            for (std::size_t v = 0; v < params.config.vocab_size; ++v)
                grads.d_logits(pos, v) = trace.probs(pos, v);
            grads.d_logits(pos, traj.tokens[t]) -= 1.0;
        }
        const auto w = importance_weights(trace, grads, prompt.size());
        double sum = 0.0;
        for (const double x : w) sum += x;
        CHECK(sum == Catch::Approx(static_cast<double>(traj.tokens.size())).margin(1e-8));

        // doubling every gradient row leaves the normalized weights unchanged
        for (auto& x : grads.d_logits.data) x *= 2.0;
        const auto w2 = importance_weights(trace, grads, prompt.size());
        for (std::size_t t = 0; t < w.size(); ++t) CHECK(w2[t] == Catch::Approx(w[t]).margin(1e-12));
    }

    SECTION("zero attribution falls back to uniform weights with a warning") {
        const std::size_t total = 4, vocab = 4;
        ForwardTrace trace;
        trace.tokens = TokenSeq(total, 0);
        trace.probs = Matrix(total, vocab, 0.25);
        trace.attn_mean = Matrix(total, total, 0.0);
        GradientSites grads;
        grads.d_logits = Matrix(total, vocab, 0.0);
        int warnings = 0;
        auto previous = log::warn_sink();
        log::warn_sink() = [&warnings](std::string_view) { ++warnings; };
        const auto w = importance_weights(trace, grads, 1);
        log::warn_sink() = previous;
        CHECK(warnings == 1);
        for (const double x : w) CHECK(x == 1.0);
    }
}

TEST_CASE("score composition") {
    SECTION("endpoints: lambda=1 is pure entropy, lambda=0 pure likelihood") {
        CHECK(trajectory_score(2.5, -1.25, 1.0) == Catch::Approx(2.5));
        CHECK(trajectory_score(2.5, -1.25, 0.0) == Catch::Approx(1.25));
    }
    SECTION("deterministic one-hot trajectory scores zero for every lambda") {
        for (double lambda : {0.0, 0.25, 0.5, 1.0})
            CHECK(trajectory_score(0.0, 0.0, lambda) == 0.0);
    }
    SECTION("lambda outside [0,1] is rejected") {
        CHECK_THROWS_AS(trajectory_score(1.0, -1.0, 1.5), error);
        CHECK_THROWS_AS(trajectory_score(1.0, -1.0, -0.1), error);
    }
    SECTION("monotonicity in both arguments") {
        const double base = trajectory_score(1.0, -2.0, 0.5);
        CHECK(trajectory_score(1.5, -2.0, 0.5) > base);
        CHECK(trajectory_score(1.0, -1.5, 0.5) < base);
    }
}

TEST_CASE("sampled trajectories") {
    const auto params = init_params(tts_config(11));
    const TokenSeq prompt{4, 7, 9};

    SECTION("temperature approaching zero reproduces greedy decoding") {
        const auto greedy = greedy_decode(params, prompt, 10);
        const auto trajs = sample_trajectories(params, prompt, 1, Temperature{1e-9}, 10, 3);
        CHECK(trajs[0].tokens == greedy);
    }

    SECTION("four seeded trajectories generally differ") {
        const auto trajs = sample_trajectories(params, prompt, 4, Temperature{1.0}, 16, 5);
        std::size_t distinct = 0;
        for (std::size_t i = 1; i < trajs.size(); ++i)
            if (trajs[i].tokens != trajs[0].tokens) ++distinct;
        CHECK(distinct >= 1);
    }

    SECTION("recorded logprobs match a re-scoring forward pass") {
        const auto trajs = sample_trajectories(params, prompt, 2, Nucleus{0.9}, 12, 7);
        for (const auto& traj : trajs) {
            TokenSeq all(prompt.begin(), prompt.end());
            all.insert(all.end(), traj.tokens.begin(), traj.tokens.end());
            const auto trace = forward(params, all);
            for (std::size_t t = 0; t < traj.tokens.size(); ++t) {
                const double rescored =
                    std::log(trace.probs(prompt.size() - 1 + t, traj.tokens[t]));
                CHECK(std::abs(traj.logprobs[t] - rescored) <= 1e-10);
            }
        }
    }

    SECTION("entropies stay inside [0, ln |V|]") {
        const auto trajs = sample_trajectories(params, prompt, 2, Temperature{1.0}, 12, 9);
        for (const auto& traj : trajs)
            for (const double h : traj.per_step_entropy) {
                CHECK(h >= 0.0);
                CHECK(h <= std::log(static_cast<double>(params.config.vocab_size)));
            }
    }
}

TEST_CASE("top-k selection") {
    std::vector<Trajectory> trajs(3);
    trajs[0].score = 3.0;
    trajs[0].sample_index = 0;
    trajs[1].score = 1.0;
    trajs[1].sample_index = 1;
    trajs[2].score = 2.0;
    trajs[2].sample_index = 2;

    SECTION("K=1 picks the lowest score") {
        const auto top = top_k_select(trajs, 1);
        REQUIRE(top.size() == 1);
        CHECK(top[0] == 1);
    }
    SECTION("K=n returns everything ordered by score") {
        const auto top = top_k_select(trajs, 3);
        CHECK(top == std::vector<std::size_t>{1, 2, 0});
    }
    SECTION("ties break toward the earlier sampling index") {
        trajs[2].score = 1.0;
        const auto top = top_k_select(trajs, 1);
        CHECK(top[0] == 1);
    }
    SECTION("K greater than n is rejected") {
        CHECK_THROWS_AS(top_k_select(trajs, 4), error);
    }
}

TEST_CASE("reflection") {
    const auto params = init_params(tts_config(21));
    const TokenSeq prompt{2, 8, 5};

    SECTION("identity critic returns the original") {
        auto trajs = sample_trajectories(params, prompt, 1, Temperature{1.0}, 8, 1);
        score_trajectory(params, prompt, trajs[0], 0.5);
        const auto revised = reflect(trajs[0], identity_critic());
        CHECK(revised.tokens == trajs[0].tokens);
        CHECK(revised.score == trajs[0].score);
    }

    SECTION("greedy-resume never decreases the average log-probability") {
        const auto critic = greedy_resume_critic(params, prompt, 0.5);
        for (std::uint64_t seed = 0; seed < 25; ++seed) {
            auto trajs = sample_trajectories(params, prompt, 1, Temperature{1.0}, 12, seed);
            score_trajectory(params, prompt, trajs[0], 0.5);
            const auto revised = reflect(trajs[0], critic);
            CHECK(revised.avg_logprob >= trajs[0].avg_logprob);
        }
    }

    SECTION("missing critic is rejected") {
        Trajectory t;
        CHECK_THROWS_AS(reflect(t, Critic{}), error);
    }
}

TEST_CASE("consensus") {
    const auto take_all = [](const TokenSeq& t) { return t; };

    SECTION("unanimous pools return the shared answer") {
        ConsensusPool pool;
        pool.originals = {make_scored({1, 2}, 0.5), make_scored({1, 2}, 0.7)};
        CHECK(consensus(pool, take_all) == TokenSeq{1, 2});
    }

    SECTION("strict majority wins") {
        ConsensusPool pool;
        pool.originals = {make_scored({7}, 0.9), make_scored({7}, 0.8), make_scored({3}, 0.1)};
        CHECK(consensus(pool, take_all) == TokenSeq{7});
    }

    SECTION("ties break toward the lower total score") {
        ConsensusPool pool;
        pool.originals = {make_scored({7}, 0.9), make_scored({3}, 0.1)};
        CHECK(consensus(pool, take_all) == TokenSeq{3});
    }

    SECTION("duplicating every member leaves the answer unchanged") {
        ConsensusPool pool;
        pool.originals = {make_scored({7}, 0.9), make_scored({3}, 0.1), make_scored({3}, 0.8)};
        const auto base = consensus(pool, take_all);
        ConsensusPool doubled = pool;
        doubled.revisions = pool.originals;
        CHECK(consensus(doubled, take_all) == base);
    }

    SECTION("separator extraction takes the span after the last separator") {
        const auto extract = separator_extractor(0);
        CHECK(extract({5, 0, 1, 2}) == TokenSeq{1, 2});
        CHECK(extract({5, 0, 1, 0, 9}) == TokenSeq{9});
        CHECK(extract({5, 4, 3}) == TokenSeq{5, 4, 3});
    }

    SECTION("empty pool is rejected") {
        ConsensusPool pool;
        CHECK_THROWS_AS(consensus(pool, take_all), error);
    }
}

TEST_CASE("full test-time-scaling pipeline") {
    const auto params = init_params(tts_config(33));
    const TokenSeq prompt{4, 1, 12, 3};
    TtsOptions options; // n=4, K=2, lambda=0.5
    options.gen_len = 12;
    options.seed = 17;

    const auto result = run_tts(params, prompt, options, greedy_resume_critic(params, prompt, 0.5));
    REQUIRE(result.trajectories.size() == 4);
    REQUIRE(result.top_k_indices.size() == 2);
    REQUIRE(result.revisions.size() == 2);
    CHECK_FALSE(result.answer.empty());

    for (const auto& traj : result.trajectories) {
        double sum = 0.0;
        for (const double w : traj.weights) sum += w;
        CHECK(sum == Catch::Approx(static_cast<double>(options.gen_len)).margin(1e-8));
    }

    SECTION("pipeline is deterministic") {
        const auto again =
            run_tts(params, prompt, options, greedy_resume_critic(params, prompt, 0.5));
        CHECK(again.answer == result.answer);
        for (std::size_t i = 0; i < 4; ++i) {
            CHECK(again.trajectories[i].tokens == result.trajectories[i].tokens);
            CHECK(again.trajectories[i].score == result.trajectories[i].score);
        }
    }
}
