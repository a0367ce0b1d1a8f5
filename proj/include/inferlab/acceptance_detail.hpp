// Copyright (C) 2026 the inferlab authors
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include "inferlab/attention.hpp"
#include "inferlab/grpo.hpp"
#include "inferlab/harness.hpp"
#include "inferlab/lookahead.hpp"
#include "inferlab/paged_kv.hpp"
#include "inferlab/pruning.hpp"
#include "inferlab/quantize.hpp"
#include "inferlab/tts.hpp"

namespace inferlab::acceptance_detail {

// --------------------------------------------------------------------------
// 1 + 2: lossless lookahead decoding and step compression
// --------------------------------------------------------------------------

struct LookaheadReport {
    std::size_t total_runs = 0;
    std::size_t exact_matches = 0;
    double compression = 0.0;
    double mean_accept = 0.0;
};

inline LookaheadReport lookahead_losslessness(std::uint64_t root) {
    LookaheadReport report;
    report.total_runs = 100;
    const std::size_t count = 256;
    LookaheadConfig lc; // N=5, L=10
    lc.max_candidates = 5;

    double steps_total = 0.0, tokens_total = 0.0;
    for (std::uint64_t i = 0; i < report.total_runs; ++i) {
        ModelConfig mc;
        mc.seed = Rng::derive(root, "acc1-model", i);
        const auto params = init_params(mc);
        Rng prompt_rng(Rng::derive(root, "acc1-prompt", i));
        TokenSeq prompt(8);
        for (auto& t : prompt) t = static_cast<Token>(prompt_rng.below(mc.vocab_size));

        const auto greedy = greedy_decode(params, prompt, count);
        const auto look = lookahead_decode(params, prompt, count, lc, Rng::derive(root, "acc1-look", i));
        if (look.tokens == greedy) ++report.exact_matches;
        steps_total += static_cast<double>(look.stats.steps);
        tokens_total += static_cast<double>(count);
    }
    report.compression = tokens_total / steps_total;
    report.mean_accept = report.compression;
    return report;
}

// --------------------------------------------------------------------------
// 3: blockwise attention equivalence
// --------------------------------------------------------------------------

struct BlockwiseReport {
    double worst_f64 = 0.0;
    double worst_f32 = 0.0;
    std::size_t cases = 0;
};

template <typename T>
double blockwise_case(Rng& rng, std::size_t trial) {
    const std::size_t n = 1 + rng.below(64);
    const std::size_t dk = 1 + rng.below(32);
    const std::size_t dv = 1 + rng.below(32);
    const bool causal = rng.below(2) == 1;

    // Cycle through block-size classes: single row/col, divisor, ragged
    // non-divisor, and whole-problem blocks.
    BlockSpec spec;
    switch (trial % 4) {
        case 0: spec = {1, 1}; break;
        case 1: {
            std::size_t d = 1 + rng.below(n);
            while (n % d != 0) --d;
            spec = {d, d};
            break;
        }
        case 2: spec = {1 + rng.below(n + 3), 1 + rng.below(n + 3)}; break;
        default: spec = {n, n}; break;
    }

    AttentionInput<T> in;
    in.q = Mat<T>(n, dk);
    in.k = Mat<T>(n, dk);
    in.v = Mat<T>(n, dv);
    in.causal = causal;
    for (auto& x : in.q.data) x = static_cast<T>(rng.normal());
    for (auto& x : in.k.data) x = static_cast<T>(rng.normal());
    for (auto& x : in.v.data) x = static_cast<T>(rng.normal());
    return max_abs_diff(flash_attention(in, spec), naive_attention(in));
}

inline BlockwiseReport blockwise_equivalence(std::uint64_t root) {
    BlockwiseReport report;
    for (std::size_t trial = 0; trial < 100; ++trial) {
        Rng rng64(Rng::derive(root, "acc3-f64", trial));
        report.worst_f64 = std::max(report.worst_f64, blockwise_case<double>(rng64, trial));
        Rng rng32(Rng::derive(root, "acc3-f32", trial));
        report.worst_f32 = std::max(report.worst_f32, blockwise_case<float>(rng32, trial));
        report.cases += 2;
    }
    return report;
}

// --------------------------------------------------------------------------
// 4: paged cache equivalence, block-count law, copy-on-write isolation
// --------------------------------------------------------------------------

struct PagedReport {
    double worst_diff = 0.0;
    bool block_law_held = true;
    std::size_t traces = 0;
    std::size_t fork_scenarios = 0;
    std::size_t fork_isolated = 0;
};

inline PagedReport paged_cache_equivalence(std::uint64_t root) {
    PagedReport report;
    report.traces = 50;
    const std::size_t block_sizes[] = {4, 8, 16};

    for (std::uint64_t trace = 0; trace < report.traces; ++trace) {
        Rng rng(Rng::derive(root, "acc4-trace", trace));
        PagedCacheConfig cfg;
        cfg.block_size = block_sizes[rng.below(3)];
        cfg.max_blocks = 256;
        cfg.layers = 1 + rng.below(2);
        cfg.kv_heads = 1 + rng.below(2);
        cfg.head_dim = 4 + rng.below(5);
        PagedKvCache cache(cfg);
        const auto seq = cache.alloc_sequence();

        const std::size_t len = 1 + rng.below(200);
        const std::size_t width = cfg.layers * cfg.kv_heads * cfg.head_dim;
        std::vector<std::vector<double>> keys, values;
        for (std::size_t i = 0; i < len; ++i) {
            std::vector<double> k(width), v(width);
            for (auto& x : k) x = rng.normal();
            for (auto& x : v) x = rng.normal();
            cache.append_kv(seq, k, v);
            keys.push_back(std::move(k));
            values.push_back(std::move(v));
            const std::size_t expected = (i + 1 + cfg.block_size - 1) / cfg.block_size;
            if (cache.block_table(seq).size() != expected) report.block_law_held = false;
        }

        for (std::size_t l = 0; l < cfg.layers; ++l)
            for (std::size_t h = 0; h < cfg.kv_heads; ++h) {
                std::vector<double> q(cfg.head_dim);
                for (auto& x : q) x = rng.normal();
                const auto paged = cache.paged_attention(q, seq, l, h);

                const std::size_t off = (l * cfg.kv_heads + h) * cfg.head_dim;
                std::vector<double> scores(len);
                double best = -1e300;
                for (std::size_t r = 0; r < len; ++r) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < cfg.head_dim; ++i)
                        s += q[i] * keys[r][off + i];
                    scores[r] = s / std::sqrt(static_cast<double>(cfg.head_dim));
                    best = std::max(best, scores[r]);
                }
                double z = 0.0;
                for (double& s : scores) {
                    s = std::exp(s - best);
                    z += s;
                }
                for (std::size_t i = 0; i < cfg.head_dim; ++i) {
                    double acc = 0.0;
                    for (std::size_t r = 0; r < len; ++r)
                        acc += (scores[r] / z) * values[r][off + i];
                    report.worst_diff = std::max(report.worst_diff, std::abs(acc - paged[i]));
                }
            }
    }

    report.fork_scenarios = 20;
    for (std::uint64_t scenario = 0; scenario < report.fork_scenarios; ++scenario) {
        Rng rng(Rng::derive(root, "acc4-fork", scenario));
        PagedCacheConfig cfg;
        cfg.block_size = 4;
        cfg.max_blocks = 128;
        cfg.layers = 1;
        cfg.kv_heads = 1;
        cfg.head_dim = 4;
        PagedKvCache cache(cfg);
        const auto parent = cache.alloc_sequence();
        const std::size_t len = 1 + rng.below(20);
        auto append_one = [&](PagedKvCache::SeqId s) {
            std::vector<double> k(4), v(4);
            for (auto& x : k) x = rng.normal();
            for (auto& x : v) x = rng.normal();
            cache.append_kv(s, k, v);
        };
        for (std::size_t i = 0; i < len; ++i) append_one(parent);

        const auto child = cache.fork_prefix(parent);
        const auto parent_keys = cache.gather_keys(parent, 0, 0);
        const auto parent_values = cache.gather_values(parent, 0, 0);
        const std::size_t child_appends = 1 + rng.below(10);
        for (std::size_t i = 0; i < child_appends; ++i) append_one(child);
        const auto child_keys_before = cache.gather_keys(child, 0, 0);
        for (std::size_t i = 0; i < 3; ++i) append_one(parent);

        const bool parent_intact = cache.gather_keys(parent, 0, 0).size() ==
                                       parent_keys.size() + 3 * 4 &&
                                   std::equal(parent_keys.begin(), parent_keys.end(),
                                              cache.gather_keys(parent, 0, 0).begin()) &&
                                   std::equal(parent_values.begin(), parent_values.end(),
                                              cache.gather_values(parent, 0, 0).begin());
        const auto child_keys_after = cache.gather_keys(child, 0, 0);
        const bool child_intact = std::equal(child_keys_before.begin(), child_keys_before.end(),
                                             child_keys_after.begin());
        if (parent_intact && child_intact) ++report.fork_isolated;
    }
    return report;
}

// --------------------------------------------------------------------------
// 5: quantization error law
// --------------------------------------------------------------------------

struct QuantReport {
    bool law_held = true;
    std::size_t values_checked = 0;
    double worst_int4 = 0.0;
    double worst_int8 = 0.0;
};

inline QuantReport quantization_error_law(std::uint64_t root) {
    QuantReport report;
    const std::size_t groups = 2000;
    const std::size_t group_size = 500;
    for (std::size_t g = 0; g < groups; ++g) {
        Rng rng(Rng::derive(root, "acc5-group", g));
        const double spread = std::exp(3.0 * rng.normal());
        std::vector<double> values(group_size);
        for (auto& v : values) v = spread * rng.normal();

        const auto q4 = quantize_group(values, 4);
        const auto q8 = quantize_group(values, 8);
        const auto b4 = dequantize_group(q4);
        const auto b8 = dequantize_group(q8);
        for (std::size_t i = 0; i < group_size; ++i) {
            const double e4 = std::abs(values[i] - b4[i]);
            const double e8 = std::abs(values[i] - b8[i]);
            if (e4 > q4.scale / 2 + 1e-12 || e8 > q8.scale / 2 + 1e-12) report.law_held = false;
            report.worst_int4 = std::max(report.worst_int4, e4);
            report.worst_int8 = std::max(report.worst_int8, e8);
        }
        report.values_checked += group_size;
    }
    return report;
}

// --------------------------------------------------------------------------
// 6: gradient fidelity against central finite differences
// --------------------------------------------------------------------------

struct GradientReport {
    double worst_site = 0.0;
    double worst_param = 0.0;
    double worst_grpo = 0.0;
    double worst_prune = 0.0;
    std::size_t seeds = 0;
};

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

inline GradientReport gradient_fidelity(std::uint64_t root) {
    GradientReport report;
    report.seeds = 20;
    const double h = 1e-4;

    ModelConfig small;
    small.vocab_size = 16;
    small.num_layers = 2;
    small.d_model = 8;
    small.num_q_heads = 2;
    small.num_kv_heads = 1;
    small.d_ff = 8;
    small.max_seq = 16;

    for (std::uint64_t seed = 0; seed < report.seeds; ++seed) {
        small.seed = Rng::derive(root, "acc6-model", seed);
        auto params = init_params(small);
        Rng rng(Rng::derive(root, "acc6-data", seed));
        TokenSeq tokens(5), targets(5);
        for (auto& t : tokens) t = static_cast<Token>(rng.below(small.vocab_size));
        for (auto& t : targets) t = static_cast<Token>(rng.below(small.vocab_size));

        const auto trace = forward(params, tokens);
        const auto grads = backward(params, trace, targets);

        auto probed_loss = [&](ForwardProbe::Site site, std::size_t layer, std::size_t pos,
                               std::size_t index, double delta) {
            ForwardProbe probe{site, layer, pos, index, delta};
            ForwardOptions options;
            options.probe = &probe;
            return nll_loss(forward(params, tokens, options), targets);
        };

        for (std::size_t l = 0; l < small.num_layers; ++l)
            for (std::size_t t = 0; t < tokens.size(); ++t) {
                for (std::size_t j = 0; j < small.d_ff; ++j) {
                    const double up = probed_loss(ForwardProbe::Site::ffn_activation, l, t, j, h);
                    const double down =
                        probed_loss(ForwardProbe::Site::ffn_activation, l, t, j, -h);
                    report.worst_site = std::max(
                        report.worst_site, rel_err(grads.sites.d_ffn[l](t, j), (up - down) / (2 * h)));
                }
                for (std::size_t i = 0; i < small.d_model; ++i) {
                    const double up = probed_loss(ForwardProbe::Site::residual_output, l, t, i, h);
                    const double down =
                        probed_loss(ForwardProbe::Site::residual_output, l, t, i, -h);
                    report.worst_site =
                        std::max(report.worst_site,
                                 rel_err(grads.sites.d_residual[l](t, i), (up - down) / (2 * h)));
                }
            }

        auto fd_param = [&](Matrix& live, const Matrix& grad, std::size_t stride) {
            for (std::size_t i = seed % stride; i < live.data.size(); i += stride) {
                const double keep = live.data[i];
                live.data[i] = keep + h;
                const double up = nll_loss(forward(params, tokens), targets);
                live.data[i] = keep - h;
                const double down = nll_loss(forward(params, tokens), targets);
                live.data[i] = keep;
                report.worst_param =
                    std::max(report.worst_param, rel_err(grad.data[i], (up - down) / (2 * h)));
            }
        };
        fd_param(params.token_embedding, grads.param_grads.token_embedding, 19);
        fd_param(params.unembedding, grads.param_grads.unembedding, 17);
        fd_param(params.layers[0].w_q, grads.param_grads.layers[0].w_q, 13);
        fd_param(params.layers[1].w2, grads.param_grads.layers[1].w2, 13);
        fd_param(params.layers[0].w1_up, grads.param_grads.layers[0].w1_up, 13);
    }

    // GRPO objective gradient on a one-layer |V|=8 policy.
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        ModelConfig pc;
        pc.vocab_size = 8;
        pc.num_layers = 1;
        pc.d_model = 8;
        pc.num_q_heads = 2;
        pc.num_kv_heads = 1;
        pc.d_ff = 8;
        pc.max_seq = 16;
        pc.seed = Rng::derive(root, "acc6-grpo-sampler", seed);
        const auto sampler = init_params(pc);
        GrpoTask task = make_copy_task(1, 4, pc.vocab_size, Rng::derive(root, "acc6-grpo-task", seed));
        const auto groups = sample_groups(sampler, task, 2, Rng::derive(root, "acc6-grpo-draw", seed));
        pc.seed = Rng::derive(root, "acc6-grpo-policy", seed);
        auto policy = init_params(pc);
        pc.seed = Rng::derive(root, "acc6-grpo-ref", seed);
        const auto reference = init_params(pc);

        const auto analytic = grpo_objective(groups, policy, reference, 0.2, 0.05);
        auto fd_objective = [&](Matrix& live, const Matrix& grad, std::size_t stride) {
            for (std::size_t i = 0; i < live.data.size(); i += stride) {
                const double keep = live.data[i];
                live.data[i] = keep + 1e-5;
                const double up = grpo_objective(groups, policy, reference, 0.2, 0.05).value;
                live.data[i] = keep - 1e-5;
                const double down = grpo_objective(groups, policy, reference, 0.2, 0.05).value;
                live.data[i] = keep;
                report.worst_grpo =
                    std::max(report.worst_grpo, rel_err(grad.data[i], (up - down) / 2e-5));
            }
        };
        fd_objective(policy.unembedding, analytic.grads.unembedding, 23);
        fd_objective(policy.layers[0].w_v, analytic.grads.layers[0].w_v, 11);
        fd_objective(policy.layers[0].w1_gate, analytic.grads.layers[0].w1_gate, 17);
    }

    // Pruning relaxed-objective gradient with respect to gate logits.
    for (std::uint64_t seed = 0; seed < report.seeds; ++seed) {
        small.seed = Rng::derive(root, "acc6-prune-model", seed);
        const auto params = init_params(small);
        Rng rng(Rng::derive(root, "acc6-prune-data", seed));
        EvalBatch batch(2);
        for (auto& sample : batch) {
            sample.tokens.resize(5);
            sample.targets.resize(5);
            for (auto& t : sample.tokens) t = static_cast<Token>(rng.below(small.vocab_size));
            for (auto& t : sample.targets) t = static_cast<Token>(rng.below(small.vocab_size));
        }
        GateSet gates = GateSet::for_model(params, 1.2, 0.6);
        Rng gate_rng(Rng::derive(root, "acc6-prune-gates", seed));
        realize_gates(gates, gate_rng);
        const auto analytic = prune_objective_gate_grads(params, gates, batch, 0.05, 0.02);

        auto fd_gate = [&](double& alpha, double analytic_grad) {
            const double keep = alpha;
            alpha = std::exp(std::log(keep) + h);
            GateSet up_gates = gates;
            refresh_gates_from_noise(up_gates);
            const double up = prune_step_objective(params, up_gates, batch, 0.05, 0.02);
            alpha = std::exp(std::log(keep) - h);
            GateSet down_gates = gates;
            refresh_gates_from_noise(down_gates);
            const double down = prune_step_objective(params, down_gates, batch, 0.05, 0.02);
            alpha = keep;
            report.worst_prune =
                std::max(report.worst_prune, rel_err(analytic_grad, (up - down) / (2 * h)));
        };
        for (std::size_t l = 0; l < gates.layer_alpha.size(); ++l) {
            fd_gate(gates.layer_alpha[l], analytic.layer[l]);
            for (std::size_t j = 0; j < gates.neuron_alpha[l].size(); j += 3)
                fd_gate(gates.neuron_alpha[l][j], analytic.neuron[l][j]);
        }
    }
    return report;
}

// --------------------------------------------------------------------------
// 7: test-time scaling invariants
// --------------------------------------------------------------------------

struct TtsReport {
    std::size_t trajectories = 0;
    double worst_weight_dev = 0.0;
    bool entropy_bounds_held = true;
    bool endpoints_held = true;
    bool consensus_stable = true;
    bool critic_monotone = true;
};

inline TtsReport tts_invariants(std::uint64_t root) {
    TtsReport report;
    const std::size_t groups = 50;
    const std::size_t gen_len = 24;

    for (std::uint64_t g = 0; g < groups; ++g) {
        ModelConfig mc;
        mc.vocab_size = 32;
        mc.num_layers = 2;
        mc.d_model = 16;
        mc.num_q_heads = 2;
        mc.num_kv_heads = 1;
        mc.d_ff = 32;
        mc.max_seq = 64;
        mc.seed = Rng::derive(root, "acc7-model", g);
        const auto params = init_params(mc);
        Rng prng(Rng::derive(root, "acc7-prompt", g));
        TokenSeq prompt(6);
        for (auto& t : prompt) t = static_cast<Token>(prng.below(mc.vocab_size));

        TtsOptions options; // n=4, K=2, lambda=0.5
        options.gen_len = gen_len;
        options.seed = Rng::derive(root, "acc7-sample", g);
        const auto critic = greedy_resume_critic(params, prompt, options.lambda);
        const auto result = run_tts(params, prompt, options, critic);
        report.trajectories += result.trajectories.size();

        const double ln_v = std::log(static_cast<double>(mc.vocab_size));
        for (const auto& traj : result.trajectories) {
            double sum = 0.0;
            for (const double w : traj.weights) sum += w;
            report.worst_weight_dev =
                std::max(report.worst_weight_dev, std::abs(sum - static_cast<double>(gen_len)));
            for (const double ht : traj.per_step_entropy)
                if (ht < 0.0 || ht > ln_v + 1e-12) report.entropy_bounds_held = false;
        }

        // Lambda endpoint identities: at 1 the ranking is pure weighted
        // entropy, at 0 pure (negated) likelihood.
        auto ranking = [&](auto key) {
            std::vector<std::size_t> order(result.trajectories.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                const double ka = key(result.trajectories[a]);
                const double kb = key(result.trajectories[b]);
                if (ka != kb) return ka < kb;
                return a < b;
            });
            return order;
        };
        const auto by_lambda1 = ranking([](const Trajectory& t) {
            return trajectory_score(t.weighted_entropy, t.avg_logprob, 1.0);
        });
        const auto by_entropy = ranking([](const Trajectory& t) { return t.weighted_entropy; });
        const auto by_lambda0 = ranking([](const Trajectory& t) {
            return trajectory_score(t.weighted_entropy, t.avg_logprob, 0.0);
        });
        const auto by_likelihood = ranking([](const Trajectory& t) { return -t.avg_logprob; });
        if (by_lambda1 != by_entropy || by_lambda0 != by_likelihood)
            report.endpoints_held = false;

        // Consensus stability under duplicating the whole pool.
        ConsensusPool pool;
        for (const std::size_t i : result.top_k_indices)
            pool.originals.push_back(result.trajectories[i]);
        pool.revisions = result.revisions;
        const auto extractor = separator_extractor(0);
        const auto answer = consensus(pool, extractor);
        ConsensusPool doubled = pool;
        doubled.originals.insert(doubled.originals.end(), pool.originals.begin(),
                                 pool.originals.end());
        doubled.revisions.insert(doubled.revisions.end(), pool.revisions.begin(),
                                 pool.revisions.end());
        if (consensus(doubled, extractor) != answer) report.consensus_stable = false;

        for (std::size_t k = 0; k < result.top_k_indices.size(); ++k) {
            const auto& original = result.trajectories[result.top_k_indices[k]];
            if (result.revisions[k].avg_logprob < original.avg_logprob)
                report.critic_monotone = false;
        }
    }
    return report;
}

// --------------------------------------------------------------------------
// 8: pruning structural equivalence
// --------------------------------------------------------------------------

struct PruneReport {
    double worst_diff = 0.0;
    bool param_law_exact = true;
    double worst_spearman = 1.0;
    std::size_t masks = 0;
    std::size_t inputs = 0;
};

inline PruneReport pruning_structural_equivalence(std::uint64_t root) {
    PruneReport report;
    report.masks = 10;
    report.inputs = 50;

    ModelConfig mc;
    mc.vocab_size = 16;
    mc.num_layers = 2;
    mc.d_model = 8;
    mc.num_q_heads = 2;
    mc.num_kv_heads = 1;
    mc.d_ff = 10;
    mc.max_seq = 16;
    mc.seed = Rng::derive(root, "acc8-model");
    const auto params = init_params(mc);

    for (std::uint64_t m = 0; m < report.masks; ++m) {
        Rng rng(Rng::derive(root, "acc8-mask", m));
        std::vector<std::vector<bool>> keep(mc.num_layers, std::vector<bool>(mc.d_ff, true));
        for (auto& layer : keep) {
            for (std::size_t j = 0; j < layer.size(); ++j)
                if (rng.below(3) == 0) layer[j] = false;
            if (std::none_of(layer.begin(), layer.end(), [](bool b) { return b; }))
                layer[0] = true;
        }
        GateSet gates = GateSet::ones(params);
        std::size_t dropped = 0;
        for (std::size_t l = 0; l < keep.size(); ++l)
            for (std::size_t j = 0; j < keep[l].size(); ++j)
                if (!keep[l][j]) {
                    gates.neuron_gate[l][j] = 0.0;
                    ++dropped;
                }
        const auto pruned = apply_width_prune(params, keep);
        if (params.parameter_count() - pruned.parameter_count() != dropped * 3 * mc.d_model)
            report.param_law_exact = false;

        ForwardOptions options;
        options.gates = &gates;
        for (std::size_t i = 0; i < report.inputs / report.masks; ++i) {
            TokenSeq tokens(6);
            for (auto& t : tokens) t = static_cast<Token>(rng.below(mc.vocab_size));
            const auto gated = forward(params, tokens, options);
            const auto sliced = forward(pruned, tokens);
            report.worst_diff = std::max(report.worst_diff, max_abs_diff(gated.logits, sliced.logits));
        }
    }

    // Importance-vs-ablation rank agreement on the d_ff=8 oracle model whose
    // w2 columns carry a geometric magnitude spread (a random init leaves all
    // neurons statistically interchangeable).
    ModelConfig oc = mc;
    oc.d_ff = 8;
    oc.seed = 42;
    auto oracle = init_params(oc);
    for (std::size_t l = 0; l < oc.num_layers; ++l)
        for (std::size_t j = 0; j < 8; ++j) {
            const double f = 0.25 * std::pow(40.0, static_cast<double>(j) / 7.0);
            for (std::size_t i = 0; i < oc.d_model; ++i) oracle.layers[l].w2(i, j) *= f;
        }
    Rng brng(5003);
    EvalBatch batch(8);
    for (auto& sample : batch) {
        sample.tokens.resize(10);
        sample.targets.resize(10);
        for (auto& t : sample.tokens) t = static_cast<Token>(brng.below(oc.vocab_size));
        for (auto& t : sample.targets) t = static_cast<Token>(brng.below(oc.vocab_size));
    }
    const auto importance = neuron_importance(oracle, batch);
    auto batch_loss = [&](const GateSet* gates) {
        ForwardOptions options;
        options.gates = gates;
        double total = 0.0;
        for (const auto& sample : batch)
            total += nll_loss(forward(oracle, sample.tokens, options), sample.targets);
        return total;
    };
    const double base = batch_loss(nullptr);
    for (std::size_t l = 0; l < oc.num_layers; ++l) {
        std::vector<double> deltas(8);
        for (std::size_t j = 0; j < 8; ++j) {
            GateSet gates = GateSet::ones(oracle);
            gates.neuron_gate[l][j] = 0.0;
            deltas[j] = std::abs(batch_loss(&gates) - base);
        }
        auto ranks = [](const std::vector<double>& v) {
            std::vector<std::size_t> order(v.size());
            for (std::size_t i = 0; i < v.size(); ++i) order[i] = i;
            std::sort(order.begin(), order.end(),
                      [&v](std::size_t a, std::size_t b) { return v[a] < v[b]; });
            std::vector<double> r(v.size());
            for (std::size_t i = 0; i < v.size(); ++i) r[order[i]] = static_cast<double>(i);
            return r;
        };
        const auto ra = ranks(importance[l]);
        const auto rb = ranks(deltas);
        double d2 = 0.0;
        for (std::size_t i = 0; i < 8; ++i) d2 += (ra[i] - rb[i]) * (ra[i] - rb[i]);
        const double rho = 1.0 - 6.0 * d2 / (8.0 * 63.0);
        report.worst_spearman = std::min(report.worst_spearman, rho);
    }
    return report;
}

// --------------------------------------------------------------------------
// 9: GRPO correctness and training trend
// --------------------------------------------------------------------------

struct GrpoReport {
    double worst_mean_dev = 0.0;
    double worst_std_dev = 0.0;
    double objective_at_init = 0.0;
    int improved_seeds = 0;
};

inline GrpoReport grpo_correctness(std::uint64_t root) {
    GrpoReport report;

    for (std::uint64_t trial = 0; trial < 200; ++trial) {
        Rng rng(Rng::derive(root, "acc9-adv", trial));
        std::vector<double> rewards(4);
        for (auto& r : rewards) r = rng.uniform();
        const auto advantages = group_advantages(rewards);
        double mean = 0.0, var = 0.0;
        for (const double a : advantages) mean += a;
        mean /= 4.0;
        for (const double a : advantages) var += (a - mean) * (a - mean);
        var /= 4.0;
        report.worst_mean_dev = std::max(report.worst_mean_dev, std::abs(mean));
        report.worst_std_dev = std::max(report.worst_std_dev, std::abs(std::sqrt(var) - 1.0));
    }

    {
        ModelConfig pc;
        pc.vocab_size = 16;
        pc.num_layers = 1;
        pc.d_model = 16;
        pc.num_q_heads = 2;
        pc.num_kv_heads = 1;
        pc.d_ff = 32;
        pc.max_seq = 32;
        pc.seed = Rng::derive(root, "acc9-init");
        const auto params = init_params(pc);
        const auto task = make_copy_task(2, 4, pc.vocab_size, Rng::derive(root, "acc9-task"));
        const auto groups = sample_groups(params, task, 4, Rng::derive(root, "acc9-sample"));
        const auto objective = grpo_objective(groups, params, params, 0.2, 0.05);
        report.objective_at_init = std::abs(objective.value);
    }

    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        ModelConfig pc;
        pc.vocab_size = 16;
        pc.num_layers = 1;
        pc.d_model = 16;
        pc.num_q_heads = 2;
        pc.num_kv_heads = 1;
        pc.d_ff = 32;
        pc.max_seq = 32;
        pc.seed = Rng::derive(root, "acc9-train-model", seed);
        auto params = init_params(pc);
        const auto task = make_copy_task(4, 5, pc.vocab_size, seed);
        GrpoConfig gc; // G=4, clip=0.2, beta=0.05, lr=0.1, 60 iterations
        const auto logs = grpo_train(params, task, gc, seed);
        double first = 0.0, last = 0.0;
        for (std::size_t i = 0; i < 10; ++i) first += logs[i].mean_reward;
        for (std::size_t i = logs.size() - 10; i < logs.size(); ++i) last += logs[i].mean_reward;
        if (last > first) ++report.improved_seeds;
    }
    return report;
}

// --------------------------------------------------------------------------
// 10: end-to-end determinism of the metrics streams
// --------------------------------------------------------------------------

struct DeterminismReport {
    std::size_t total_runs = 0;
    std::size_t identical_runs = 0;
    std::size_t records_validated = 0;
    bool schema_valid = true;
};

inline DeterminismReport end_to_end_determinism(std::uint64_t root) {
    DeterminismReport report;
    const std::string seed_str = std::to_string(Rng::derive(root, "acc10"));
    const std::vector<std::string> configs = {
        R"({"mode":"greedy","seed":)" + seed_str +
            R"(,"model":{"max_seq":128},"greedy":{"prompt_len":8,"tokens":64}})",
        R"({"mode":"lookahead","seed":)" + seed_str +
            R"(,"model":{"max_seq":128},"lookahead":{"n":5,"l":10,"g":5,"prompt_len":8,"tokens":64}})",
        R"({"mode":"kvcache","seed":)" + seed_str +
            R"(,"model":{"num_layers":2,"num_kv_heads":2,"d_model":32,"num_q_heads":4},"kvcache":{"tokens":128,"block_size":8,"bits":8,"forks":2,"stats_every":32}})",
        R"({"mode":"tts","seed":)" + seed_str +
            R"(,"model":{"vocab_size":32,"d_model":16,"num_q_heads":2,"num_kv_heads":1,"d_ff":32,"max_seq":64},"tts":{"n":4,"k":2,"lambda":0.5,"gen_len":16,"prompt_len":6}})",
        R"({"mode":"prune","seed":)" + seed_str +
            R"(,"model":{"vocab_size":16,"d_model":8,"num_q_heads":2,"num_kv_heads":1,"d_ff":10,"max_seq":32},"prune":{"kind":"width","percent":20,"batch_samples":4,"batch_len":8}})",
        R"({"mode":"grpo","seed":)" + seed_str +
            R"(,"model":{"vocab_size":16,"num_layers":1,"d_model":16,"num_q_heads":2,"num_kv_heads":1,"d_ff":32,"max_seq":32},"grpo":{"g":4,"iters":8,"prompts":2,"prompt_len":4}})",
    };

    for (const auto& text : configs) {
        ++report.total_runs;
        const RunConfig config = parse_run_config(text);
        std::ostringstream first, second;
        run(config, first, "selftest");
        run(config, second, "selftest");
        if (strip_timestamps(first.str()) == strip_timestamps(second.str()))
            ++report.identical_runs;

        std::istringstream lines(first.str());
        std::string line;
        bool config_echoed = false;
        while (std::getline(lines, line)) {
            if (line.empty()) continue;
            try {
                const Json record = Json::parse(line);
                validate_record(record);
                ++report.records_validated;
                if (record["kind"] == "config" &&
                    record["data"]["config_text"].get<std::string>() == text)
                    config_echoed = true;
            } catch (const std::exception&) {
                report.schema_valid = false;
            }
        }
        if (!config_echoed) report.schema_valid = false;
    }
    return report;
}

} // namespace inferlab::acceptance_detail
