// Copyright (C) 2026 the inferlab authors
// SPDX-License-Identifier: Apache-2.0
//
// Reproducible experiment surface: JSON run configurations with exactly one
// active mode section, seeded end-to-end drivers for every subsystem, and a
// resumable parallel sweep over Cartesian parameter grids. All randomness
// flows from the single root seed through named sub-streams, so any stage
// can be reproduced in isolation.
#pragma once

#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

#include "inferlab/grpo.hpp"
#include "inferlab/lookahead.hpp"
#include "inferlab/metrics.hpp"
#include "inferlab/paged_kv.hpp"
#include "inferlab/pruning.hpp"
#include "inferlab/tts.hpp"
#include "inferlab/weights_io.hpp"

namespace inferlab {

namespace detail {

inline const char* kModeSections[] = {"greedy", "lookahead", "kvcache", "tts", "prune", "grpo"};

template <typename T>
T get_or(const Json& section, const char* key, T fallback) {
    if (!section.contains(key)) return fallback;
    try {
        return section.at(key).get<T>();
    } catch (const Json::exception& e) {
        raise<invalid_config>("config field '", key, "': ", e.what());
    }
}

} // namespace detail

struct RunConfig {
    ModelConfig model;
    std::string mode;
    std::uint64_t seed = 0;
    Json section;     // the active mode section
    Json parsed;      // full parsed config
    std::string text; // raw config text, echoed byte-for-byte into metrics
};

/// Parses and validates a run configuration. Exactly one mode section may be
/// present and must match the "mode" field; unknown top-level keys and
/// malformed fields are reported with their location.
inline RunConfig parse_run_config(const std::string& text) {
    RunConfig config;
    config.text = text;
    try {
        config.parsed = Json::parse(text);
    } catch (const Json::exception& e) {
        detail::raise<invalid_config>("config parse error: ", e.what());
    }
    INFERLAB_CHECK_CONFIG(config.parsed.is_object(), "config root must be a JSON object");

    for (const auto& [key, value] : config.parsed.items()) {
        const bool known = key == "model" || key == "mode" || key == "seed" ||
                           std::any_of(std::begin(detail::kModeSections),
                                       std::end(detail::kModeSections),
                                       [&key](const char* s) { return key == s; });
        INFERLAB_CHECK_CONFIG(known, "unknown config key '", key, "'");
        (void)value;
    }

    INFERLAB_CHECK_CONFIG(config.parsed.contains("mode") && config.parsed["mode"].is_string(),
                          "config needs a string 'mode' field");
    config.mode = config.parsed["mode"].get<std::string>();
    const bool known_mode =
        std::any_of(std::begin(detail::kModeSections), std::end(detail::kModeSections),
                    [&config](const char* s) { return config.mode == s; });
    INFERLAB_CHECK_CONFIG(known_mode, "unknown mode '", config.mode, "'");

    std::size_t sections = 0;
    for (const char* s : detail::kModeSections)
        if (config.parsed.contains(s)) ++sections;
    INFERLAB_CHECK_CONFIG(sections <= 1, "config must contain at most one mode section");
    INFERLAB_CHECK_CONFIG(sections == 0 || config.parsed.contains(config.mode),
                          "mode is '", config.mode, "' but a different mode section is present");
    config.section = config.parsed.contains(config.mode) ? config.parsed[config.mode]
                                                         : Json::object();

    config.seed = detail::get_or<std::uint64_t>(config.parsed, "seed", 0);

    const Json model = config.parsed.contains("model") ? config.parsed["model"] : Json::object();
    config.model.vocab_size = detail::get_or<std::size_t>(model, "vocab_size", 64);
    config.model.num_layers = detail::get_or<std::size_t>(model, "num_layers", 2);
    config.model.d_model = detail::get_or<std::size_t>(model, "d_model", 32);
    config.model.num_q_heads = detail::get_or<std::size_t>(model, "num_q_heads", 4);
    config.model.num_kv_heads = detail::get_or<std::size_t>(model, "num_kv_heads", 2);
    config.model.d_ff = detail::get_or<std::size_t>(model, "d_ff", 64);
    config.model.max_seq = detail::get_or<std::size_t>(model, "max_seq", 512);
    config.model.seed = config.seed;
    config.model.validate();
    return config;
}

namespace detail {

inline TokenSeq derived_prompt(const ModelConfig& model, std::uint64_t root_seed,
                               std::size_t prompt_len) {
    INFERLAB_CHECK_CONFIG(prompt_len >= 1, "prompt_len must be >= 1");
    Rng rng(Rng::derive(root_seed, "prompt"));
    TokenSeq prompt(prompt_len);
    for (auto& t : prompt) t = static_cast<Token>(rng.below(model.vocab_size));
    return prompt;
}

inline Json token_array(std::span<const Token> tokens) {
    Json arr = Json::array();
    for (const Token t : tokens) arr.push_back(t);
    return arr;
}

inline void run_decode(const RunConfig& config, MetricsWriter& writer) {
    const auto params = init_params(config.model);
    const std::size_t count = get_or<std::size_t>(config.section, "tokens", 64);
    TokenSeq prompt;
    if (config.section.contains("prompt")) {
        prompt = get_or<TokenSeq>(config.section, "prompt", {});
        INFERLAB_CHECK_CONFIG(!prompt.empty(), "explicit prompt must be non-empty");
    } else {
        prompt = derived_prompt(config.model, config.seed,
                                get_or<std::size_t>(config.section, "prompt_len", 8));
    }

    if (config.mode == "greedy") {
        const auto tokens = greedy_decode(params, prompt, count);
        Json summary;
        summary["tokens_generated"] = tokens.size();
        summary["steps"] = tokens.size();
        summary["tokens"] = token_array(tokens);
        writer.summary(summary);
        return;
    }

    LookaheadConfig lc;
    lc.window_rows = get_or<std::size_t>(config.section, "n", 5);
    lc.window_cols = get_or<std::size_t>(config.section, "l", 10);
    lc.max_candidates = get_or<std::size_t>(config.section, "g", 5);
    lc.validate();
    INFERLAB_CHECK(prompt.size() + count <= params.config.max_seq,
                   "prompt + tokens exceeds max_seq");

    LookaheadState state(params, prompt, lc, config.seed);
    while (state.emitted() < count) {
        const std::size_t accepted = state.step();
        Json step;
        step["step"] = state.step_count();
        step["accepted"] = accepted;
        step["committed_total"] = state.emitted();
        writer.step(step);
    }
    const auto& stats = state.stats();
    TokenSeq tokens(state.committed().begin() + static_cast<std::ptrdiff_t>(prompt.size()),
                    state.committed().begin() + static_cast<std::ptrdiff_t>(prompt.size() + count));

    Json summary;
    summary["tokens_generated"] = count;
    summary["steps"] = stats.steps;
    summary["mean_accept"] = stats.mean_accept();
    summary["speculative_tokens"] = stats.speculative_tokens;
    summary["accept_histogram"] = stats.accept_histogram;
    summary["tokens"] = token_array(tokens);
    writer.summary(summary);
}

inline void run_kvcache(const RunConfig& config, MetricsWriter& writer) {
    PagedCacheConfig cache_config;
    cache_config.block_size = get_or<std::size_t>(config.section, "block_size", 16);
    cache_config.max_blocks = get_or<std::size_t>(config.section, "max_blocks", 4096);
    cache_config.layers = config.model.num_layers;
    cache_config.kv_heads = config.model.num_kv_heads;
    cache_config.head_dim = config.model.head_dim();
    const int bits = get_or<int>(config.section, "bits", 0);
    if (bits != 0) {
        cache_config.quant.enabled = true;
        cache_config.quant.bits = bits;
        cache_config.quant.group_cols = get_or<std::size_t>(config.section, "group_cols", 0);
    }
    cache_config.validate();

    const std::size_t tokens = get_or<std::size_t>(config.section, "tokens", 256);
    const std::size_t stats_every = get_or<std::size_t>(config.section, "stats_every", 64);
    const std::size_t forks = get_or<std::size_t>(config.section, "forks", 2);

    PagedKvCache cache(cache_config);
    const auto seq = cache.alloc_sequence();
    Rng rng(Rng::derive(config.seed, "kv-stream"));
    const std::size_t token_width =
        cache_config.layers * cache_config.kv_heads * cache_config.head_dim;

    std::vector<std::vector<double>> mirror_k, mirror_v; // contiguous oracle copy
    std::vector<PagedKvCache::SeqId> children;
    for (std::size_t i = 0; i < tokens; ++i) {
        std::vector<double> k(token_width), v(token_width);
        for (auto& x : k) x = rng.normal();
        for (auto& x : v) x = rng.normal();
        cache.append_kv(seq, k, v);
        mirror_k.push_back(std::move(k));
        mirror_v.push_back(std::move(v));
        if (forks > 0 && i > 0 && i % std::max<std::size_t>(tokens / (forks + 1), 1) == 0 &&
            children.size() < forks)
            children.push_back(cache.fork_prefix(seq));
        if ((i + 1) % stats_every == 0) {
            const auto stats = cache.stats();
            Json step;
            step["tokens"] = i + 1;
            step["blocks_used"] = stats.blocks_used;
            step["blocks_free"] = stats.blocks_free;
            step["shared_blocks"] = stats.shared_blocks;
            step["bytes_logical"] = stats.bytes_logical;
            step["bytes_physical"] = stats.bytes_physical;
            writer.step(step);
        }
    }

    // Paged attention vs the contiguous mirror, worst case over layers/heads.
    double worst = 0.0;
    Rng qrng(Rng::derive(config.seed, "kv-query"));
    for (std::size_t l = 0; l < cache_config.layers; ++l)
        for (std::size_t h = 0; h < cache_config.kv_heads; ++h) {
            std::vector<double> q(cache_config.head_dim);
            for (auto& x : q) x = qrng.normal();
            const auto paged = cache.paged_attention(q, seq, l, h);

            const std::size_t dh = cache_config.head_dim;
            const std::size_t off = (l * cache_config.kv_heads + h) * dh;
            std::vector<double> scores(tokens);
            double best = -1e300;
            for (std::size_t r = 0; r < tokens; ++r) {
                double s = 0.0;
                for (std::size_t i = 0; i < dh; ++i) s += q[i] * mirror_k[r][off + i];
                scores[r] = s / std::sqrt(static_cast<double>(dh));
                best = std::max(best, scores[r]);
            }
            double z = 0.0;
            for (double& s : scores) {
                s = std::exp(s - best);
                z += s;
            }
            for (std::size_t i = 0; i < dh; ++i) {
                double acc = 0.0;
                for (std::size_t r = 0; r < tokens; ++r)
                    acc += (scores[r] / z) * mirror_v[r][off + i];
                worst = std::max(worst, std::abs(acc - paged[i]));
            }
        }

    const auto stats = cache.stats();
    Json summary;
    summary["tokens"] = tokens;
    summary["blocks_used"] = stats.blocks_used;
    summary["shared_blocks"] = stats.shared_blocks;
    summary["bytes_logical"] = stats.bytes_logical;
    summary["bytes_physical"] = stats.bytes_physical;
    summary["physical_ratio"] =
        stats.bytes_logical == 0
            ? 0.0
            : static_cast<double>(stats.bytes_physical) / static_cast<double>(stats.bytes_logical);
    summary["max_attention_diff"] = worst;
    summary["forks"] = children.size();
    writer.summary(summary);
}

inline void run_tts_mode(const RunConfig& config, MetricsWriter& writer) {
    const auto params = init_params(config.model);
    TtsOptions options;
    options.num_trajectories = get_or<std::size_t>(config.section, "n", 4);
    options.top_k = get_or<std::size_t>(config.section, "k", 2);
    options.lambda = get_or<double>(config.section, "lambda", 0.5);
    options.gen_len = get_or<std::size_t>(config.section, "gen_len", 24);
    options.seed = config.seed;
    options.separator = static_cast<Token>(get_or<std::size_t>(config.section, "separator", 0));

    const std::string strategy = get_or<std::string>(config.section, "strategy", "temperature");
    if (strategy == "temperature")
        options.strategy = Temperature{get_or<double>(config.section, "temp", 1.0)};
    else if (strategy == "top-k")
        options.strategy = TopK{get_or<std::size_t>(config.section, "top_k", 8)};
    else if (strategy == "nucleus")
        options.strategy = Nucleus{get_or<double>(config.section, "nucleus_p", 0.9)};
    else
        raise<invalid_config>("unknown sampling strategy '", strategy, "'");

    const auto prompt = derived_prompt(
        config.model, config.seed, get_or<std::size_t>(config.section, "prompt_len", 8));

    const std::string critic_name =
        get_or<std::string>(config.section, "critic", "greedy-resume");
    Critic critic;
    if (critic_name == "greedy-resume")
        critic = greedy_resume_critic(params, prompt, options.lambda,
                                      get_or<double>(config.section, "critic_threshold", 0.5));
    else if (critic_name == "identity")
        critic = identity_critic();
    else
        raise<invalid_config>("unknown critic '", critic_name, "'");

    const auto result = run_tts(params, prompt, options, critic);
    for (const auto& traj : result.trajectories) {
        Json step;
        step["trajectory"] = traj.sample_index;
        step["weighted_entropy"] = traj.weighted_entropy;
        step["avg_logprob"] = traj.avg_logprob;
        step["score"] = traj.score;
        writer.step(step);
    }
    Json summary;
    summary["top_k"] = result.top_k_indices;
    summary["consensus_answer"] = token_array(result.answer);
    summary["best_score"] = result.trajectories[result.top_k_indices[0]].score;
    writer.summary(summary);
}

inline void run_prune(const RunConfig& config, MetricsWriter& writer) {
    const auto params = init_params(config.model);
    const std::string kind = get_or<std::string>(config.section, "kind", "width");
    INFERLAB_CHECK_CONFIG(kind == "width" || kind == "depth", "prune kind must be width or depth");
    const double percent = get_or<double>(config.section, "percent", 20.0);
    INFERLAB_CHECK_CONFIG(percent >= 0.0 && percent < 100.0, "percent must be in [0, 100)");

    Rng batch_rng(Rng::derive(config.seed, "prune-batch"));
    EvalBatch batch(get_or<std::size_t>(config.section, "batch_samples", 8));
    const std::size_t batch_len = get_or<std::size_t>(config.section, "batch_len", 16);
    for (auto& sample : batch) {
        sample.tokens.resize(batch_len);
        sample.targets.resize(batch_len);
        for (auto& t : sample.tokens) t = static_cast<Token>(batch_rng.below(config.model.vocab_size));
        for (auto& t : sample.targets)
            t = static_cast<Token>(batch_rng.below(config.model.vocab_size));
    }

    const auto report = importance_report(params, batch);
    auto eval_nll = [&batch](const ModelParams& p) {
        double total = 0.0;
        std::size_t positions = 0;
        for (const auto& sample : batch) {
            total += nll_loss(forward(p, sample.tokens), sample.targets);
            positions += sample.tokens.size();
        }
        return total / static_cast<double>(positions);
    };

    // Either one-shot importance pruning at the requested percentage, or a
    // short Concrete-gate training run followed by binarization.
    const std::size_t train_steps = get_or<std::size_t>(config.section, "train_steps", 0);
    ModelParams pruned = params;
    if (train_steps > 0) {
        const double tau = get_or<double>(config.section, "tau", 0.5);
        const double lambda1 = get_or<double>(config.section, "lambda1", 0.01);
        const double lambda2 = get_or<double>(config.section, "lambda2", 0.01);
        const double lr = get_or<double>(config.section, "lr", 0.05);
        GateSet gates = GateSet::for_model(params, 1.0, tau);
        Rng gate_rng(Rng::derive(config.seed, "gates"));
        ModelParams trainable = params;
        for (std::size_t s = 0; s < train_steps; ++s) {
            const auto step = prune_train_step(trainable, gates, batch, lambda1, lambda2, lr,
                                               gate_rng, /*co_train=*/false);
            Json rec;
            rec["step"] = s;
            rec["objective"] = step.objective;
            rec["task_loss"] = step.task_loss;
            writer.step(rec);
        }
        const auto binary = binarize_gates(gates);
        auto keep_neuron = binary.keep_neuron;
        for (auto& layer : keep_neuron)
            if (std::none_of(layer.begin(), layer.end(), [](bool b) { return b; }))
                layer[0] = true;
        std::vector<std::size_t> keep_layers;
        for (std::size_t l = 0; l < binary.keep_layer.size(); ++l)
            if (binary.keep_layer[l]) keep_layers.push_back(l);
        if (keep_layers.empty()) keep_layers.push_back(0);
        pruned = apply_depth_prune(apply_width_prune(params, keep_neuron), keep_layers);
    } else if (kind == "width") {
        pruned = apply_width_prune(params,
                                   width_masks_from_importance(report.neuron, percent / 100.0));
    } else {
        pruned = apply_depth_prune(params,
                                   depth_keep_from_importance(report.layer, percent / 100.0));
    }

    const std::string weights_out = get_or<std::string>(config.section, "weights_out", "");
    if (!weights_out.empty()) save_weights(weights_out, pruned);

    const std::string report_out = get_or<std::string>(config.section, "report_out", "");
    Json report_json;
    report_json["neuron"] = report.neuron;
    report_json["layer"] = report.layer;
    report_json["num_samples"] = report.num_samples;
    if (!report_out.empty()) {
        std::ofstream os(report_out);
        INFERLAB_CHECK(os.is_open(), "cannot open report file ", report_out);
        os << report_json.dump(2) << '\n';
    }

    Json summary;
    summary["kind"] = kind;
    summary["percent"] = percent;
    summary["params_before"] = params.parameter_count();
    summary["params_after"] = pruned.parameter_count();
    summary["layers_after"] = pruned.config.num_layers;
    summary["nll_before"] = eval_nll(params);
    summary["nll_after"] = eval_nll(pruned);
    summary["importance"] = report_json;
    writer.summary(summary);
}

inline void run_grpo(const RunConfig& config, MetricsWriter& writer) {
    auto params = init_params(config.model);
    GrpoConfig gc;
    gc.group_size = get_or<std::size_t>(config.section, "g", 4);
    gc.clip = get_or<double>(config.section, "clip", 0.2);
    gc.beta = get_or<double>(config.section, "beta", 0.05);
    gc.lr = get_or<double>(config.section, "lr", 0.1);
    gc.iterations = get_or<std::size_t>(config.section, "iters", 60);
    gc.sync_every = get_or<std::size_t>(config.section, "sync_every", 4);

    const auto task = make_copy_task(get_or<std::size_t>(config.section, "prompts", 4),
                                     get_or<std::size_t>(config.section, "prompt_len", 5),
                                     config.model.vocab_size, config.seed);
    const auto logs = grpo_train(params, task, gc, config.seed);

    for (const auto& log : logs) {
        Json step;
        step["iter"] = log.iteration;
        step["mean_reward"] = log.mean_reward;
        step["rouge"] = log.mean_rouge;
        step["length"] = log.mean_length;
        step["judge"] = log.mean_judge;
        step["kl"] = log.kl;
        step["objective"] = log.objective;
        writer.step(step);
    }
    Json summary;
    summary["iterations"] = logs.size();
    summary["first_reward"] = logs.front().mean_reward;
    summary["final_reward"] = logs.back().mean_reward;
    summary["final_kl"] = logs.back().kl;
    writer.summary(summary);
}

} // namespace detail

/// Executes one run, writing the config echo, per-step records and a
/// terminal summary. Deterministic given (config, seed) apart from
/// timestamps.
inline void run(const RunConfig& config, std::ostream& metrics_out,
                const std::string& run_id = "run") {
    MetricsWriter writer(metrics_out, run_id, config.mode);
    writer.config(config.parsed, config.text);
    if (config.mode == "greedy" || config.mode == "lookahead")
        detail::run_decode(config, writer);
    else if (config.mode == "kvcache")
        detail::run_kvcache(config, writer);
    else if (config.mode == "tts")
        detail::run_tts_mode(config, writer);
    else if (config.mode == "prune")
        detail::run_prune(config, writer);
    else if (config.mode == "grpo")
        detail::run_grpo(config, writer);
    else
        detail::raise<invalid_config>("unknown mode '", config.mode, "'");
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

struct SweepCell {
    std::string key;  // dotted assignments, e.g. "lookahead.n=2,lookahead.l=5"
    Json overrides;   // path -> value
};

/// Cartesian product over a grid of dotted-path overrides, ordered with the
/// first grid key as the slowest axis.
inline std::vector<SweepCell> expand_grid(const Json& grid) {
    INFERLAB_CHECK_CONFIG(grid.is_object() && !grid.empty(), "sweep grid must be a non-empty object");
    std::vector<std::pair<std::string, Json>> axes;
    for (const auto& [path, values] : grid.items()) {
        INFERLAB_CHECK_CONFIG(values.is_array() && !values.empty(),
                              "grid entry '", path, "' must be a non-empty array");
        axes.emplace_back(path, values);
    }
    std::vector<SweepCell> cells;
    std::vector<std::size_t> index(axes.size(), 0);
    while (true) {
        SweepCell cell;
        for (std::size_t a = 0; a < axes.size(); ++a) {
            const Json& value = axes[a].second[index[a]];
            cell.overrides[axes[a].first] = value;
            if (!cell.key.empty()) cell.key += ',';
            cell.key += axes[a].first + "=" + value.dump();
        }
        cells.push_back(std::move(cell));
        std::size_t a = axes.size();
        while (a > 0) {
            --a;
            if (++index[a] < axes[a].second.size()) break;
            index[a] = 0;
            if (a == 0) return cells;
        }
    }
}

inline void apply_override(Json& root, const std::string& dotted_path, const Json& value) {
    Json* node = &root;
    std::size_t start = 0;
    while (true) {
        const std::size_t dot = dotted_path.find('.', start);
        const std::string key = dotted_path.substr(start, dot - start);
        INFERLAB_CHECK_CONFIG(!key.empty(), "bad override path '", dotted_path, "'");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

struct SweepResult {
    std::size_t completed = 0;
    std::size_t skipped = 0;
    std::size_t failed = 0;
};

/// Runs every grid cell against the base config, one output file per cell
/// under `out_dir`, with a manifest of completed/failed cells that makes the
/// sweep resumable. Cells execute in parallel up to `workers`; each is fully
/// isolated (own rng streams via its own config, own file).
inline SweepResult sweep(const std::string& base_config_text, const Json& grid,
                         const std::string& out_dir, std::size_t workers = 1) {
    namespace fs = std::filesystem;
    INFERLAB_CHECK(workers >= 1, "sweep: workers must be >= 1");
    fs::create_directories(out_dir);
    const fs::path manifest_path = fs::path(out_dir) / "manifest.json";

    Json manifest = Json::object();
    manifest["completed"] = Json::object();
    manifest["failed"] = Json::object();
    if (fs::exists(manifest_path)) {
        std::ifstream is(manifest_path);
        manifest = Json::parse(is);
    }

    const Json base = Json::parse(base_config_text);
    const auto cells = expand_grid(grid);

    SweepResult result;
    std::mutex manifest_mutex;
    std::atomic<std::size_t> next{0};

    auto worker = [&]() {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= cells.size()) return;
            const auto& cell = cells[i];
            {
                std::lock_guard<std::mutex> guard(manifest_mutex);
                if (manifest["completed"].contains(cell.key)) {
                    ++result.skipped;
                    continue;
                }
            }
            Json cell_config = base;
            for (const auto& [path, value] : cell.overrides.items())
                apply_override(cell_config, path, value);
            const std::string cell_file = "cell_" + std::to_string(i) + ".ndjson";
            try {
                const RunConfig rc = parse_run_config(cell_config.dump());
                std::ofstream os(fs::path(out_dir) / cell_file);
                INFERLAB_CHECK(os.is_open(), "cannot open sweep cell output");
                run(rc, os, cell.key);
                std::lock_guard<std::mutex> guard(manifest_mutex);
                manifest["completed"][cell.key] = cell_file;
                manifest["failed"].erase(cell.key);
                ++result.completed;
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> guard(manifest_mutex);
                manifest["failed"][cell.key] = e.what();
                ++result.failed;
            }
        }
    };

    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(workers, cells.size()); ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();

    std::ofstream os(manifest_path);
    os << manifest.dump(2) << '\n';
    return result;
}

} // namespace inferlab
