// Copyright (C) 2026 the inferlab authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line surface over the harness. Every experiment subcommand builds
// a run configuration, executes it and streams NDJSON metrics to stdout or
// a file. Exit codes: 0 success, 1 usage, 2 configuration, 3 runtime,
// 4 acceptance failure.
#include <fstream>
#include <iostream>
#include <memory>

#include <CLI11.hpp>

#include "inferlab/acceptance.hpp"
#include "inferlab/harness.hpp"

namespace {

using inferlab::Json;

struct ModelFlags {
    std::size_t vocab_size = 64;
    std::size_t num_layers = 2;
    std::size_t d_model = 32;
    std::size_t num_q_heads = 4;
    std::size_t num_kv_heads = 2;
    std::size_t d_ff = 64;
    std::size_t max_seq = 512;

    void attach(CLI::App* app) {
        app->add_option("--vocab", vocab_size, "vocabulary size");
        app->add_option("--layers", num_layers, "transformer blocks");
        app->add_option("--d-model", d_model, "model width");
        app->add_option("--q-heads", num_q_heads, "query heads");
        app->add_option("--kv-heads", num_kv_heads, "key/value heads");
        app->add_option("--d-ff", d_ff, "GLU hidden width");
        app->add_option("--max-seq", max_seq, "maximum sequence length");
    }

    Json to_json() const {
        return Json{{"vocab_size", vocab_size}, {"num_layers", num_layers},
                    {"d_model", d_model},       {"num_q_heads", num_q_heads},
                    {"num_kv_heads", num_kv_heads}, {"d_ff", d_ff},
                    {"max_seq", max_seq}};
    }
};

struct OutputFlag {
    std::string path = "-";

    void attach(CLI::App* app) {
        app->add_option("--out", path, "metrics output file ('-' for stdout)");
    }

    // Keeps the ofstream alive for the duration of the run.
    std::unique_ptr<std::ofstream> file;
    std::ostream& stream() {
        if (path == "-") return std::cout;
        file = std::make_unique<std::ofstream>(path);
        INFERLAB_CHECK(file->is_open(), "cannot open output file ", path);
        return *file;
    }
};

int execute(const Json& config, OutputFlag& out) {
    const auto run_config = inferlab::parse_run_config(config.dump());
    inferlab::run(run_config, out.stream());
    return 0;
}

std::string read_file(const std::string& path) {
    std::ifstream is(path);
    INFERLAB_CHECK(is.is_open(), "cannot open file ", path);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"inferlab: a desk-scale inference-optimization laboratory"};
    app.require_subcommand(1);
    app.fallthrough(); // let subcommands consume the global --seed

    std::uint64_t seed = 0;
    app.add_option("--seed", seed, "root seed; all stage randomness derives from it")
        ->default_val(0);

    // ---- decode ----------------------------------------------------------
    auto* decode = app.add_subcommand("decode", "greedy or lookahead decoding");
    std::string decode_mode = "greedy";
    decode->add_option("--mode", decode_mode, "greedy|lookahead")
        ->check(CLI::IsMember({"greedy", "lookahead"}));
    std::size_t look_n = 5, look_l = 10, look_g = 5;
    decode->add_option("--n", look_n, "retained Jacobi iterations (window rows)");
    decode->add_option("--l", look_l, "lookahead positions (window columns)");
    decode->add_option("--g", look_g, "candidates verified per step");
    std::size_t decode_tokens = 64, decode_prompt_len = 8;
    decode->add_option("--tokens", decode_tokens, "tokens to generate");
    decode->add_option("--prompt-len", decode_prompt_len, "seeded prompt length");
    std::vector<std::uint32_t> decode_prompt;
    decode->add_option("--prompt", decode_prompt, "explicit prompt token ids");
    ModelFlags decode_model;
    decode_model.attach(decode);
    OutputFlag decode_out;
    decode_out.attach(decode);

    // ---- bench kvcache ---------------------------------------------------
    auto* bench = app.add_subcommand("bench", "micro-benchmarks");
    bench->require_subcommand(1);
    auto* kvcache = bench->add_subcommand("kvcache", "paged KV cache exerciser");
    std::size_t kv_tokens = 256, kv_block = 16, kv_blocks = 4096, kv_groups = 0, kv_forks = 2,
                kv_stats_every = 64;
    int kv_bits = 0;
    kvcache->add_option("--tokens", kv_tokens, "tokens to append");
    kvcache->add_option("--block-size", kv_block, "tokens per block");
    kvcache->add_option("--max-blocks", kv_blocks, "physical block budget");
    kvcache->add_option("--bits", kv_bits, "quantization width (0 = off, 4 or 8)");
    kvcache->add_option("--group-cols", kv_groups, "quantization group columns (0 = d_h)");
    kvcache->add_option("--forks", kv_forks, "prefix forks during the run");
    kvcache->add_option("--stats-every", kv_stats_every, "emit cache stats every N tokens");
    ModelFlags kv_model;
    kv_model.attach(kvcache);
    OutputFlag kv_out;
    kv_out.attach(kvcache);

    // ---- tts run ---------------------------------------------------------
    auto* tts = app.add_subcommand("tts", "test-time inference scaling");
    tts->require_subcommand(1);
    auto* tts_run = tts->add_subcommand("run", "sample, score, reflect, vote");
    std::size_t tts_n = 4, tts_k = 2, tts_gen = 24, tts_prompt_len = 8, tts_topk = 8,
                tts_separator = 0;
    double tts_lambda = 0.5, tts_temp = 1.0, tts_nucleus = 0.9, tts_threshold = 0.5;
    std::string tts_critic = "greedy-resume", tts_strategy = "temperature";
    tts_run->add_option("--n", tts_n, "trajectories sampled");
    tts_run->add_option("--k", tts_k, "top-K retained");
    tts_run->add_option("--lambda", tts_lambda, "entropy/likelihood trade-off in [0,1]");
    tts_run->add_option("--gen-len", tts_gen, "tokens per trajectory");
    tts_run->add_option("--prompt-len", tts_prompt_len, "seeded prompt length");
    tts_run->add_option("--critic", tts_critic, "greedy-resume|identity")
        ->check(CLI::IsMember({"greedy-resume", "identity"}));
    tts_run->add_option("--critic-threshold", tts_threshold, "low-confidence resume threshold");
    tts_run->add_option("--strategy", tts_strategy, "temperature|top-k|nucleus")
        ->check(CLI::IsMember({"temperature", "top-k", "nucleus"}));
    tts_run->add_option("--temp", tts_temp, "sampling temperature");
    tts_run->add_option("--top-k", tts_topk, "top-k truncation");
    tts_run->add_option("--nucleus-p", tts_nucleus, "nucleus mass");
    tts_run->add_option("--separator", tts_separator, "answer separator token id");
    ModelFlags tts_model;
    tts_model.attach(tts_run);
    OutputFlag tts_out;
    tts_out.attach(tts_run);

    // ---- prune -----------------------------------------------------------
    auto* prune = app.add_subcommand("prune", "structural width/depth pruning");
    std::string prune_kind = "width", prune_report, prune_weights;
    double prune_percent = 20.0, prune_l1 = 0.01, prune_l2 = 0.01, prune_tau = 0.5,
           prune_lr = 0.05;
    std::size_t prune_batch = 8, prune_batch_len = 16, prune_train_steps = 0;
    prune->add_option("--kind", prune_kind, "width|depth")
        ->check(CLI::IsMember({"width", "depth"}));
    prune->add_option("--percent", prune_percent, "fraction to prune, in percent");
    prune->add_option("--report", prune_report, "write the importance report JSON here");
    prune->add_option("--weights-out", prune_weights, "write the pruned weights file here");
    prune->add_option("--batch-samples", prune_batch, "evaluation batch size");
    prune->add_option("--batch-len", prune_batch_len, "evaluation sequence length");
    prune->add_option("--train-steps", prune_train_steps,
                      "Concrete-gate training steps (0 = one-shot importance pruning)");
    prune->add_option("--lambda1", prune_l1, "layer retention penalty (gate training)");
    prune->add_option("--lambda2", prune_l2, "neuron retention penalty (gate training)");
    prune->add_option("--tau", prune_tau, "Concrete temperature (gate training)");
    prune->add_option("--lr", prune_lr, "gate learning rate (gate training)");
    ModelFlags prune_model;
    prune_model.attach(prune);
    OutputFlag prune_out;
    prune_out.attach(prune);

    // ---- grpo-train ------------------------------------------------------
    auto* grpo = app.add_subcommand("grpo-train", "composite-reward GRPO on the copy task");
    std::size_t grpo_g = 4, grpo_iters = 60, grpo_sync = 4, grpo_prompts = 4, grpo_prompt_len = 5;
    double grpo_clip = 0.2, grpo_beta = 0.05, grpo_lr = 0.1;
    grpo->add_option("--g", grpo_g, "group size");
    grpo->add_option("--clip", grpo_clip, "ratio clip epsilon");
    grpo->add_option("--beta", grpo_beta, "KL penalty weight");
    grpo->add_option("--lr", grpo_lr, "learning rate");
    grpo->add_option("--iters", grpo_iters, "training iterations");
    grpo->add_option("--sync-every", grpo_sync, "old-policy refresh period");
    grpo->add_option("--prompts", grpo_prompts, "copy-task prompts");
    grpo->add_option("--prompt-len", grpo_prompt_len, "copy-task prompt length");
    ModelFlags grpo_model;
    grpo_model.num_layers = 1;
    grpo_model.vocab_size = 16;
    grpo_model.d_model = 16;
    grpo_model.num_q_heads = 2;
    grpo_model.num_kv_heads = 1;
    grpo_model.d_ff = 32;
    grpo_model.max_seq = 32;
    grpo_model.attach(grpo);
    OutputFlag grpo_out;
    grpo_out.attach(grpo);

    // ---- run / sweep / report / selftest ----------------------------------
    auto* runcmd = app.add_subcommand("run", "execute a JSON run configuration");
    std::string run_config_path;
    runcmd->add_option("--config", run_config_path, "run configuration file")->required();
    OutputFlag run_out;
    run_out.attach(runcmd);

    auto* sweepcmd = app.add_subcommand("sweep", "Cartesian grid of runs, resumable");
    std::string sweep_config_path, sweep_grid_path, sweep_dir = "sweep-out";
    std::size_t sweep_workers = 1;
    sweepcmd->add_option("--config", sweep_config_path, "base run configuration")->required();
    sweepcmd->add_option("--grid", sweep_grid_path, "grid JSON: dotted path -> value array")
        ->required();
    sweepcmd->add_option("--out", sweep_dir, "output directory");
    sweepcmd->add_option("--workers", sweep_workers, "parallel cells");

    auto* reportcmd = app.add_subcommand("report", "aggregate metrics files into CSV");
    std::vector<std::string> report_inputs;
    reportcmd->add_option("files", report_inputs, "NDJSON metrics files");
    std::string report_out = "-";
    reportcmd->add_option("--out", report_out, "CSV output ('-' for stdout)");

    auto* selftest = app.add_subcommand("selftest", "run the acceptance suite");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*decode) {
            Json config;
            config["mode"] = decode_mode;
            config["seed"] = seed;
            config["model"] = decode_model.to_json();
            Json section;
            section["tokens"] = decode_tokens;
            if (!decode_prompt.empty())
                section["prompt"] = decode_prompt;
            else
                section["prompt_len"] = decode_prompt_len;
            if (decode_mode == "lookahead") {
                section["n"] = look_n;
                section["l"] = look_l;
                section["g"] = look_g;
            }
            config[decode_mode] = section;
            return execute(config, decode_out);
        }
        if (*kvcache) {
            Json config;
            config["mode"] = "kvcache";
            config["seed"] = seed;
            config["model"] = kv_model.to_json();
            config["kvcache"] = {{"tokens", kv_tokens},     {"block_size", kv_block},
                                 {"max_blocks", kv_blocks}, {"bits", kv_bits},
                                 {"group_cols", kv_groups}, {"forks", kv_forks},
                                 {"stats_every", kv_stats_every}};
            return execute(config, kv_out);
        }
        if (*tts_run) {
            Json config;
            config["mode"] = "tts";
            config["seed"] = seed;
            config["model"] = tts_model.to_json();
            config["tts"] = {{"n", tts_n},
                             {"k", tts_k},
                             {"lambda", tts_lambda},
                             {"gen_len", tts_gen},
                             {"prompt_len", tts_prompt_len},
                             {"critic", tts_critic},
                             {"critic_threshold", tts_threshold},
                             {"strategy", tts_strategy},
                             {"temp", tts_temp},
                             {"top_k", tts_topk},
                             {"nucleus_p", tts_nucleus},
                             {"separator", tts_separator}};
            return execute(config, tts_out);
        }
        if (*prune) {
            Json config;
            config["mode"] = "prune";
            config["seed"] = seed;
            config["model"] = prune_model.to_json();
            Json section = {{"kind", prune_kind},
                            {"percent", prune_percent},
                            {"batch_samples", prune_batch},
                            {"batch_len", prune_batch_len},
                            {"train_steps", prune_train_steps},
                            {"lambda1", prune_l1},
                            {"lambda2", prune_l2},
                            {"tau", prune_tau},
                            {"lr", prune_lr}};
            if (!prune_report.empty()) section["report_out"] = prune_report;
            if (!prune_weights.empty()) section["weights_out"] = prune_weights;
            config["prune"] = section;
            return execute(config, prune_out);
        }
        if (*grpo) {
            Json config;
            config["mode"] = "grpo";
            config["seed"] = seed;
            config["model"] = grpo_model.to_json();
            config["grpo"] = {{"g", grpo_g},           {"clip", grpo_clip},
                              {"beta", grpo_beta},     {"lr", grpo_lr},
                              {"iters", grpo_iters},   {"sync_every", grpo_sync},
                              {"prompts", grpo_prompts}, {"prompt_len", grpo_prompt_len}};
            return execute(config, grpo_out);
        }
        if (*runcmd) {
            const auto text = read_file(run_config_path);
            const auto run_config = inferlab::parse_run_config(text);
            inferlab::run(run_config, run_out.stream());
            return 0;
        }
        if (*sweepcmd) {
            const auto base = read_file(sweep_config_path);
            const Json grid = Json::parse(read_file(sweep_grid_path));
            const auto result = inferlab::sweep(base, grid, sweep_dir, sweep_workers);
            std::cout << "sweep: " << result.completed << " completed, " << result.skipped
                      << " skipped, " << result.failed << " failed\n";
            return result.failed == 0 ? 0 : 3;
        }
        if (*reportcmd) {
            std::vector<Json> records;
            for (const auto& path : report_inputs) {
                std::istringstream lines(read_file(path));
                std::string line;
                while (std::getline(lines, line))
                    if (!line.empty()) records.push_back(Json::parse(line));
            }
            if (report_out == "-") {
                inferlab::report_csv(records, std::cout);
            } else {
                std::ofstream os(report_out);
                INFERLAB_CHECK(os.is_open(), "cannot open output file ", report_out);
                inferlab::report_csv(records, os);
            }
            return 0;
        }
        if (*selftest) {
            const auto results = inferlab::run_acceptance(seed == 0 ? 42 : seed, &std::cout);
            if (!inferlab::acceptance_passed(results)) {
                std::cerr << "selftest: acceptance criteria failed\n";
                return 4;
            }
            std::cout << "selftest: all " << results.size() << " criteria passed\n";
            return 0;
        }
    } catch (const inferlab::invalid_config& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return 2;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    }
    return 1;
}
