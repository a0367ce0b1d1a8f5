// Copyright (C) 2026 the inferlab authors
// SPDX-License-Identifier: Apache-2.0
//
#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "inferlab/harness.hpp"

using namespace inferlab;

namespace {

std::string small_decode_config(const std::string& mode, std::uint64_t seed) {
    Json config;
    config["mode"] = mode;
    config["seed"] = seed;
    config["model"] = {{"max_seq", 64}};
    config[mode] = {{"prompt_len", 4}, {"tokens", 16}};
    return config.dump();
}

std::vector<Json> parse_records(const std::string& ndjson) {
    std::vector<Json> records;
    std::istringstream is(ndjson);
    std::string line;
    while (std::getline(is, line))
        if (!line.empty()) records.push_back(Json::parse(line));
    return records;
}

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        static std::atomic<std::uint64_t> counter{0};
        path = std::filesystem::temp_directory_path() /
               ("inferlab-test-" + std::to_string(counter.fetch_add(1)) + "-" +
                std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

} // namespace

TEST_CASE("run config validation") {
    SECTION("a well-formed config parses with defaults") {
        const auto config = parse_run_config(R"({"mode":"greedy","seed":7})");
        CHECK(config.mode == "greedy");
        CHECK(config.seed == 7);
        CHECK(config.model.vocab_size == 64);
        CHECK(config.model.seed == 7);
    }
    SECTION("unknown modes are rejected") {
        CHECK_THROWS_AS(parse_run_config(R"({"mode":"warp"})"), invalid_config);
    }
    SECTION("a section not matching the mode is rejected") {
        CHECK_THROWS_AS(parse_run_config(R"({"mode":"greedy","tts":{}})"), invalid_config);
    }
    SECTION("two mode sections are rejected") {
        CHECK_THROWS_AS(parse_run_config(R"({"mode":"greedy","greedy":{},"tts":{}})"),
                        invalid_config);
    }
    SECTION("unknown top-level keys are rejected") {
        CHECK_THROWS_AS(parse_run_config(R"({"mode":"greedy","typo":1})"), invalid_config);
    }
    SECTION("malformed JSON reports a parse diagnostic") {
        CHECK_THROWS_AS(parse_run_config("{nope"), invalid_config);
    }
    SECTION("field type errors name the field") {
        const auto c = parse_run_config(R"({"mode":"greedy","greedy":{"tokens":"many"}})");
        std::ostringstream os;
        try {
            run(c, os);
            FAIL("expected invalid_config");
        } catch (const invalid_config& e) {
            CHECK(std::string(e.what()).find("tokens") != std::string::npos);
        }
    }
}

TEST_CASE("runs are deterministic byte-for-byte modulo timestamps") {
    for (const std::string mode : {"greedy", "lookahead"}) {
        const auto config = parse_run_config(small_decode_config(mode, 5));
        std::ostringstream a, b;
        run(config, a);
        run(config, b);
        CHECK(strip_timestamps(a.str()) == strip_timestamps(b.str()));
    }
}

TEST_CASE("run emits a config echo, steps, and a summary") {
    const auto text = small_decode_config("lookahead", 9);
    const auto config = parse_run_config(text);
    std::ostringstream os;
    run(config, os);
    const auto records = parse_records(os.str());
    REQUIRE(records.size() >= 3);

    for (const auto& record : records) validate_record(record);
    CHECK(records.front()["kind"] == "config");
    CHECK(records.front()["data"]["config_text"].get<std::string>() == text);
    CHECK(records.back()["kind"] == "summary");

    const auto& summary = records.back()["data"];
    CHECK(summary["tokens_generated"].get<std::size_t>() == 16);
    CHECK(summary["steps"].get<std::size_t>() <= 16);
    CHECK(summary["tokens"].size() == 16);

    SECTION("lookahead output matches a greedy run of the same seed") {
        const auto greedy_config = parse_run_config(small_decode_config("greedy", 9));
        std::ostringstream greedy_os;
        run(greedy_config, greedy_os);
        const auto greedy_records = parse_records(greedy_os.str());
        CHECK(greedy_records.back()["data"]["tokens"] == summary["tokens"]);
    }
}

TEST_CASE("metrics record validation") {
    SECTION("schema version mismatches are rejected") {
        Json record = {{"schema_version", 99}, {"run_id", "x"},    {"mode", "greedy"},
                       {"kind", "summary"},   {"seq", 0},          {"timestamp", "t"},
                       {"data", Json::object()}};
        CHECK_THROWS_AS(validate_record(record), error);
    }
    SECTION("non-finite numbers are rejected") {
        Json record = {{"schema_version", 1}, {"run_id", "x"}, {"mode", "greedy"},
                       {"kind", "summary"},   {"seq", 0},      {"timestamp", "t"},
                       {"data", {{"bad", std::numeric_limits<double>::quiet_NaN()}}}};
        CHECK_THROWS_AS(validate_record(record), error);
    }
    SECTION("strip_timestamps removes exactly the timestamp field") {
        Json record = {{"schema_version", 1}, {"run_id", "x"}, {"mode", "greedy"},
                       {"kind", "summary"},   {"seq", 0},      {"timestamp", "NOW"},
                       {"data", {{"v", 1}}}};
        const auto stripped = strip_timestamps(record.dump() + "\n");
        CHECK(stripped.find("NOW") == std::string::npos);
        CHECK(stripped.find("run_id") != std::string::npos);
    }
}

TEST_CASE("sweep") {
    TempDir dir;

    SECTION("a 3x3 lookahead grid emits nine summary records") {
        const std::string base = small_decode_config("lookahead", 3);
        Json grid;
        grid["lookahead.n"] = {2, 3, 5};
        grid["lookahead.l"] = {1, 5, 10};
        const auto result = sweep(base, grid, dir.path.string(), 2);
        CHECK(result.completed == 9);
        CHECK(result.failed == 0);

        std::size_t summaries = 0;
        for (const auto& entry : std::filesystem::directory_iterator(dir.path)) {
            if (entry.path().extension() != ".ndjson") continue;
            std::ifstream is(entry.path());
            std::string content((std::istreambuf_iterator<char>(is)),
                                std::istreambuf_iterator<char>());
            for (const auto& record : parse_records(content))
                if (record["kind"] == "summary") ++summaries;
        }
        CHECK(summaries == 9);

        SECTION("a second sweep resumes from the manifest") {
            const auto again = sweep(base, grid, dir.path.string(), 2);
            CHECK(again.completed == 0);
            CHECK(again.skipped == 9);
        }
    }

    SECTION("a 1x1 grid is equivalent to a plain run") {
        const std::string base = small_decode_config("greedy", 4);
        Json grid;
        grid["greedy.tokens"] = {16};
        const auto result = sweep(base, grid, dir.path.string(), 1);
        CHECK(result.completed == 1);

        const auto direct = parse_run_config(base);
        std::ostringstream os;
        run(direct, os);
        const auto direct_summary = parse_records(os.str()).back()["data"];

        std::ifstream is(dir.path / "cell_0.ndjson");
        std::string content((std::istreambuf_iterator<char>(is)),
                            std::istreambuf_iterator<char>());
        CHECK(parse_records(content).back()["data"] == direct_summary);
    }

    SECTION("width grid gives strictly decreasing parameter counts") {
        Json base;
        base["mode"] = "prune";
        base["seed"] = 11;
        base["model"] = {{"vocab_size", 16}, {"d_model", 8},  {"num_q_heads", 2},
                         {"num_kv_heads", 1}, {"d_ff", 20},    {"max_seq", 32}};
        base["prune"] = {{"kind", "width"}, {"batch_samples", 2}, {"batch_len", 6}};
        Json grid;
        grid["prune.percent"] = {5, 10, 20};
        const auto result = sweep(base.dump(), grid, dir.path.string(), 1);
        REQUIRE(result.completed == 3);

        std::vector<std::size_t> params_after;
        for (int cell = 0; cell < 3; ++cell) {
            std::ifstream is(dir.path / ("cell_" + std::to_string(cell) + ".ndjson"));
            std::string content((std::istreambuf_iterator<char>(is)),
                                std::istreambuf_iterator<char>());
            params_after.push_back(
                parse_records(content).back()["data"]["params_after"].get<std::size_t>());
        }
        CHECK(params_after[0] > params_after[1]);
        CHECK(params_after[1] > params_after[2]);
    }

    SECTION("depth grid covers the 1/5/20/50 percent levels") {
        Json base;
        base["mode"] = "prune";
        base["seed"] = 12;
        base["model"] = {{"vocab_size", 16}, {"num_layers", 10}, {"d_model", 8},
                         {"num_q_heads", 2},  {"num_kv_heads", 1}, {"d_ff", 8},
                         {"max_seq", 32}};
        base["prune"] = {{"kind", "depth"}, {"batch_samples", 2}, {"batch_len", 6}};
        Json grid;
        grid["prune.percent"] = {1, 5, 20, 50};
        const auto result = sweep(base.dump(), grid, dir.path.string(), 2);
        REQUIRE(result.completed == 4);

        std::vector<std::size_t> layers_after;
        for (int cell = 0; cell < 4; ++cell) {
            std::ifstream is(dir.path / ("cell_" + std::to_string(cell) + ".ndjson"));
            std::string content((std::istreambuf_iterator<char>(is)),
                                std::istreambuf_iterator<char>());
            layers_after.push_back(
                parse_records(content).back()["data"]["layers_after"].get<std::size_t>());
        }
        CHECK(layers_after == std::vector<std::size_t>{10, 10, 8, 5});
    }

    SECTION("failed cells are reported per cell, not fatally") {
        const std::string base = small_decode_config("greedy", 4);
        Json grid;
        grid["greedy.tokens"] = {16, 100000}; // second cell exceeds max_seq
        const auto result = sweep(base, grid, dir.path.string(), 1);
        CHECK(result.completed == 1);
        CHECK(result.failed == 1);
        std::ifstream is(dir.path / "manifest.json");
        const Json manifest = Json::parse(is);
        CHECK(manifest["failed"].size() == 1);
    }
}

TEST_CASE("report aggregates summary records into CSV") {
    SECTION("empty input yields only the header") {
        std::ostringstream os;
        report_csv({}, os);
        CHECK(os.str() == "mode,metric,count,mean,std\n");
    }

    SECTION("two identical-seed runs aggregate with zero std") {
        const auto config = parse_run_config(small_decode_config("lookahead", 21));
        std::ostringstream a, b;
        run(config, a);
        run(config, b);
        auto records = parse_records(a.str());
        const auto more = parse_records(b.str());
        records.insert(records.end(), more.begin(), more.end());

        std::ostringstream csv;
        report_csv(records, csv);
        std::istringstream lines(csv.str());
        std::string line;
        std::getline(lines, line); // header
        bool saw_compression = false;
        while (std::getline(lines, line)) {
            std::istringstream fields(line);
            std::string mode, metric, count, mean, stddev;
            std::getline(fields, mode, ',');
            std::getline(fields, metric, ',');
            std::getline(fields, count, ',');
            std::getline(fields, mean, ',');
            std::getline(fields, stddev, ',');
            CHECK(mode == "lookahead");
            CHECK(count == "2");
            CHECK(std::stod(stddev) == 0.0);
            if (metric == "compression") saw_compression = true;
        }
        CHECK(saw_compression);
    }
}
