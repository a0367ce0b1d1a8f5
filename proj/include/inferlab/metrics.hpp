// Copyright (C) 2026 the inferlab authors
// SPDX-License-Identifier: Apache-2.0
//
// Newline-delimited JSON metrics records. Every record carries the schema
// version, a run id, its mode, a kind (config, step or summary) and a
// monotone sequence number; the payload sits under "data". Runs are
// deterministic byte-for-byte given (config, seed) once timestamps are
// stripped, which is what the self-test diffs.
#pragma once

#include <chrono>
#include <cmath>
#include <ctime>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "inferlab/common.hpp"

namespace inferlab {

using Json = nlohmann::ordered_json;

inline std::string iso8601_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// Emits one NDJSON record per call with a fixed field order.
class MetricsWriter {
public:
    MetricsWriter(std::ostream& os, std::string run_id, std::string mode)
        : os_(&os), run_id_(std::move(run_id)), mode_(std::move(mode)) {}

    void config(const Json& parsed, const std::string& raw_text) {
        Json data;
        data["config"] = parsed;
        data["config_text"] = raw_text;
        emit("config", data);
    }

    void step(const Json& data) { emit("step", data); }
    void summary(const Json& data) { emit("summary", data); }

private:
    void emit(const char* kind, const Json& data) {
        Json record;
        record["schema_version"] = kSchemaVersion;
        record["run_id"] = run_id_;
        record["mode"] = mode_;
        record["kind"] = kind;
        record["seq"] = seq_++;
        record["timestamp"] = iso8601_now();
        record["data"] = data;
        (*os_) << record.dump() << '\n';
    }

    std::ostream* os_;
    std::string run_id_;
    std::string mode_;
    std::size_t seq_ = 0;
};

/// Removes the timestamp field from every record so two runs of the same
/// (config, seed) compare byte-for-byte.
inline std::string strip_timestamps(const std::string& ndjson) {
    std::istringstream is(ndjson);
    std::ostringstream os;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        Json record = Json::parse(line);
        record.erase("timestamp");
        os << record.dump() << '\n';
    }
    return os.str();
}

namespace detail {

inline bool all_numbers_finite(const Json& value) {
    if (value.is_number_float()) return std::isfinite(value.get<double>());
    if (value.is_object() || value.is_array()) {
        for (const auto& child : value)
            if (!all_numbers_finite(child)) return false;
    }
    return true;
}

} // namespace detail

/// Structural validation mirroring schemas/metrics-v1.json: required fields,
/// types, known kinds, and finite numeric payloads.
inline void validate_record(const Json& record) {
    INFERLAB_CHECK(record.is_object(), "metrics record must be an object");
    INFERLAB_CHECK(record.contains("schema_version") && record["schema_version"].is_number_integer(),
                   "metrics record missing integer schema_version");
    INFERLAB_CHECK(record["schema_version"].get<int>() == kSchemaVersion,
                   "metrics schema version mismatch: got ", record["schema_version"].get<int>(),
                   ", expected ", kSchemaVersion);
    for (const char* field : {"run_id", "mode", "kind", "timestamp"})
        INFERLAB_CHECK(record.contains(field) && record[field].is_string(),
                       "metrics record missing string field '", field, "'");
    INFERLAB_CHECK(record.contains("seq") && record["seq"].is_number_integer(),
                   "metrics record missing integer seq");
    const std::string kind = record["kind"].get<std::string>();
    INFERLAB_CHECK(kind == "config" || kind == "step" || kind == "summary",
                   "metrics record has unknown kind '", kind, "'");
    INFERLAB_CHECK(record.contains("data") && record["data"].is_object(),
                   "metrics record missing data object");
    INFERLAB_CHECK(detail::all_numbers_finite(record["data"]),
                   "metrics record contains non-finite numbers");
}

// ---------------------------------------------------------------------------
// Report: summary records -> CSV
// ---------------------------------------------------------------------------

/// Aggregates summary records into per-(mode, metric) rows with mean and
/// standard deviation over runs (population std; 0 for a single run). For
/// lookahead summaries a derived `compression` metric tokens/steps is added.
/// CSV columns are fixed: mode,metric,count,mean,std.
inline void report_csv(const std::vector<Json>& records, std::ostream& os) {
    struct Samples {
        std::vector<double> values;
    };
    std::map<std::string, std::map<std::string, Samples>> table; // mode -> metric -> samples

    for (const auto& record : records) {
        validate_record(record);
        if (record["kind"].get<std::string>() != "summary") continue;
        const std::string mode = record["mode"].get<std::string>();
        Json data = record["data"];
        if (mode == "lookahead" && data.contains("tokens_generated") && data.contains("steps")) {
            const double steps = data["steps"].get<double>();
            if (steps > 0)
                data["compression"] = data["tokens_generated"].get<double>() / steps;
        }
        for (const auto& [key, value] : data.items()) {
            if (value.is_number())
                table[mode][key].values.push_back(value.get<double>());
        }
    }

    os << "mode,metric,count,mean,std\n";
    for (const auto& [mode, metrics] : table) {
        for (const auto& [metric, samples] : metrics) {
            const auto& v = samples.values;
            double mean = 0.0;
            for (const double x : v) mean += x;
            mean /= static_cast<double>(v.size());
            double var = 0.0;
            for (const double x : v) var += (x - mean) * (x - mean);
            var /= static_cast<double>(v.size());
            os << mode << ',' << metric << ',' << v.size() << ',' << mean << ','
               << std::sqrt(var) << '\n';
        }
    }
}

} // namespace inferlab
