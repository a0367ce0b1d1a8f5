// Copyright (C) 2026 the inferlab authors
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance suite: ten numbered criteria covering lossless
// lookahead decoding, blockwise-attention and paged-cache equivalence, the
// quantization error law, gradient fidelity, test-time-scaling invariants,
// pruning structural equivalence, GRPO correctness and training trend, and
// byte-level determinism of the metrics streams. Every tolerance is pinned
// here; the `selftest` CLI subcommand and the ctest acceptance binary both
// run this.
#pragma once

#include <sstream>

#include "inferlab/acceptance_detail.hpp"

namespace inferlab {

struct CriterionResult {
    int index = 0;
    std::string name;
    bool passed = false;
    std::string detail;
};

inline std::vector<CriterionResult> run_acceptance(std::uint64_t root_seed,
                                                   std::ostream* progress = nullptr) {
    std::vector<CriterionResult> results;
    auto record = [&results, progress](int index, const std::string& name, bool passed,
                                       const std::string& detail) {
        results.push_back({index, name, passed, detail});
        if (progress)
            (*progress) << (passed ? "[PASS] " : "[FAIL] ") << index << ' ' << name << " — "
                        << detail << std::endl;
    };

    {
        const auto r = acceptance_detail::lookahead_losslessness(root_seed);
        record(1, "lookahead-losslessness", r.exact_matches == r.total_runs,
               std::to_string(r.exact_matches) + "/" + std::to_string(r.total_runs) +
                   " byte-equal to greedy (T=256, N=5, L=10, G=5)");
        std::ostringstream detail;
        detail.precision(3);
        detail << "mean step compression T/steps = " << r.compression << " (reported; proxy target 1.2)"
               << ", mean accept = " << r.mean_accept;
        record(2, "lookahead-step-compression", r.compression > 1.0, detail.str());
    }

    {
        const auto r = acceptance_detail::blockwise_equivalence(root_seed);
        std::ostringstream detail;
        detail << "max |flash - naive|: f64 " << r.worst_f64 << " (<= 1e-10), f32 " << r.worst_f32
               << " (<= 1e-5) over " << r.cases << " cases";
        record(3, "blockwise-attention-equivalence", r.worst_f64 <= 1e-10 && r.worst_f32 <= 1e-5,
               detail.str());
    }

    {
        const auto r = acceptance_detail::paged_cache_equivalence(root_seed);
        std::ostringstream detail;
        detail << "max paged-vs-contiguous diff " << r.worst_diff << " (<= 1e-5) over " << r.traces
               << " traces; block-count law " << (r.block_law_held ? "held" : "VIOLATED")
               << "; COW isolation " << r.fork_isolated << "/" << r.fork_scenarios;
        record(4, "paged-cache-equivalence",
               r.worst_diff <= 1e-5 && r.block_law_held && r.fork_isolated == r.fork_scenarios,
               detail.str());
    }

    {
        const auto r = acceptance_detail::quantization_error_law(root_seed);
        std::ostringstream detail;
        detail << r.values_checked << " values; per-element law "
               << (r.law_held ? "held" : "VIOLATED") << "; max err int8 " << r.worst_int8
               << " <= int4 " << r.worst_int4;
        record(5, "quantization-error-law", r.law_held && r.worst_int8 <= r.worst_int4,
               detail.str());
    }

    {
        const auto r = acceptance_detail::gradient_fidelity(root_seed);
        std::ostringstream detail;
        detail << "worst rel err: sites " << r.worst_site << ", params " << r.worst_param
               << ", grpo objective " << r.worst_grpo << ", prune objective " << r.worst_prune
               << " (all <= 1e-4, " << r.seeds << " seeds)";
        record(6, "gradient-fidelity",
               r.worst_site <= 1e-4 && r.worst_param <= 1e-4 && r.worst_grpo <= 1e-4 &&
                   r.worst_prune <= 1e-4,
               detail.str());
    }

    {
        const auto r = acceptance_detail::tts_invariants(root_seed);
        std::ostringstream detail;
        detail << r.trajectories << " trajectories (n=4, lambda=0.5, K=2); weight-sum dev "
               << r.worst_weight_dev << " (<= 1e-8); entropy bounds "
               << (r.entropy_bounds_held ? "held" : "VIOLATED") << "; lambda endpoints "
               << (r.endpoints_held ? "held" : "VIOLATED") << "; consensus duplication-stable "
               << (r.consensus_stable ? "yes" : "NO") << "; critic non-decrease "
               << (r.critic_monotone ? "yes" : "NO");
        record(7, "test-time-scaling-invariants",
               r.worst_weight_dev <= 1e-8 && r.entropy_bounds_held && r.endpoints_held &&
                   r.consensus_stable && r.critic_monotone,
               detail.str());
    }

    {
        const auto r = acceptance_detail::pruning_structural_equivalence(root_seed);
        std::ostringstream detail;
        detail << "gated-vs-pruned max diff " << r.worst_diff << " (<= 1e-12, " << r.masks
               << " masks x " << r.inputs << " inputs); parameter law "
               << (r.param_law_exact ? "exact" : "VIOLATED") << "; Spearman " << r.worst_spearman
               << " (>= 0.6)";
        record(8, "pruning-structural-equivalence",
               r.worst_diff <= 1e-12 && r.param_law_exact && r.worst_spearman >= 0.6,
               detail.str());
    }

    {
        const auto r = acceptance_detail::grpo_correctness(root_seed);
        std::ostringstream detail;
        detail << "advantage mean dev " << r.worst_mean_dev << " (<= 1e-8), std dev "
               << r.worst_std_dev << " (<= 1e-6); |objective at init| " << r.objective_at_init
               << " (<= 1e-12); copy-task improved " << r.improved_seeds << "/10 (>= 8)";
        record(9, "grpo-correctness-and-trend",
               r.worst_mean_dev <= 1e-8 && r.worst_std_dev <= 1e-6 &&
                   r.objective_at_init <= 1e-12 && r.improved_seeds >= 8,
               detail.str());
    }

    {
        const auto r = acceptance_detail::end_to_end_determinism(root_seed);
        std::ostringstream detail;
        detail << r.identical_runs << "/" << r.total_runs
               << " run pairs byte-identical (timestamps excluded); " << r.records_validated
               << " records validated against schema v" << kSchemaVersion;
        record(10, "end-to-end-determinism",
               r.identical_runs == r.total_runs && r.schema_valid, detail.str());
    }

    return results;
}

inline bool acceptance_passed(const std::vector<CriterionResult>& results) {
    return std::all_of(results.begin(), results.end(),
                       [](const CriterionResult& r) { return r.passed; });
}

} // namespace inferlab
