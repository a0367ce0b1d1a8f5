// Copyright (C) 2026 the inferlab authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite runner: one pass/fail line per criterion, exit code 4 on
// any failure. Also runnable via `inferlab selftest`.
#include <cstdlib>
#include <iostream>
#include <string>

#include "inferlab/acceptance.hpp"

int main(int argc, char** argv) {
    const std::uint64_t seed = argc > 1 ? std::stoull(argv[1]) : 42;
    std::cout << "inferlab acceptance suite (root seed " << seed << ")\n";
    const auto results = inferlab::run_acceptance(seed, &std::cout);
    const bool passed = inferlab::acceptance_passed(results);
    std::cout << (passed ? "ACCEPTANCE PASSED" : "ACCEPTANCE FAILED") << " ("
              << results.size() << " criteria)\n";
    return passed ? 0 : 4;
}
