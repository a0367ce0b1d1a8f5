// Copyright (C) 2026 the inferlab authors
// SPDX-License-Identifier: Apache-2.0
//
// Minimal library walkthrough: build a seeded toy model, decode the same
// prompt greedily and with lookahead, and show that the outputs agree while
// lookahead takes fewer sequential steps.
#include <iostream>

#include "inferlab/lookahead.hpp"

int main() {
    using namespace inferlab;

    ModelConfig config; // desk-scale defaults: 2 layers, d_model 32, |V| 64
    config.seed = 7;
    const ModelParams params = init_params(config);

    const TokenSeq prompt{11, 4, 58, 23, 9, 30, 17, 2};
    const std::size_t count = 128;

    const TokenSeq greedy = greedy_decode(params, prompt, count);

    LookaheadConfig lc; // N=5 window rows, L=10 columns, G=5 candidates
    const LookaheadResult look = lookahead_decode(params, prompt, count, lc, /*seed=*/1);

    std::cout << "greedy steps:    " << count << "\n";
    std::cout << "lookahead steps: " << look.stats.steps << " (mean accept "
              << look.stats.mean_accept() << ")\n";
    std::cout << "outputs identical: " << (greedy == look.tokens ? "yes" : "no") << "\n";

    std::cout << "first tokens:";
    for (std::size_t i = 0; i < 12; ++i) std::cout << ' ' << look.tokens[i];
    std::cout << " ...\n";
    return 0;
}
