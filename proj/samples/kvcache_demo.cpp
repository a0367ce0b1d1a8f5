// Copyright (C) 2026 the inferlab authors
// SPDX-License-Identifier: Apache-2.0
//
// Paged KV cache in a few lines: append a stream of keys/values, fork a
// sequence to share its prefix, and compare the raw and INT8-quantized
// memory footprints.
#include <iostream>

#include "inferlab/paged_kv.hpp"

int main() {
    using namespace inferlab;

    PagedCacheConfig config;
    config.block_size = 16;
    config.max_blocks = 64;
    config.layers = 2;
    config.kv_heads = 2;
    config.head_dim = 16;

    PagedCacheConfig quantized = config;
    quantized.quant.enabled = true;
    quantized.quant.bits = 8;

    PagedKvCache raw(config), packed(quantized);
    const auto a = raw.alloc_sequence();
    const auto b = packed.alloc_sequence();

    Rng rng(3);
    const std::size_t width = config.layers * config.kv_heads * config.head_dim;
    for (int i = 0; i < 100; ++i) {
        std::vector<double> k(width), v(width);
        for (auto& x : k) x = rng.normal();
        for (auto& x : v) x = rng.normal();
        raw.append_kv(a, k, v);
        packed.append_kv(b, k, v);
    }

    const auto child = raw.fork_prefix(a);
    std::cout << "blocks used after fork: " << raw.stats().blocks_used
              << " (shared: " << raw.stats().shared_blocks << ")\n";
    raw.drop_sequence(child);

    const auto rs = raw.stats();
    const auto qs = packed.stats();
    std::cout << "raw bytes:   " << rs.bytes_physical << "\n";
    std::cout << "int8 bytes:  " << qs.bytes_physical << " ("
              << 100.0 * static_cast<double>(qs.bytes_physical) /
                     static_cast<double>(rs.bytes_physical)
              << "% of raw)\n";

    std::vector<double> q(config.head_dim, 0.25);
    const auto exact = raw.paged_attention(q, a, 0, 0);
    const auto approx = packed.paged_attention(q, b, 0, 0);
    double worst = 0.0;
    for (std::size_t i = 0; i < exact.size(); ++i)
        worst = std::max(worst, std::abs(exact[i] - approx[i]));
    std::cout << "max attention error from INT8 cache: " << worst << "\n";
    return 0;
}
