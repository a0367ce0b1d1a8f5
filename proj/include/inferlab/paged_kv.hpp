// Copyright (C) 2026 the inferlab authors
// SPDX-License-Identifier: Apache-2.0
//
// Paged KV-cache manager: fixed-size blocks holding B consecutive tokens of
// keys/values for every (layer, kv head), per-sequence block tables mapping
// logical block indices to physical blocks, lazy allocation, copy-on-write
// prefix sharing, block-wise attention over the cache and optional
// group-wise integer quantization of filled blocks.
#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <mutex>
#include <span>
#include <unordered_map>
#include <vector>

#include "inferlab/common.hpp"
#include "inferlab/quantize.hpp"

namespace inferlab {

/// Quantization policy for filled blocks. Groups are column ranges of each
/// (layer, head) B x d_h matrix; group_cols == 0 means one group spanning
/// all d_h columns. The sensitivity veto can exempt designated groups, which
/// then stay in raw 64-bit form inside an otherwise quantized block.
struct QuantPolicy {
    bool enabled = false;
    int bits = 8;
    std::size_t group_cols = 0;
    std::function<bool(std::size_t layer, std::size_t head, std::size_t logical_block,
                       std::size_t group)>
        veto;
};

struct PagedCacheConfig {
    std::size_t block_size = 16; // B tokens per block
    std::size_t max_blocks = 1024;
    std::size_t layers = 1;
    std::size_t kv_heads = 1;
    std::size_t head_dim = 1;
    QuantPolicy quant;

    void validate() const {
        INFERLAB_CHECK_CONFIG(block_size >= 1 && max_blocks >= 1 && layers >= 1 &&
                                  kv_heads >= 1 && head_dim >= 1,
                              "paged cache dimensions must be >= 1");
        if (quant.enabled) {
            check_quant_bits(quant.bits);
            INFERLAB_CHECK_CONFIG(quant.group_cols <= head_dim,
                                  "quant group width exceeds head_dim");
        }
    }
};

struct CacheStats {
    std::size_t blocks_used = 0;
    std::size_t blocks_free = 0;
    std::size_t shared_blocks = 0; // refcount > 1
    std::uint64_t bytes_logical = 0;
    std::uint64_t bytes_physical = 0;
};

class PagedKvCache {
public:
    using SeqId = std::uint64_t;

    explicit PagedKvCache(PagedCacheConfig config) : cfg_(std::move(config)), blocks_(cfg_.max_blocks) {
        cfg_.validate();
        free_list_.reserve(cfg_.max_blocks);
        for (std::size_t i = cfg_.max_blocks; i-- > 0;) free_list_.push_back(i);
    }

    const PagedCacheConfig& config() const { return cfg_; }

    /// Registers an empty sequence; no physical block is allocated until the
    /// first token is appended.
    SeqId alloc_sequence() {
        std::lock_guard<std::mutex> guard(mutex_);
        const SeqId id = next_seq_++;
        tables_.emplace(id, Table{});
        return id;
    }

    void drop_sequence(SeqId seq) {
        std::lock_guard<std::mutex> guard(mutex_);
        auto it = tables_.find(seq);
        INFERLAB_CHECK(it != tables_.end(), "drop_sequence: unknown sequence ", seq);
        for (const std::size_t id : it->second.entries) release_block_locked(id);
        tables_.erase(it);
    }

    /// Child shares every parent block; refcounts increase, physical block
    /// count does not.
    SeqId fork_prefix(SeqId seq) {
        std::lock_guard<std::mutex> guard(mutex_);
        const Table& parent = table_locked(seq);
        const SeqId id = next_seq_++;
        Table child = parent;
        for (const std::size_t bid : child.entries)
            blocks_[bid].refcount.fetch_add(1, std::memory_order_relaxed);
        tables_.emplace(id, std::move(child));
        return id;
    }

    /// Appends one token's keys/values across all layers and kv heads.
    /// Layout of `k` and `v`: [layer][head][dim], layers*kv_heads*head_dim
    /// doubles. Allocates a block exactly at block boundaries; writing into
    /// a shared partial block duplicates it first (copy-on-write).
    void append_kv(SeqId seq, std::span<const double> k, std::span<const double> v) {
        const std::size_t token_width = cfg_.layers * cfg_.kv_heads * cfg_.head_dim;
        INFERLAB_CHECK(k.size() == token_width && v.size() == token_width,
                       "append_kv: expected ", token_width, " values per side");

        Table* t = nullptr;
        {
            std::lock_guard<std::mutex> guard(mutex_);
            t = &table_locked(seq);
        }
        const std::size_t slot = t->logical_len % cfg_.block_size;
        if (slot == 0) {
            t->entries.push_back(alloc_block());
        } else {
            Block& last = blocks_[t->entries.back()];
            if (last.refcount.load(std::memory_order_acquire) > 1) cow_duplicate(*t);
        }

        Block& block = blocks_[t->entries.back()];
        INFERLAB_CHECK(!block.quantized, "append into a quantized block");
        const std::size_t B = cfg_.block_size;
        const std::size_t dh = cfg_.head_dim;
        for (std::size_t l = 0; l < cfg_.layers; ++l)
            for (std::size_t h = 0; h < cfg_.kv_heads; ++h) {
                const std::size_t src = (l * cfg_.kv_heads + h) * dh;
                const std::size_t dst = ((l * cfg_.kv_heads + h) * B + slot) * dh;
                for (std::size_t i = 0; i < dh; ++i) {
                    block.raw_keys[dst + i] = k[src + i];
                    block.raw_values[dst + i] = v[src + i];
                }
            }
        block.fill = slot + 1;
        t->logical_len += 1;

        if (block.fill == B && cfg_.quant.enabled)
            quantize_block(block, t->entries.size() - 1);
    }

    std::size_t sequence_length(SeqId seq) const {
        std::lock_guard<std::mutex> guard(mutex_);
        return table_locked(seq).logical_len;
    }

    std::vector<std::size_t> block_table(SeqId seq) const {
        std::lock_guard<std::mutex> guard(mutex_);
        return table_locked(seq).entries;
    }

    int block_refcount(std::size_t block_id) const {
        INFERLAB_CHECK(block_id < blocks_.size(), "block id out of range");
        return blocks_[block_id].refcount.load(std::memory_order_acquire);
    }

    std::vector<SeqId> live_sequences() const {
        std::lock_guard<std::mutex> guard(mutex_);
        std::vector<SeqId> ids;
        ids.reserve(tables_.size());
        for (const auto& [id, table] : tables_) ids.push_back(id);
        return ids;
    }

    /// Logically contiguous keys for one (layer, head): len x d_h, row-major.
    std::vector<double> gather_keys(SeqId seq, std::size_t layer, std::size_t head) const {
        return gather(seq, layer, head, /*keys=*/true);
    }
    std::vector<double> gather_values(SeqId seq, std::size_t layer, std::size_t head) const {
        return gather(seq, layer, head, /*keys=*/false);
    }

    /// Block-wise attention of one query vector over the cached sequence:
    /// per-block scores q^T K_j / sqrt(d_h), merged under a global softmax
    /// via the online max/normalizer updates, then the value average. Equals
    /// attention over the logically contiguous cache.
    std::vector<double> paged_attention(std::span<const double> q, SeqId seq, std::size_t layer,
                                        std::size_t head) const {
        INFERLAB_CHECK(q.size() == cfg_.head_dim, "paged_attention: query must have d_h entries");
        check_layer_head(layer, head);

        std::vector<std::size_t> entries;
        std::size_t len = 0;
        {
            std::lock_guard<std::mutex> guard(mutex_);
            const Table& t = table_locked(seq);
            entries = t.entries;
            len = t.logical_len;
        }
        INFERLAB_CHECK(len >= 1, "paged_attention: empty cache");

        const std::size_t B = cfg_.block_size;
        const std::size_t dh = cfg_.head_dim;
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

        double m = -std::numeric_limits<double>::infinity();
        double l_sum = 0.0;
        std::vector<double> acc(dh, 0.0);
        std::vector<double> kbuf, vbuf, scores;

        for (std::size_t b = 0; b < entries.size(); ++b) {
            const std::size_t rows = std::min(B, len - b * B);
            read_block(blocks_[entries[b]], layer, head, rows, true, kbuf);
            read_block(blocks_[entries[b]], layer, head, rows, false, vbuf);

            scores.resize(rows);
            double m_local = -std::numeric_limits<double>::infinity();
            for (std::size_t r = 0; r < rows; ++r) {
                double s = 0.0;
                for (std::size_t i = 0; i < dh; ++i) s += q[i] * kbuf[r * dh + i];
                scores[r] = s * inv_sqrt;
                m_local = std::max(m_local, scores[r]);
            }
            const double m_new = std::max(m, m_local);
            const double scale_old = (l_sum == 0.0) ? 0.0 : std::exp(m - m_new);
            for (double& x : acc) x *= scale_old;
            l_sum *= scale_old;
            for (std::size_t r = 0; r < rows; ++r) {
                const double w = std::exp(scores[r] - m_new);
                l_sum += w;
                for (std::size_t i = 0; i < dh; ++i) acc[i] += w * vbuf[r * dh + i];
            }
            m = m_new;
        }

        for (double& x : acc) x /= l_sum;
        return acc;
    }

    /// Exact bookkeeping. bytes_logical charges every cached token at the
    /// 64-bit reference width; bytes_physical charges allocated blocks at
    /// their stored width (n-bit codes plus group metadata when quantized),
    /// counting each shared block once.
    CacheStats stats() const {
        std::lock_guard<std::mutex> guard(mutex_);
        CacheStats s;
        const std::size_t token_bytes = cfg_.layers * cfg_.kv_heads * cfg_.head_dim * 2 * sizeof(double);
        for (const auto& [id, t] : tables_)
            s.bytes_logical += static_cast<std::uint64_t>(t.logical_len) * token_bytes;
        for (const auto& block : blocks_) {
            const int rc = block.refcount.load(std::memory_order_acquire);
            if (rc == 0) continue;
            ++s.blocks_used;
            if (rc > 1) ++s.shared_blocks;
            s.bytes_physical += block_bytes(block);
        }
        s.blocks_free = cfg_.max_blocks - s.blocks_used;
        return s;
    }

private:
    struct GroupPayload {
        bool quantized = false;
        QuantizedGroup q;
        std::vector<double> raw; // kept for vetoed groups
        std::size_t col0 = 0;
        std::size_t cols = 0;
    };

    struct Block {
        std::vector<double> raw_keys;   // [layer][head][slot][dim]
        std::vector<double> raw_values;
        std::vector<std::vector<GroupPayload>> key_groups;   // per layer*head
        std::vector<std::vector<GroupPayload>> value_groups;
        std::size_t fill = 0;
        bool quantized = false;
        std::atomic<int> refcount{0};
    };

    struct Table {
        std::vector<std::size_t> entries;
        std::size_t logical_len = 0;
    };

    Table& table_locked(SeqId seq) {
        auto it = tables_.find(seq);
        INFERLAB_CHECK(it != tables_.end(), "unknown sequence ", seq);
        return it->second;
    }
    const Table& table_locked(SeqId seq) const {
        auto it = tables_.find(seq);
        INFERLAB_CHECK(it != tables_.end(), "unknown sequence ", seq);
        return it->second;
    }

    void check_layer_head(std::size_t layer, std::size_t head) const {
        INFERLAB_CHECK(layer < cfg_.layers && head < cfg_.kv_heads,
                       "layer/head out of range");
    }

    std::size_t alloc_block() {
        std::lock_guard<std::mutex> guard(mutex_);
        if (free_list_.empty())
            detail::raise<out_of_blocks>("paged cache exhausted: all ", cfg_.max_blocks,
                                         " blocks in use");
        const std::size_t id = free_list_.back();
        free_list_.pop_back();
        Block& b = blocks_[id];
        const std::size_t payload = cfg_.layers * cfg_.kv_heads * cfg_.block_size * cfg_.head_dim;
        b.raw_keys.assign(payload, 0.0);
        b.raw_values.assign(payload, 0.0);
        b.key_groups.clear();
        b.value_groups.clear();
        b.fill = 0;
        b.quantized = false;
        b.refcount.store(1, std::memory_order_release);
        return id;
    }

    void release_block_locked(std::size_t id) {
        Block& b = blocks_[id];
        if (b.refcount.fetch_sub(1, std::memory_order_acq_rel) == 1) {
            b.raw_keys.clear();
            b.raw_values.clear();
            b.key_groups.clear();
            b.value_groups.clear();
            b.fill = 0;
            b.quantized = false;
            free_list_.push_back(id);
        }
    }

    /// Replaces the (shared, raw) last block of `t` with a private copy.
    void cow_duplicate(Table& t) {
        const std::size_t old_id = t.entries.back();
        const std::size_t new_id = alloc_block();
        Block& src = blocks_[old_id];
        Block& dst = blocks_[new_id];
        INFERLAB_CHECK(!src.quantized, "copy-on-write source must be a raw partial block");
        dst.raw_keys = src.raw_keys;
        dst.raw_values = src.raw_values;
        dst.fill = t.logical_len % cfg_.block_size;
        t.entries.back() = new_id;
        std::lock_guard<std::mutex> guard(mutex_);
        release_block_locked(old_id);
    }

    void quantize_block(Block& block, std::size_t logical_index) {
        const std::size_t B = cfg_.block_size;
        const std::size_t dh = cfg_.head_dim;
        const std::size_t group_cols = cfg_.quant.group_cols == 0 ? dh : cfg_.quant.group_cols;

        block.key_groups.resize(cfg_.layers * cfg_.kv_heads);
        block.value_groups.resize(cfg_.layers * cfg_.kv_heads);
        std::vector<double> scratch;
        for (std::size_t l = 0; l < cfg_.layers; ++l)
            for (std::size_t h = 0; h < cfg_.kv_heads; ++h) {
                const std::size_t lh = l * cfg_.kv_heads + h;
                for (int side = 0; side < 2; ++side) {
                    const std::vector<double>& raw = side == 0 ? block.raw_keys : block.raw_values;
                    auto& groups = side == 0 ? block.key_groups[lh] : block.value_groups[lh];
                    for (std::size_t col0 = 0, g = 0; col0 < dh; col0 += group_cols, ++g) {
                        GroupPayload payload;
                        payload.col0 = col0;
                        payload.cols = std::min(group_cols, dh - col0);
                        scratch.clear();
                        for (std::size_t slot = 0; slot < B; ++slot)
                            for (std::size_t c = 0; c < payload.cols; ++c)
                                scratch.push_back(raw[(lh * B + slot) * dh + col0 + c]);
                        const bool vetoed =
                            cfg_.quant.veto && cfg_.quant.veto(l, h, logical_index, g);
                        if (vetoed) {
                            payload.raw = scratch;
                        } else {
                            payload.quantized = true;
                            payload.q = quantize_group(scratch, cfg_.quant.bits);
                        }
                        groups.push_back(std::move(payload));
                    }
                }
            }
        block.quantized = true;
        block.raw_keys.clear();
        block.raw_keys.shrink_to_fit();
        block.raw_values.clear();
        block.raw_values.shrink_to_fit();
    }

    /// Materializes `rows` rows of one (layer, head) matrix of a block.
    void read_block(const Block& block, std::size_t layer, std::size_t head, std::size_t rows,
                    bool keys, std::vector<double>& out) const {
        const std::size_t B = cfg_.block_size;
        const std::size_t dh = cfg_.head_dim;
        const std::size_t lh = layer * cfg_.kv_heads + head;
        out.assign(rows * dh, 0.0);
        if (!block.quantized) {
            const std::vector<double>& raw = keys ? block.raw_keys : block.raw_values;
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t i = 0; i < dh; ++i) out[r * dh + i] = raw[(lh * B + r) * dh + i];
            return;
        }
        const auto& groups = keys ? block.key_groups[lh] : block.value_groups[lh];
        for (const auto& payload : groups) {
            const std::vector<double> values =
                payload.quantized ? dequantize_group(payload.q) : payload.raw;
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < payload.cols; ++c)
                    out[r * dh + payload.col0 + c] = values[r * payload.cols + c];
        }
    }

    std::vector<double> gather(SeqId seq, std::size_t layer, std::size_t head, bool keys) const {
        check_layer_head(layer, head);
        std::vector<std::size_t> entries;
        std::size_t len = 0;
        {
            std::lock_guard<std::mutex> guard(mutex_);
            const Table& t = table_locked(seq);
            entries = t.entries;
            len = t.logical_len;
        }
        const std::size_t B = cfg_.block_size;
        const std::size_t dh = cfg_.head_dim;
        std::vector<double> out(len * dh);
        std::vector<double> buf;
        for (std::size_t b = 0; b < entries.size(); ++b) {
            const std::size_t rows = std::min(B, len - b * B);
            read_block(blocks_[entries[b]], layer, head, rows, keys, buf);
            std::copy(buf.begin(), buf.begin() + rows * dh, out.begin() + b * B * dh);
        }
        return out;
    }

    std::uint64_t block_bytes(const Block& block) const {
        if (!block.quantized)
            return static_cast<std::uint64_t>(block.raw_keys.size() + block.raw_values.size()) *
                   sizeof(double);
        std::uint64_t bytes = 0;
        for (const auto* side : {&block.key_groups, &block.value_groups})
            for (const auto& groups : *side)
                for (const auto& payload : groups)
                    bytes += payload.quantized
                                 ? quantized_group_bytes(payload.q.size(), payload.q.bits)
                                 : payload.raw.size() * sizeof(double);
        return bytes;
    }

    PagedCacheConfig cfg_;
    std::vector<Block> blocks_;
    std::vector<std::size_t> free_list_;
    std::unordered_map<SeqId, Table> tables_;
    SeqId next_seq_ = 1;
    mutable std::mutex mutex_;
};

} // namespace inferlab
