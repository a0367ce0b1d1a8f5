// Copyright (C) 2026 the inferlab authors
// SPDX-License-Identifier: Apache-2.0
//
// Versioned binary weights container.
//
//   magic "ILAB" | u32 version | config (8 x u64) | u32 tensor count |
//   per tensor: u32 name length | name bytes | u64 rows | u64 cols |
//               rows*cols float64 payload
//
// All integers and floats are little-endian; doubles are written via their
// IEEE-754 bit pattern, so save -> load -> save is byte-identical.
#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "inferlab/model.hpp"

namespace inferlab {

inline constexpr std::uint32_t kWeightsFormatVersion = 1;
inline constexpr char kWeightsMagic[4] = {'I', 'L', 'A', 'B'};

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 8);
}

inline std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    INFERLAB_CHECK(is.good(), "weights file truncated");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline std::uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    INFERLAB_CHECK(is.good(), "weights file truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline void write_tensor(std::ostream& os, const std::string& name, const Matrix& m) {
    write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u64(os, m.rows);
    write_u64(os, m.cols);
    for (const double v : m.data) write_u64(os, std::bit_cast<std::uint64_t>(v));
}

inline std::pair<std::string, Matrix> read_tensor(std::istream& is) {
    const std::uint32_t name_len = read_u32(is);
    INFERLAB_CHECK(name_len <= 4096, "weights file: unreasonable tensor name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    INFERLAB_CHECK(is.good(), "weights file truncated");
    const std::uint64_t rows = read_u64(is);
    const std::uint64_t cols = read_u64(is);
    Matrix m(rows, cols);
    for (double& v : m.data) v = std::bit_cast<double>(read_u64(is));
    return {std::move(name), std::move(m)};
}

inline Matrix vec_as_row(const std::vector<double>& v) {
    Matrix m(1, v.size());
    m.data = v;
    return m;
}

} // namespace detail

inline void save_weights(std::ostream& os, const ModelParams& params) {
    params.validate();
    const auto& cfg = params.config;
    os.write(kWeightsMagic, 4);
    detail::write_u32(os, kWeightsFormatVersion);
    detail::write_u64(os, cfg.vocab_size);
    detail::write_u64(os, cfg.num_layers);
    detail::write_u64(os, cfg.d_model);
    detail::write_u64(os, cfg.num_q_heads);
    detail::write_u64(os, cfg.num_kv_heads);
    detail::write_u64(os, cfg.d_ff);
    detail::write_u64(os, cfg.max_seq);
    detail::write_u64(os, cfg.seed);

    const std::uint32_t tensor_count = static_cast<std::uint32_t>(3 + 9 * params.layers.size());
    detail::write_u32(os, tensor_count);
    detail::write_tensor(os, "token_embedding", params.token_embedding);
    detail::write_tensor(os, "position_embedding", params.position_embedding);
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        const auto& lp = params.layers[l];
        const std::string prefix = "layers." + std::to_string(l) + ".";
        detail::write_tensor(os, prefix + "ln_scale", detail::vec_as_row(lp.ln_scale));
        detail::write_tensor(os, prefix + "ln_shift", detail::vec_as_row(lp.ln_shift));
        detail::write_tensor(os, prefix + "w_q", lp.w_q);
        detail::write_tensor(os, prefix + "w_k", lp.w_k);
        detail::write_tensor(os, prefix + "w_v", lp.w_v);
        detail::write_tensor(os, prefix + "w_o", lp.w_o);
        detail::write_tensor(os, prefix + "w1_gate", lp.w1_gate);
        detail::write_tensor(os, prefix + "w1_up", lp.w1_up);
        detail::write_tensor(os, prefix + "w2", lp.w2);
    }
    detail::write_tensor(os, "unembedding", params.unembedding);
    INFERLAB_CHECK(os.good(), "failed writing weights stream");
}

inline void save_weights(const std::string& path, const ModelParams& params) {
    std::ofstream os(path, std::ios::binary);
    INFERLAB_CHECK(os.is_open(), "cannot open weights file for writing: ", path);
    save_weights(os, params);
}

inline ModelParams load_weights(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    INFERLAB_CHECK(is.good() && std::equal(magic, magic + 4, kWeightsMagic),
                   "not an inferlab weights file");
    const std::uint32_t version = detail::read_u32(is);
    INFERLAB_CHECK(version == kWeightsFormatVersion, "unsupported weights format version ",
                   version);

    ModelParams p;
    p.config.vocab_size = detail::read_u64(is);
    p.config.num_layers = detail::read_u64(is);
    p.config.d_model = detail::read_u64(is);
    p.config.num_q_heads = detail::read_u64(is);
    p.config.num_kv_heads = detail::read_u64(is);
    p.config.d_ff = detail::read_u64(is);
    p.config.max_seq = detail::read_u64(is);
    p.config.seed = detail::read_u64(is);
    p.config.validate();

    const std::uint32_t tensor_count = detail::read_u32(is);
    INFERLAB_CHECK(tensor_count == 3 + 9 * p.config.num_layers,
                   "weights file: tensor count does not match layer count");

    p.layers.resize(p.config.num_layers);
    for (std::uint32_t i = 0; i < tensor_count; ++i) {
        auto [name, tensor] = detail::read_tensor(is);
        if (name == "token_embedding") {
            p.token_embedding = std::move(tensor);
        } else if (name == "position_embedding") {
            p.position_embedding = std::move(tensor);
        } else if (name == "unembedding") {
            p.unembedding = std::move(tensor);
        } else if (name.rfind("layers.", 0) == 0) {
            const std::size_t dot = name.find('.', 7);
            INFERLAB_CHECK(dot != std::string::npos, "weights file: bad tensor name ", name);
            const std::size_t layer = std::stoul(name.substr(7, dot - 7));
            INFERLAB_CHECK(layer < p.layers.size(), "weights file: layer index out of range in ",
                           name);
            const std::string field = name.substr(dot + 1);
            auto& lp = p.layers[layer];
            if (field == "ln_scale") lp.ln_scale = std::move(tensor.data);
            else if (field == "ln_shift") lp.ln_shift = std::move(tensor.data);
            else if (field == "w_q") lp.w_q = std::move(tensor);
            else if (field == "w_k") lp.w_k = std::move(tensor);
            else if (field == "w_v") lp.w_v = std::move(tensor);
            else if (field == "w_o") lp.w_o = std::move(tensor);
            else if (field == "w1_gate") lp.w1_gate = std::move(tensor);
            else if (field == "w1_up") lp.w1_up = std::move(tensor);
            else if (field == "w2") lp.w2 = std::move(tensor);
            else INFERLAB_CHECK(false, "weights file: unknown tensor ", name);
        } else {
            INFERLAB_CHECK(false, "weights file: unknown tensor ", name);
        }
    }
    p.validate();
    return p;
}

inline ModelParams load_weights(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    INFERLAB_CHECK(is.is_open(), "cannot open weights file: ", path);
    return load_weights(is);
}

} // namespace inferlab
