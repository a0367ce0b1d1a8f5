// Copyright (C) 2026 the inferlab authors
// SPDX-License-Identifier: Apache-2.0
//
// Group-wise integer quantization for cached keys/values:
//
//   alpha_g = (max - min) / (2^n - 1)
//   z_g     = round(min / alpha_g)
//   code    = clamp(round(x / alpha_g - z_g), 0, 2^n - 1)
//   x_hat   = alpha_g * (code + z_g)
//
// which bounds the per-element round-trip error by alpha_g / 2. A constant
// group (max == min) would make alpha zero, so it is encoded exactly with
// alpha = 1, z_g = min and all-zero codes.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "inferlab/common.hpp"

namespace inferlab {

struct QuantizedGroup {
    std::vector<std::int32_t> codes; // in [0, 2^n - 1]
    double scale = 1.0;              // alpha_g >= 0
    double zero_point = 0.0;         // z_g
    int bits = 8;                    // n in {4, 8}

    std::size_t size() const { return codes.size(); }
};

inline void check_quant_bits(int bits) {
    INFERLAB_CHECK(bits == 4 || bits == 8, "quantization bits must be 4 or 8, got ", bits);
}

inline QuantizedGroup quantize_group(std::span<const double> values, int bits) {
    check_quant_bits(bits);
    INFERLAB_CHECK(!values.empty(), "quantize_group: empty group");

    double lo = values[0], hi = values[0];
    for (const double v : values) {
        INFERLAB_CHECK(std::isfinite(v), "quantize_group: non-finite value");
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }

    QuantizedGroup group;
    group.bits = bits;
    group.codes.resize(values.size());

    if (hi == lo) {
        // Degenerate range: encode the constant exactly.
        group.scale = 1.0;
        group.zero_point = lo;
        return group;
    }

    const double levels = static_cast<double>((1 << bits) - 1);
    group.scale = (hi - lo) / levels;
    group.zero_point = std::nearbyint(lo / group.scale);
    const std::int32_t max_code = (1 << bits) - 1;
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double code = std::nearbyint(values[i] / group.scale - group.zero_point);
        group.codes[i] =
            static_cast<std::int32_t>(std::clamp(code, 0.0, static_cast<double>(max_code)));
    }
    return group;
}

inline std::vector<double> dequantize_group(const QuantizedGroup& group) {
    check_quant_bits(group.bits);
    std::vector<double> out(group.codes.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = group.scale * (static_cast<double>(group.codes[i]) + group.zero_point);
    return out;
}

/// Payload bytes of a stored group: packed n-bit codes plus the group
/// metadata (scale and zero point as 8-byte floats).
inline std::size_t quantized_group_bytes(std::size_t elements, int bits) {
    check_quant_bits(bits);
    return (elements * static_cast<std::size_t>(bits) + 7) / 8 + 2 * sizeof(double);
}

} // namespace inferlab
