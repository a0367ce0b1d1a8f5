// Copyright (C) 2026 the inferlab authors
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace inferlab {

inline constexpr int kSchemaVersion = 1;

class error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shape or value violates a declared invariant of a configuration type.
class invalid_config : public error {
public:
    using error::error;
};

/// The paged allocator ran out of physical blocks.
class out_of_blocks : public error {
public:
    using error::error;
};

namespace detail {

template <typename E, typename... Args>
[[noreturn]] void raise(Args&&... args) {
    std::ostringstream os;
    (os << ... << args);
    throw E(os.str());
}

} // namespace detail

#define INFERLAB_CHECK(cond, ...)                                              \
    do {                                                                       \
        if (!(cond))                                                           \
            ::inferlab::detail::raise<::inferlab::error>(__VA_ARGS__);         \
    } while (false)

#define INFERLAB_CHECK_CONFIG(cond, ...)                                       \
    do {                                                                       \
        if (!(cond))                                                           \
            ::inferlab::detail::raise<::inferlab::invalid_config>(__VA_ARGS__);\
    } while (false)

namespace log {

using Sink = std::function<void(std::string_view)>;

/// Process-wide warning sink; swap it out in tests to capture warnings.
inline Sink& warn_sink() {
    static Sink sink = [](std::string_view msg) {
        std::cerr << "[inferlab] warning: " << msg << '\n';
    };
    return sink;
}

inline void warn(std::string_view msg) {
    if (warn_sink()) warn_sink()(msg);
}

} // namespace log

/// Deterministic random stream.
///
/// All draws reduce to the fully specified std::mt19937_64 output sequence:
///  - uniform():  (x >> 11) * 2^-53, values in [0, 1)
///  - uniform_open(): same mapping, rejecting exact zeros, values in (0, 1)
///  - normal():   Box-Muller from two independent uniforms
///  - below(n):   rejection sampling on the top of the 64-bit range
/// so identical seeds give identical sequences on every platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform_open() {
        double u = uniform();
        while (u == 0.0) u = uniform();
        return u;
    }

    double normal() {
        const double u1 = uniform_open();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    /// Unbiased integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        INFERLAB_CHECK(n > 0, "Rng::below requires n > 0");
        const std::uint64_t bound =
            std::numeric_limits<std::uint64_t>::max() -
            std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x = next_u64();
        while (x >= bound) x = next_u64();
        return x % n;
    }

    /// Derives a named sub-stream seed from a root seed. FNV-1a over the
    /// stream name mixed with the root, finalized with a splitmix64 round,
    /// so stages of a run are independently reproducible.
    static std::uint64_t derive(std::uint64_t root, std::string_view stream,
                                std::uint64_t index = 0) {
        std::uint64_t h = 1469598103934665603ull;
        auto mix = [&h](std::uint64_t v) {
            for (int i = 0; i < 8; ++i) {
                h ^= (v >> (8 * i)) & 0xff;
                h *= 1099511628211ull;
            }
        };
        mix(root);
        for (const char c : stream) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ull;
        }
        mix(index);
        // splitmix64 finalizer
        h += 0x9e3779b97f4a7c15ull;
        h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
        h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
        return h ^ (h >> 31);
    }

private:
    std::mt19937_64 gen_;
};

} // namespace inferlab
