#pragma once

// Counter-based random numbers. Every draw is a pure function of
// (seed, particle, block, stream), so results do not depend on how particles
// are split across threads or in which order they are visited.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>

namespace efree {

// Philox4x32 with 10 rounds (Salmon et al., SC'11).
class Philox4x32 {
public:
    using Counter = std::array<std::uint32_t, 4>;
    using Key = std::array<std::uint32_t, 2>;

    static Counter apply(Counter ctr, Key key) {
        for (int round = 0; round < 10; ++round) {
            if (round > 0) {
                key[0] += kWeyl0;
                key[1] += kWeyl1;
            }
            const std::uint64_t p0 = std::uint64_t{kMul0} * ctr[0];
            const std::uint64_t p1 = std::uint64_t{kMul1} * ctr[2];
            const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
            const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
            ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
        }
        return ctr;
    }

private:
    static constexpr std::uint32_t kMul0 = 0xD2511F53u;
    static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
    static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
    static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
};

// Identifies an independent family of draws under one seed.
struct RngStream {
    std::uint64_t seed = 0;
    std::uint64_t stream = 0;
};

// Uniform in (0, 1) from the top 52 of 64 random bits; never returns 0 or
// 1 (with 53 bits the largest value would round up to 1).
inline double uniform_open(std::uint32_t hi, std::uint32_t lo) {
    const std::uint64_t bits = (std::uint64_t{hi} << 32 | lo) >> 12;
    return (static_cast<double>(bits) + 0.5) * 0x1.0p-52;
}

// Two independent standard normals for the given particle and block.
inline std::pair<double, double> normal_pair(const RngStream& s, std::uint32_t particle,
                                             std::uint32_t block) {
    const Philox4x32::Counter out = Philox4x32::apply(
        {particle, block, static_cast<std::uint32_t>(s.stream), static_cast<std::uint32_t>(s.stream >> 32)},
        {static_cast<std::uint32_t>(s.seed), static_cast<std::uint32_t>(s.seed >> 32)});
    const double u1 = uniform_open(out[0], out[1]);
    const double u2 = uniform_open(out[2], out[3]);
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    return {radius * std::cos(angle), radius * std::sin(angle)};
}

} // namespace efree
