#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>

#include "common.hpp"

namespace brasyn {

// Deterministic splitmix64 stream. Used for every random decision in the
// pipeline so runs are reproducible from explicit seeds alone; the state is
// a single word and round-trips through checkpoints as text.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // [0,1)
    double uniform() {
        return double(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // inclusive range
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        BRASYN_CHECK(hi >= lo, "uniform_int: empty range");
        std::uint64_t span = std::uint64_t(hi - lo) + 1;
        return lo + std::int64_t(next_u64() % span);
    }

    // Box-Muller, no cached second value so state stays a single word.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double std) { return mean + std * normal(); }

    std::uint64_t state() const { return state_; }
    void set_state(std::uint64_t s) { state_ = s; }

    std::string state_str() const { return std::to_string(state_); }
    void set_state_str(const std::string& s) { state_ = std::stoull(s); }

    // Independent child stream, e.g. one per worker or per case.
    Rng fork(std::uint64_t salt) {
        Rng child(state_ ^ (0xd1b54a32d192ed03ull * (salt + 1)));
        child.next_u64();
        return child;
    }

private:
    std::uint64_t state_;
};

} // namespace brasyn
