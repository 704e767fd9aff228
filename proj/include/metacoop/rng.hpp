#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <utility>
#include <vector>

namespace metacoop {

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace detail

// Splittable generator. The engine is mt19937_64 and every real-valued draw is
// derived from raw 64-bit outputs with fixed arithmetic, so streams are the
// same on every conforming platform (std distributions are not).
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(detail::splitmix64(seed)) {}

    std::uint64_t seed() const noexcept { return seed_; }

    // Independent substream keyed by index; does not advance this generator.
    Rng split(std::uint64_t index) const {
        return Rng(detail::splitmix64(seed_ ^ detail::splitmix64(index + 0x632be59bd9b4e019ULL)));
    }

    std::uint64_t next_u64() { return engine_(); }

    // [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller, one value per call.
    double normal() {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Uniform integer in [0, n).
    std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

}  // namespace metacoop
