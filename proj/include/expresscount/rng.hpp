#pragma once

#include <cstdint>
#include <random>

namespace expresscount {

// Deterministic generator with hand-rolled distribution mappings; the
// standard distributions are not guaranteed to produce the same stream across
// library implementations, which would break byte-identical corpora.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    // Inclusive on both ends.
    int uniform_int(int lo, int hi);
    bool bernoulli(double p) { return uniform() < p; }
    double normal();
    // Normal with the given std, resampled until inside two standard deviations.
    double truncated_normal(double stddev);

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Mixes several integers into one seed (splitmix64 finaliser).
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0);

} // namespace expresscount
