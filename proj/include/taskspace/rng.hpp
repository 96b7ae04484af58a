#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace taskspace {

/// Deterministic RNG with a fully specified algorithm (xoshiro256**), so
/// seeded runs are bit-identical across platforms and standard-library
/// versions. std::normal_distribution is deliberately avoided: its algorithm
/// is implementation-defined.
class Rng {
public:
    Rng() : Rng(0) {}
    explicit Rng(std::uint64_t seed);

    /// Independent substream derived from (seed, name). Streams with
    /// different names never share state.
    Rng substream(std::string_view name) const;

    std::uint64_t next_u64();

    /// Uniform in [0, 1) with 53 random bits.
    double uniform01();

    /// Uniform integer in [0, n). n must be > 0.
    std::uint64_t below(std::uint64_t n);

    /// Box-Muller with a cached spare.
    double normal(double mean = 0.0, double stddev = 1.0);

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// Hex-encoded full state; round-trips through deserialize.
    std::string serialize() const;
    static Rng deserialize(std::string_view text);

    bool operator==(const Rng&) const = default;

private:
    std::uint64_t state_[4];
    double gauss_spare_ = 0.0;
    bool has_gauss_spare_ = false;
    std::uint64_t base_seed_ = 0;
};

/// splitmix64 step; also used to derive substream seeds.
std::uint64_t splitmix64(std::uint64_t& state);

}  // namespace taskspace
