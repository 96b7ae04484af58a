#include "taskspace/rng.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <numbers>

#include "taskspace/common.hpp"

namespace taskspace {

std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

Rng::Rng(std::uint64_t seed) : base_seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& word : state_) word = splitmix64(sm);
}

Rng Rng::substream(std::string_view name) const {
    return Rng(base_seed_ ^ fnv1a64(name));
}

std::uint64_t Rng::next_u64() {
    auto rotl = [](std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); };
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
}

double Rng::uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) fail(Errc::invalid_argument, "Rng::below: n must be > 0");
    if ((n & (n - 1)) == 0) return next_u64() & (n - 1);
    // rejection sampling keeps the distribution exactly uniform
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
}

double Rng::normal(double mean, double stddev) {
    if (has_gauss_spare_) {
        has_gauss_spare_ = false;
        return mean + gauss_spare_ * stddev;
    }
    const double angle = uniform01() * 2.0 * std::numbers::pi;
    const double radius = std::sqrt(-2.0 * std::log(1.0 - uniform01()));
    gauss_spare_ = radius * std::sin(angle);
    has_gauss_spare_ = true;
    return mean + radius * std::cos(angle) * stddev;
}

std::string Rng::serialize() const {
    std::string out;
    for (auto word : state_) out += hex_u64(word);
    out += hex_u64(std::bit_cast<std::uint64_t>(gauss_spare_));
    out += has_gauss_spare_ ? '1' : '0';
    out += hex_u64(base_seed_);
    return out;
}

Rng Rng::deserialize(std::string_view text) {
    if (text.size() != 16 * 6 + 1) fail(Errc::invalid_argument, "Rng state: bad length");
    auto word = [&](int i) {
        std::uint64_t v = 0;
        for (int k = 0; k < 16; ++k) {
            char c = text[static_cast<std::size_t>(i * 16 + k)];
            int digit = c >= '0' && c <= '9' ? c - '0'
                        : c >= 'a' && c <= 'f' ? c - 'a' + 10
                                               : -1;
            if (digit < 0) fail(Errc::invalid_argument, "Rng state: bad hex digit");
            v = (v << 4) | static_cast<std::uint64_t>(digit);
        }
        return v;
    };
    Rng rng(0);
    for (int i = 0; i < 4; ++i) rng.state_[i] = word(i);
    rng.gauss_spare_ = std::bit_cast<double>(word(4));
    rng.has_gauss_spare_ = text[80] == '1';
    std::uint64_t v = 0;
    for (int k = 0; k < 16; ++k) {
        char c = text[81 + static_cast<std::size_t>(k)];
        int digit = c >= '0' && c <= '9' ? c - '0' : c >= 'a' && c <= 'f' ? c - 'a' + 10 : -1;
        if (digit < 0) fail(Errc::invalid_argument, "Rng state: bad hex digit");
        v = (v << 4) | static_cast<std::uint64_t>(digit);
    }
    rng.base_seed_ = v;
    return rng;
}

}  // namespace taskspace
