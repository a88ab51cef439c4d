#include "milstm/rng.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>

namespace milstm {

namespace {

inline uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t rotl(uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
}

}  // namespace

Rng::Rng(uint64_t seed) {
    uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
}

uint64_t Rng::next_u64() {
    uint64_t result = rotl(s_[1] * 5, 7) * 9;
    uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
}

double Rng::normal(double mean, double sd) {
    return mean + sd * normal();
}

size_t Rng::index(size_t n) {
    if (n == 0) throw ContractError("Rng::index: n must be positive");
    // rejection to avoid modulo bias
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v;
    do {
        v = next_u64();
    } while (v >= limit);
    return static_cast<size_t>(v % n);
}

std::vector<size_t> Rng::permutation(size_t n) {
    std::vector<size_t> p(n);
    for (size_t i = 0; i < n; ++i) p[i] = i;
    shuffle(p);
    return p;
}

std::vector<size_t> Rng::derangement(size_t n) {
    if (n < 2) throw ContractError("Rng::derangement: need n >= 2");
    while (true) {
        std::vector<size_t> p = permutation(n);
        bool ok = true;
        for (size_t i = 0; i < n; ++i) {
            if (p[i] == i) {
                ok = false;
                break;
            }
        }
        if (ok) return p;
    }
}

std::vector<uint64_t> Rng::state() const {
    return {s_[0], s_[1], s_[2], s_[3]};
}

void Rng::set_state(const std::vector<uint64_t>& s) {
    if (s.size() != 4) throw ContractError("Rng::set_state: expected 4 words");
    for (int i = 0; i < 4; ++i) s_[i] = s[i];
    has_spare_ = false;
}

uint64_t derive_seed(uint64_t root, std::string_view label) {
    uint64_t x = root ^ fnv1a64(label);
    return splitmix64(x);
}

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

}  // namespace milstm
