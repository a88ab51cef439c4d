#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "milstm/common.hpp"

namespace milstm {

// xoshiro256** seeded through splitmix64. Integer-only state transitions,
// so the u64 stream is identical on every platform for a given seed.
class Rng {
public:
    explicit Rng(uint64_t seed);

    uint64_t next_u64();

    // [0, 1), 53-bit resolution
    double uniform();
    double uniform(double lo, double hi);

    // Box-Muller with cached spare
    double normal();
    double normal(double mean, double sd);

    // unbiased integer in [0, n)
    size_t index(size_t n);

    std::vector<size_t> permutation(size_t n);

    // permutation with no fixed points (n >= 2)
    std::vector<size_t> derangement(size_t n);

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    // Serializable state (4 words).
    std::vector<uint64_t> state() const;
    void set_state(const std::vector<uint64_t>& s);

private:
    uint64_t s_[4];
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Labeled sub-stream derivation: all randomness in a run flows from one root
// seed, with independent streams per purpose (data/init/shuffle/eval/...).
uint64_t derive_seed(uint64_t root, std::string_view label);

}  // namespace milstm
