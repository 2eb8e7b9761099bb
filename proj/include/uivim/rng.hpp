// Counter-based random number generation (Philox4x32-10).
//
// Every random draw in this project is a pure function of (seed, stream id,
// position), so results never depend on evaluation order or thread count.
// Stream ids are built from a small tag plus an index (voxel, layer, epoch);
// see stream_id() below. The block function reproduces the Random123
// philox4x32-10 known-answer vectors (frozen in test_rng.cpp).

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

namespace uivim::rng {

// Finalizing mix (splitmix64); used to derive stream keys.
inline uint64_t mix64(uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

// Philox4x32-10 block function: 128-bit counter, 64-bit key -> 128 bits.
inline std::array<uint32_t, 4> philox4x32(std::array<uint32_t, 4> ctr, uint64_t key) {
    uint32_t k0 = static_cast<uint32_t>(key);
    uint32_t k1 = static_cast<uint32_t>(key >> 32);
    for (int round = 0; round < 10; ++round) {
        if (round > 0) {
            k0 += 0x9E3779B9u;
            k1 += 0xBB67AE85u;
        }
        const uint64_t p0 = 0xD2511F53ull * ctr[0];
        const uint64_t p1 = 0xCD9E8D57ull * ctr[2];
        ctr = {static_cast<uint32_t>(p1 >> 32) ^ ctr[1] ^ k0,
               static_cast<uint32_t>(p1),
               static_cast<uint32_t>(p0 >> 32) ^ ctr[3] ^ k1,
               static_cast<uint32_t>(p0)};
    }
    return ctr;
}

// Stream id layout: high byte is a purpose tag, low 56 bits an index.
enum class Tag : uint64_t {
    params = 1,      // per-voxel parameter draws
    noise = 2,       // per-voxel noise draws
    weights = 3,     // per-layer weight init
    masks = 4,       // per-layer mask generation
    shuffle = 5,     // per-epoch batch shuffling
    snr_level = 6,   // per-SNR-level dataset sub-seeds
    split = 7,       // generic derived seeds
};

inline uint64_t stream_id(Tag tag, uint64_t index) {
    return (static_cast<uint64_t>(tag) << 56) | (index & 0x00FFFFFFFFFFFFFFull);
}

// Derive an independent 64-bit seed from (seed, tag, index).
inline uint64_t derive_seed(uint64_t seed, Tag tag, uint64_t index) {
    return mix64(mix64(seed) ^ mix64(stream_id(tag, index)));
}

// A sequential view of one Philox stream. Cheap to construct; holds only the
// key, the block counter and a 4-word buffer.
class Stream {
public:
    Stream(uint64_t seed, Tag tag, uint64_t index)
        : key_(mix64(mix64(seed) ^ mix64(stream_id(tag, index)))) {}

    explicit Stream(uint64_t raw_key) : key_(raw_key) {}

    uint32_t next_u32() {
        if (pos_ == 4) {
            buf_ = philox4x32({static_cast<uint32_t>(block_),
                               static_cast<uint32_t>(block_ >> 32), 0, 0},
                              key_);
            ++block_;
            pos_ = 0;
        }
        return buf_[pos_++];
    }

    uint64_t next_u64() {
        const uint64_t lo = next_u32();
        const uint64_t hi = next_u32();
        return lo | (hi << 32);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + uniform() * (hi - lo); }

    // Standard normal via Box-Muller; second value of each pair is cached.
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        // u1 in (0, 1] so log() is finite.
        const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return r * std::cos(a);
    }

    // Uniform integer in [0, n), rejection sampled (portable, unbiased).
    uint64_t bounded(uint64_t n) {
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    // Fisher-Yates shuffle with explicit bounded draws (stdlib shuffle is
    // implementation-defined and would break cross-platform determinism).
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[bounded(i)]);
        }
    }

private:
    uint64_t key_;
    uint64_t block_ = 0;
    std::array<uint32_t, 4> buf_{};
    int pos_ = 4;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

}  // namespace uivim::rng
