// 16-bit fixed-point number system used by the accelerator datapath:
// signed Q3.12 (4 integer bits including sign, 12 fractional bits),
// two's complement, range [-8, 8 - 2^-12], resolution 2^-12.
//
// Rounding is round-to-nearest-even with saturation everywhere. A dot
// product keeps exact 32-bit products in a 64-bit accumulator and rounds
// exactly once, after the bias add, mirroring a DSP cascade.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace uivim::fx {

inline constexpr int kTotalBits = 16;
inline constexpr int kIntegerBits = 4;  // includes the sign bit
inline constexpr int kFracBits = 12;
inline constexpr int32_t kScale = 1 << kFracBits;
inline constexpr int16_t kMaxWord = INT16_MAX;
inline constexpr int16_t kMinWord = INT16_MIN;

using Word = int16_t;

// Round-to-nearest-even to a multiple of 2^-12, saturating at the range
// limits. Total on finite inputs; throws on NaN.
Word quantize(double x);

inline double dequantize(Word w) { return static_cast<double>(w) / kScale; }

// Exact RNE right-shift by kFracBits on a raw Q-scaled accumulator value.
int64_t round_shift_even(int64_t acc);

inline Word saturate(int64_t raw) {
    if (raw > kMaxWord) return kMaxWord;
    if (raw < kMinWord) return kMinWord;
    return static_cast<Word>(raw);
}

// Dot product plus bias: products exact in 32 bits, accumulated in 64 bits,
// one rounding + saturation at the end.
Word mul_acc(std::span<const Word> weights, std::span<const Word> inputs, Word bias);

inline Word relu(Word w) { return w < 0 ? Word{0} : w; }

std::vector<Word> quantize_vector(std::span<const float> values);
std::vector<Word> quantize_vector(std::span<const double> values);

}  // namespace uivim::fx
