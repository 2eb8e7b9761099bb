#include "uivim/fixed_point.hpp"

#include <cmath>
#include <stdexcept>

namespace uivim::fx {

Word quantize(double x) {
    if (std::isnan(x)) throw std::invalid_argument("quantize: NaN input");
    const double scaled = x * kScale;
    if (scaled >= static_cast<double>(kMaxWord)) return kMaxWord;
    if (scaled <= static_cast<double>(kMinWord)) return kMinWord;
    const double fl = std::floor(scaled);
    const double frac = scaled - fl;
    int64_t q = static_cast<int64_t>(fl);
    if (frac > 0.5) {
        ++q;
    } else if (frac == 0.5) {
        if (q % 2 != 0) ++q;  // ties to even
    }
    return saturate(q);
}

int64_t round_shift_even(int64_t acc) {
    const int64_t base = acc >> kFracBits;  // floor for negatives too
    const int64_t rem = acc & (kScale - 1);
    constexpr int64_t half = kScale / 2;
    if (rem > half) return base + 1;
    if (rem == half) return base + (base & 1);
    return base;
}

Word mul_acc(std::span<const Word> weights, std::span<const Word> inputs, Word bias) {
    if (weights.size() != inputs.size())
        throw std::invalid_argument("mul_acc: length mismatch");
    int64_t acc = 0;  // Q6.24-scaled, exact
    for (size_t i = 0; i < weights.size(); ++i)
        acc += static_cast<int32_t>(weights[i]) * static_cast<int32_t>(inputs[i]);
    acc += static_cast<int64_t>(bias) << kFracBits;
    return saturate(round_shift_even(acc));
}

std::vector<Word> quantize_vector(std::span<const float> values) {
    std::vector<Word> out(values.size());
    for (size_t i = 0; i < values.size(); ++i) out[i] = quantize(values[i]);
    return out;
}

std::vector<Word> quantize_vector(std::span<const double> values) {
    std::vector<Word> out(values.size());
    for (size_t i = 0; i < values.size(); ++i) out[i] = quantize(values[i]);
    return out;
}

}  // namespace uivim::fx
