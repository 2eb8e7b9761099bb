// Fixed binary masks that replace dropout layers. Generated once, before
// training, and immutable thereafter; the sample index picks a row.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace uivim {

struct MaskConfig {
    size_t n_samples = 4;   // number of masks N
    size_t width = 11;      // channel count C
    double drop_rate = 0.5; // fraction of channels zeroed per mask
    uint64_t seed = 0;
    std::optional<double> max_overlap;  // cap on pairwise Jaccard of kept sets

    // Channels kept per mask: k = round(C * (1 - p)).
    size_t keep_count() const;
    void validate() const;
};

class MaskSet {
public:
    MaskSet() = default;
    MaskSet(MaskConfig config, std::vector<uint8_t> rows, bool overlap_warning);

    const MaskConfig& config() const { return config_; }
    size_t n_samples() const { return config_.n_samples; }
    size_t width() const { return config_.width; }
    bool overlap_warning() const { return overlap_warning_; }

    std::span<const uint8_t> row(size_t sample) const;
    std::vector<uint32_t> kept_indices(size_t sample) const;  // strictly increasing

    // Packed row-major bits (width rounded up to whole bytes per row).
    std::vector<uint8_t> pack_bits() const;
    static MaskSet unpack_bits(const MaskConfig& config, std::span<const uint8_t> bits,
                               bool overlap_warning);

    bool operator==(const MaskSet& other) const {
        return rows_ == other.rows_ && config_.n_samples == other.config_.n_samples &&
               config_.width == other.config_.width;
    }

private:
    MaskConfig config_;
    std::vector<uint8_t> rows_;  // row-major N x C, values 0/1
    bool overlap_warning_ = false;
};

// Deterministic per seed. Every row has exactly keep_count() ones, every
// column is kept by at least one row, and rows are pairwise distinct when the
// combinatorics allow it. With max_overlap set, rejection-resamples within a
// bounded retry budget and returns the best found (warning flag set) if the
// cap cannot be met.
MaskSet generate_masks(const MaskConfig& config);

// Elementwise product with the selected mask row.
std::vector<double> apply_mask(std::span<const double> activations, const MaskSet& masks,
                               size_t sample_index);

}  // namespace uivim
