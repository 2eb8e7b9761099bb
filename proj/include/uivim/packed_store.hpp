// Mask-zero-skipping weight store: a batch-norm-folded net quantized to
// Q3.12 with only the weights that survive each mask, one complete copy per
// mask sample. Rows of a masked layer are dropped for channels its own mask
// zeroes; columns of the next layer are dropped for the same channels.
// quantized_forward is the bit-exact reference the accelerator simulator is
// held to.

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "uivim/fixed_point.hpp"
#include "uivim/ivim.hpp"
#include "uivim/network.hpp"

namespace uivim {

// One sub-network's surviving weights for one mask sample.
struct PackedSample {
    std::vector<uint32_t> kept1;  // surviving channels of mask1, strictly increasing
    std::vector<uint32_t> kept2;  // surviving channels of mask2, strictly increasing
    std::vector<fx::Word> w1;     // kept1.size() x n_b (layer-1 input side is dense)
    std::vector<fx::Word> b1;     // kept1.size()
    std::vector<fx::Word> w2;     // kept2.size() x kept1.size()
    std::vector<fx::Word> b2;     // kept2.size()
    std::vector<fx::Word> enc_w;  // kept2.size()
    fx::Word enc_b = 0;

    size_t words() const {
        return w1.size() + b1.size() + w2.size() + b2.size() + enc_w.size() + 1;
    }
};

struct PackedSubnet {
    std::vector<PackedSample> samples;  // exactly N entries
    Interval range;
};

struct PackedWeightStore {
    BValueSchedule schedule;
    size_t n_samples = 0;
    std::array<PackedSubnet, 4> subnets;  // order (D, Dstar, f, S0)
    uint64_t model_seed = 0;

    size_t n_b() const { return schedule.size(); }
    // Total stored weight + bias words across all samples and sub-networks.
    size_t packed_words() const;
    // Word count of the dense (unmasked) equivalent, for storage ratios.
    size_t dense_words() const;
    void validate() const;
};

// Quantizes a folded net and drops masked-off rows/columns. Rejects unfolded
// nets and masks with empty kept sets.
PackedWeightStore pack_weights(const UIvimNet& folded_net);

// Fixed-point reference inference: packed linear -> ReLU -> packed linear ->
// ReLU -> encoder, all in Q3.12; the encoder word is dequantized and the
// sigmoid + range conversion run in double precision (head post-processing).
IvimParams quantized_forward(const PackedWeightStore& store, std::span<const fx::Word> voxel,
                             size_t sample);

// Dequantized encoder outputs before the head, for drift measurements
// against the float reference.
std::array<double, 4> quantized_head_logits(const PackedWeightStore& store,
                                            std::span<const fx::Word> voxel, size_t sample);

// Scatter sample `sample` of a packed sub-network back to dense Q3.12
// matrices (zeros where weights were skipped). Test oracle for equivalence.
struct DenseSubnetWords {
    std::vector<fx::Word> w1, b1, w2, b2, enc_w;
    fx::Word enc_b = 0;
};
DenseSubnetWords unpack_dense(const PackedWeightStore& store, size_t subnet, size_t sample);

// UIVQ v1 container (JSON header + int16 blocks, see docs/formats.md).
void save_store(const std::string& path, const PackedWeightStore& store);
PackedWeightStore load_store(const std::string& path);

}  // namespace uivim
