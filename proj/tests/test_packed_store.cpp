// Mask-zero-skipping weight packing: storage counts, dense equivalence,
// drift against the float head, and the UIVQ container.

#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <vector>

#include "uivim/fixed_point.hpp"
#include "uivim/ivim.hpp"
#include "uivim/network.hpp"
#include "uivim/packed_store.hpp"

using namespace uivim;

namespace {

std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

std::string read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

BValueSchedule schedule6() { return BValueSchedule{{0, 50, 150, 400, 800, 1000}}; }

UIvimNet folded_net(const BValueSchedule& sched, double drop, size_t n, uint64_t seed) {
    ParamRanges ranges;
    UIvimNet net = init_network(sched, ranges, drop, n, seed);
    std::mt19937_64 gen(seed * 101);
    std::uniform_real_distribution<double> ug(0.7, 1.3), ub(-0.3, 0.3);
    for (auto& sn : net.subnets) {
        for (BatchNorm* bn : {&sn.bn1, &sn.bn2}) {
            for (size_t i = 0; i < bn->gamma.size(); ++i) {
                bn->gamma[i] = ug(gen);
                bn->beta[i] = ub(gen);
                bn->running_mean[i] = ub(gen);
                bn->running_var[i] = ug(gen);
            }
        }
    }
    return fold_batchnorm(net);
}

std::vector<fx::Word> quantized_voxel(size_t n_b, uint64_t seed) {
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<double> u(0.1, 1.2);
    std::vector<double> v(n_b);
    for (double& x : v) x = u(gen);
    return fx::quantize_vector(std::span<const double>(v));
}

// Dense fixed-point forward built from the scattered matrices; must agree
// with the packed path bit for bit because skipped channels hold exact zeros
// and the masked activations never feed the accumulators.
IvimParams dense_fx_forward(const PackedWeightStore& store, size_t sample,
                            std::span<const fx::Word> voxel, std::array<double, 4>* logits) {
    const size_t n = store.n_b();
    IvimParams out;
    std::array<double*, 4> slots{&out.d, &out.dstar, &out.f, &out.s0};
    for (size_t k = 0; k < 4; ++k) {
        const DenseSubnetWords d = unpack_dense(store, k, sample);
        std::vector<fx::Word> a1(n), a2(n);
        for (size_t i = 0; i < n; ++i) {
            a1[i] = fx::relu(
                fx::mul_acc(std::span<const fx::Word>(d.w1.data() + i * n, n), voxel, d.b1[i]));
        }
        for (size_t i = 0; i < n; ++i) {
            a2[i] = fx::relu(
                fx::mul_acc(std::span<const fx::Word>(d.w2.data() + i * n, n), a1, d.b2[i]));
        }
        const fx::Word enc = fx::mul_acc(d.enc_w, a2, d.enc_b);
        const double logit = fx::dequantize(enc);
        if (logits) (*logits)[k] = logit;
        *slots[k] = convert(logit, store.subnets[k].range);
    }
    return out;
}

}  // namespace

TEST_CASE("pack_weights rejects unfolded nets") {
    ParamRanges ranges;
    const UIvimNet net = init_network(schedule6(), ranges, 0.5, 4, 1);
    CHECK_THROWS(pack_weights(net));
    CHECK_NOTHROW(pack_weights(fold_batchnorm(net)));
}

TEST_CASE("packed shapes and word counts for the capacity profile") {
    // 104 b-values, p = 0.5: 52 kept channels per mask. Layer 1 keeps
    // 52 x 104 words (input side dense), layer 2 shrinks to 52 x 52, a
    // quarter of its dense 104 x 104.
    const UIvimNet net = folded_net(BValueSchedule::profile104(), 0.5, 4, 3);
    const PackedWeightStore store = pack_weights(net);
    store.validate();
    CHECK(store.n_samples == 4);
    CHECK(store.n_b() == 104);

    size_t dense_w2 = 104 * 104;
    for (size_t k = 0; k < 4; ++k) {
        REQUIRE(store.subnets[k].samples.size() == 4);
        for (const PackedSample& s : store.subnets[k].samples) {
            CHECK(s.kept1.size() == 52);
            CHECK(s.kept2.size() == 52);
            CHECK(s.w1.size() == 52 * 104);  // half of the dense 104 x 104
            CHECK(s.b1.size() == 52);
            CHECK(s.w2.size() == 52 * 52);
            CHECK(s.w2.size() * 4 == dense_w2);
            CHECK(s.b2.size() == 52);
            CHECK(s.enc_w.size() == 52);
            for (size_t i = 1; i < s.kept1.size(); ++i) CHECK(s.kept1[i] > s.kept1[i - 1]);
            for (size_t i = 1; i < s.kept2.size(); ++i) CHECK(s.kept2[i] > s.kept2[i - 1]);
            CHECK(s.kept1.back() < 104);
            CHECK(s.kept2.back() < 104);
        }
    }

    // Whole-store ratio: per sample and subnet, packed layer words are
    // 52*104 + 52 + 52*52 + 52 + 52 + 1 vs dense 104*104*2 + 104*2 + 104 + 1.
    const size_t per_sample_packed = 52 * 104 + 52 + 52 * 52 + 52 + 52 + 1;
    const size_t per_sample_dense = 104 * 104 * 2 + 104 * 2 + 104 + 1;
    CHECK(store.packed_words() == 4 * 4 * per_sample_packed);
    CHECK(store.dense_words() == 4 * 4 * per_sample_dense);
    CHECK(static_cast<double>(store.packed_words()) / store.dense_words() < 0.5);
}

TEST_CASE("drop rate zero packs the identity layout") {
    const UIvimNet net = folded_net(schedule6(), 0.0, 2, 5);
    const PackedWeightStore store = pack_weights(net);
    CHECK(store.packed_words() == store.dense_words());
    for (size_t k = 0; k < 4; ++k) {
        for (const PackedSample& s : store.subnets[k].samples) {
            REQUIRE(s.kept1.size() == 6);
            for (size_t i = 0; i < 6; ++i) CHECK(s.kept1[i] == i);
            CHECK(s.w1.size() == 36);
            CHECK(s.w2.size() == 36);
        }
        // Identical masks at drop 0: every sample stores the same words.
        CHECK(store.subnets[k].samples[0].w1 == store.subnets[k].samples[1].w1);
        CHECK(store.subnets[k].samples[0].enc_w == store.subnets[k].samples[1].enc_w);
    }

    // Quantization is the only difference from the float net at drop 0.
    for (size_t k = 0; k < 4; ++k) {
        const PackedSample& s = store.subnets[k].samples[0];
        const Linear& l1 = net.subnets[k].l1;
        for (size_t i = 0; i < 6; ++i) {
            for (size_t j = 0; j < 6; ++j) {
                CHECK(s.w1[i * 6 + j] == fx::quantize(l1.w[i * 6 + j]));
            }
            CHECK(s.b1[i] == fx::quantize(l1.b[i]));
        }
        CHECK(s.enc_b == fx::quantize(net.subnets[k].encoder.b[0]));
    }
}

TEST_CASE("packed forward equals the dense scattered forward bit for bit") {
    for (double drop : {0.3, 0.5}) {
        const UIvimNet net = folded_net(schedule6(), drop, 4, 7);
        const PackedWeightStore store = pack_weights(net);
        for (uint64_t vs = 0; vs < 40; ++vs) {
            const auto voxel = quantized_voxel(6, vs + 100);
            for (size_t s = 0; s < 4; ++s) {
                std::array<double, 4> dense_logits{};
                const IvimParams d = dense_fx_forward(store, s, voxel, &dense_logits);
                const IvimParams p = quantized_forward(store, voxel, s);
                const auto packed_logits = quantized_head_logits(store, voxel, s);
                CHECK(p.d == d.d);
                CHECK(p.dstar == d.dstar);
                CHECK(p.f == d.f);
                CHECK(p.s0 == d.s0);
                for (size_t k = 0; k < 4; ++k) CHECK(packed_logits[k] == dense_logits[k]);
            }
        }
    }
}

TEST_CASE("quantized_forward is deterministic and respects the ranges") {
    const UIvimNet net = folded_net(schedule6(), 0.5, 4, 9);
    const PackedWeightStore store = pack_weights(net);
    ParamRanges ranges;
    const auto voxel = quantized_voxel(6, 11);
    const IvimParams a = quantized_forward(store, voxel, 1);
    const IvimParams b = quantized_forward(store, voxel, 1);
    CHECK(a.as_array() == b.as_array());
    CHECK(a.d > ranges.d.min);
    CHECK(a.d < ranges.d.max);
    CHECK(a.s0 > ranges.s0.min);
    CHECK(a.s0 < ranges.s0.max);
    CHECK_THROWS(quantized_forward(store, voxel, 4));  // sample out of range
    const auto short_voxel = quantized_voxel(5, 12);
    CHECK_THROWS(quantized_forward(store, short_voxel, 0));
}

TEST_CASE("zero-weight folded store predicts the range midpoints") {
    ParamRanges ranges;
    UIvimNet net = init_network(schedule6(), ranges, 0.5, 4, 13);
    for (auto& sn : net.subnets) {
        std::fill(sn.l1.w.begin(), sn.l1.w.end(), 0.0);
        std::fill(sn.l1.b.begin(), sn.l1.b.end(), 0.0);
        std::fill(sn.l2.w.begin(), sn.l2.w.end(), 0.0);
        std::fill(sn.l2.b.begin(), sn.l2.b.end(), 0.0);
        std::fill(sn.encoder.w.begin(), sn.encoder.w.end(), 0.0);
        std::fill(sn.encoder.b.begin(), sn.encoder.b.end(), 0.0);
    }
    const PackedWeightStore store = pack_weights(fold_batchnorm(net));
    const auto voxel = quantized_voxel(6, 14);
    const IvimParams p = quantized_forward(store, voxel, 2);
    CHECK(p.d == doctest::Approx((ranges.d.min + ranges.d.max) / 2).epsilon(1e-12));
    CHECK(p.f == doctest::Approx((ranges.f.min + ranges.f.max) / 2).epsilon(1e-12));
}

TEST_CASE("quantized head drifts little from the float head") {
    // Briefly trained net so the weights are in a realistic region.
    ParamRanges ranges;
    const Dataset data = generate_dataset(ranges, schedule6(), 512, NoiseSpec{15.0, 17, true});
    TrainingConfig cfg;
    cfg.max_epochs = 5;
    cfg.patience = 5;
    cfg.batch_size = 64;
    cfg.seed = 19;
    UIvimNet net = init_network(data.schedule, data.ranges, cfg.drop_rate, cfg.n_samples, cfg.seed);
    train(net, data, cfg);
    const UIvimNet folded = fold_batchnorm(net);
    const PackedWeightStore store = pack_weights(folded);

    const std::array<double, 4> widths{
        ranges.d.max - ranges.d.min, ranges.dstar.max - ranges.dstar.min,
        ranges.f.max - ranges.f.min, ranges.s0.max - ranges.s0.min};
    size_t ok = 0, total = 0;
    std::vector<double> voxel(6);
    for (size_t i = 0; i < 200; ++i) {
        for (size_t j = 0; j < 6; ++j) voxel[j] = static_cast<double>(data.voxel(i)[j]);
        const auto qvoxel = fx::quantize_vector(std::span<const double>(voxel));
        for (size_t s = 0; s < 4; ++s) {
            const auto fl = net_forward(folded, voxel, s).as_array();
            const auto qz = quantized_forward(store, qvoxel, s).as_array();
            bool close = true;
            for (size_t k = 0; k < 4; ++k) {
                if (std::fabs(qz[k] - fl[k]) > 0.01 * widths[k]) close = false;
            }
            total += 1;
            ok += close;
        }
    }
    // Quantization noise stays below 1% of each range width for nearly all
    // voxels.
    CHECK(static_cast<double>(ok) / static_cast<double>(total) >= 0.99);
}

TEST_CASE("UIVQ round-trip preserves the store byte-exactly") {
    const UIvimNet net = folded_net(schedule6(), 0.5, 4, 23);
    const PackedWeightStore store = pack_weights(net);

    const std::string p1 = temp_path("uivim_test_store_a.uivq");
    const std::string p2 = temp_path("uivim_test_store_b.uivq");
    save_store(p1, store);
    const PackedWeightStore back = load_store(p1);
    CHECK(back.schedule.b == store.schedule.b);
    CHECK(back.n_samples == store.n_samples);
    CHECK(back.model_seed == store.model_seed);
    for (size_t k = 0; k < 4; ++k) {
        CHECK(back.subnets[k].range.min == store.subnets[k].range.min);
        CHECK(back.subnets[k].range.max == store.subnets[k].range.max);
        REQUIRE(back.subnets[k].samples.size() == store.subnets[k].samples.size());
        for (size_t s = 0; s < store.n_samples; ++s) {
            const PackedSample& a = store.subnets[k].samples[s];
            const PackedSample& b = back.subnets[k].samples[s];
            CHECK(a.kept1 == b.kept1);
            CHECK(a.kept2 == b.kept2);
            CHECK(a.w1 == b.w1);
            CHECK(a.b1 == b.b1);
            CHECK(a.w2 == b.w2);
            CHECK(a.b2 == b.b2);
            CHECK(a.enc_w == b.enc_w);
            CHECK(a.enc_b == b.enc_b);
        }
    }
    save_store(p2, back);
    CHECK(read_bytes(p1) == read_bytes(p2));

    // The loaded store drives inference identically.
    const auto voxel = quantized_voxel(6, 25);
    for (size_t s = 0; s < 4; ++s) {
        CHECK(quantized_forward(back, voxel, s).as_array() ==
              quantized_forward(store, voxel, s).as_array());
    }
    std::filesystem::remove(p1);
    std::filesystem::remove(p2);
}

TEST_CASE("packing is deterministic") {
    const UIvimNet net = folded_net(schedule6(), 0.5, 4, 29);
    const PackedWeightStore a = pack_weights(net);
    const PackedWeightStore b = pack_weights(net);
    CHECK(a.packed_words() == b.packed_words());
    for (size_t k = 0; k < 4; ++k) {
        for (size_t s = 0; s < a.n_samples; ++s) {
            CHECK(a.subnets[k].samples[s].w1 == b.subnets[k].samples[s].w1);
            CHECK(a.subnets[k].samples[s].w2 == b.subnets[k].samples[s].w2);
        }
    }
}
