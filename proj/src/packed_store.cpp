#include "uivim/packed_store.hpp"

#include <algorithm>
#include <stdexcept>

#include <json.hpp>

#include "uivim/serialize.hpp"

namespace uivim {

namespace {

void check_kept(const std::vector<uint32_t>& kept, size_t width, const char* what) {
    if (kept.empty()) throw std::invalid_argument(std::string(what) + ": empty kept set");
    for (size_t i = 0; i < kept.size(); ++i) {
        if (kept[i] >= width) throw std::invalid_argument(std::string(what) + ": index out of range");
        if (i > 0 && kept[i] <= kept[i - 1]) {
            throw std::invalid_argument(std::string(what) + ": indices must be strictly increasing");
        }
    }
}

bool bn_is_identity(const BatchNorm& bn) {
    for (size_t c = 0; c < bn.gamma.size(); ++c) {
        if (bn.gamma[c] != 1.0 || bn.beta[c] != 0.0 || bn.running_mean[c] != 0.0) return false;
    }
    return true;
}

}  // namespace

size_t PackedWeightStore::packed_words() const {
    size_t total = 0;
    for (const auto& sn : subnets) {
        for (const auto& s : sn.samples) total += s.words();
    }
    return total;
}

size_t PackedWeightStore::dense_words() const {
    const size_t nb = n_b();
    const size_t per_sample = nb * nb + nb + nb * nb + nb + nb + 1;
    return 4 * n_samples * per_sample;
}

void PackedWeightStore::validate() const {
    schedule.validate();
    if (n_samples == 0) throw std::invalid_argument("store: n_samples must be positive");
    const size_t nb = n_b();
    for (const auto& sn : subnets) {
        if (sn.samples.size() != n_samples) {
            throw std::invalid_argument("store: every sub-network needs N sample copies");
        }
        if (!(sn.range.min < sn.range.max)) {
            throw std::invalid_argument("store: conversion range must have min < max");
        }
        for (const auto& s : sn.samples) {
            check_kept(s.kept1, nb, "store.kept1");
            check_kept(s.kept2, nb, "store.kept2");
            if (s.w1.size() != s.kept1.size() * nb || s.b1.size() != s.kept1.size() ||
                s.w2.size() != s.kept2.size() * s.kept1.size() || s.b2.size() != s.kept2.size() ||
                s.enc_w.size() != s.kept2.size()) {
                throw std::invalid_argument("store: block sizes disagree with kept maps");
            }
        }
    }
}

PackedWeightStore pack_weights(const UIvimNet& folded_net) {
    folded_net.validate();
    if (!folded_net.folded) {
        throw std::invalid_argument("pack: net must be batch-norm-folded first");
    }
    for (const auto& s : folded_net.subnets) {
        if (!bn_is_identity(s.bn1) || !bn_is_identity(s.bn2)) {
            throw std::invalid_argument("pack: folded net carries a non-identity batch norm");
        }
    }

    const size_t nb = folded_net.n_b();
    PackedWeightStore store;
    store.schedule = folded_net.schedule;
    store.n_samples = folded_net.n_samples();
    store.model_seed = folded_net.seed;

    for (size_t k = 0; k < 4; ++k) {
        const SubNetwork& sn = folded_net.subnets[k];
        PackedSubnet& out = store.subnets[k];
        out.range = sn.range;
        out.samples.resize(store.n_samples);
        for (size_t s = 0; s < store.n_samples; ++s) {
            PackedSample& ps = out.samples[s];
            ps.kept1 = sn.mask1.kept_indices(s);
            ps.kept2 = sn.mask2.kept_indices(s);
            if (ps.kept1.empty() || ps.kept2.empty()) {
                throw std::invalid_argument("pack: mask sample keeps no channels");
            }
            ps.w1.reserve(ps.kept1.size() * nb);
            for (uint32_t c : ps.kept1) {
                const double* row = sn.l1.w.data() + static_cast<size_t>(c) * nb;
                for (size_t i = 0; i < nb; ++i) ps.w1.push_back(fx::quantize(row[i]));
                ps.b1.push_back(fx::quantize(sn.l1.b[c]));
            }
            ps.w2.reserve(ps.kept2.size() * ps.kept1.size());
            for (uint32_t c2 : ps.kept2) {
                const double* row = sn.l2.w.data() + static_cast<size_t>(c2) * nb;
                for (uint32_t c1 : ps.kept1) ps.w2.push_back(fx::quantize(row[c1]));
                ps.b2.push_back(fx::quantize(sn.l2.b[c2]));
                ps.enc_w.push_back(fx::quantize(sn.encoder.w[c2]));
            }
            ps.enc_b = fx::quantize(sn.encoder.b[0]);
        }
    }
    store.validate();
    return store;
}

namespace {

// Shared fixed-point datapath; returns the encoder word of one sub-network.
fx::Word subnet_logit_word(const PackedSubnet& sn, std::span<const fx::Word> voxel,
                           size_t sample) {
    const PackedSample& ps = sn.samples[sample];
    const size_t k1 = ps.kept1.size();
    const size_t k2 = ps.kept2.size();
    const size_t nb = voxel.size();

    std::vector<fx::Word> v1(k1);
    for (size_t i = 0; i < k1; ++i) {
        v1[i] = fx::relu(fx::mul_acc({ps.w1.data() + i * nb, nb}, voxel, ps.b1[i]));
    }
    std::vector<fx::Word> v2(k2);
    for (size_t i = 0; i < k2; ++i) {
        v2[i] = fx::relu(fx::mul_acc({ps.w2.data() + i * k1, k1}, v1, ps.b2[i]));
    }
    return fx::mul_acc(ps.enc_w, v2, ps.enc_b);
}

void check_forward_args(const PackedWeightStore& store, std::span<const fx::Word> voxel,
                        size_t sample) {
    if (voxel.size() != store.n_b()) {
        throw std::invalid_argument("quantized_forward: voxel length must equal N_b");
    }
    if (sample >= store.n_samples) {
        throw std::out_of_range("quantized_forward: sample index out of range");
    }
}

}  // namespace

std::array<double, 4> quantized_head_logits(const PackedWeightStore& store,
                                            std::span<const fx::Word> voxel, size_t sample) {
    check_forward_args(store, voxel, sample);
    std::array<double, 4> out{};
    for (size_t k = 0; k < 4; ++k) {
        out[k] = fx::dequantize(subnet_logit_word(store.subnets[k], voxel, sample));
    }
    return out;
}

IvimParams quantized_forward(const PackedWeightStore& store, std::span<const fx::Word> voxel,
                             size_t sample) {
    const auto t = quantized_head_logits(store, voxel, sample);
    return IvimParams{convert(t[0], store.subnets[0].range), convert(t[1], store.subnets[1].range),
                      convert(t[2], store.subnets[2].range),
                      convert(t[3], store.subnets[3].range)};
}

DenseSubnetWords unpack_dense(const PackedWeightStore& store, size_t subnet, size_t sample) {
    if (subnet >= 4) throw std::out_of_range("unpack: subnet index out of range");
    if (sample >= store.n_samples) throw std::out_of_range("unpack: sample index out of range");
    const size_t nb = store.n_b();
    const PackedSample& ps = store.subnets[subnet].samples[sample];

    DenseSubnetWords d;
    d.w1.assign(nb * nb, 0);
    d.b1.assign(nb, 0);
    d.w2.assign(nb * nb, 0);
    d.b2.assign(nb, 0);
    d.enc_w.assign(nb, 0);
    d.enc_b = ps.enc_b;
    for (size_t i = 0; i < ps.kept1.size(); ++i) {
        std::copy_n(ps.w1.data() + i * nb, nb, d.w1.data() + static_cast<size_t>(ps.kept1[i]) * nb);
        d.b1[ps.kept1[i]] = ps.b1[i];
    }
    for (size_t i = 0; i < ps.kept2.size(); ++i) {
        const size_t row = static_cast<size_t>(ps.kept2[i]) * nb;
        for (size_t j = 0; j < ps.kept1.size(); ++j) {
            d.w2[row + ps.kept1[j]] = ps.w2[i * ps.kept1.size() + j];
        }
        d.b2[ps.kept2[i]] = ps.b2[i];
        d.enc_w[ps.kept2[i]] = ps.enc_w[i];
    }
    return d;
}

void save_store(const std::string& path, const PackedWeightStore& store) {
    store.validate();
    nlohmann::json kept = nlohmann::json::array();
    nlohmann::json ranges = nlohmann::json::array();
    for (const auto& sn : store.subnets) {
        nlohmann::json per_sample = nlohmann::json::array();
        for (const auto& s : sn.samples) {
            per_sample.push_back(nlohmann::json{{"k1", s.kept1}, {"k2", s.kept2}});
        }
        kept.push_back(per_sample);
        ranges.push_back(nlohmann::json{sn.range.min, sn.range.max});
    }
    const nlohmann::json header{{"magic", "UIVQ"},
                                {"version", 1},
                                {"n_b", store.n_b()},
                                {"n_samples", store.n_samples},
                                {"b_values", store.schedule.b},
                                {"ranges", ranges},
                                {"kept", kept},
                                {"model_seed", store.model_seed},
                                {"format",
                                 {{"total_bits", fx::kTotalBits},
                                  {"integer_bits", fx::kIntegerBits},
                                  {"frac_bits", fx::kFracBits}}}};
    io::Writer w(path);
    w.header(header);
    for (const auto& sn : store.subnets) {
        for (const auto& s : sn.samples) {
            w.block(s.w1);
            w.block(s.b1);
            w.block(s.w2);
            w.block(s.b2);
            w.block(s.enc_w);
            w.block(std::vector<fx::Word>{s.enc_b});
        }
    }
    w.finish(path);
}

PackedWeightStore load_store(const std::string& path) {
    io::Reader r(path);
    const nlohmann::json h = r.header("UIVQ");
    if (h.at("version").get<int>() != 1) {
        throw std::runtime_error(path + ": unsupported store version");
    }
    const auto& fmt = h.at("format");
    if (fmt.at("total_bits").get<int>() != fx::kTotalBits ||
        fmt.at("integer_bits").get<int>() != fx::kIntegerBits ||
        fmt.at("frac_bits").get<int>() != fx::kFracBits) {
        throw std::runtime_error(path + ": unsupported fixed-point format");
    }

    PackedWeightStore store;
    store.schedule.b = h.at("b_values").get<std::vector<double>>();
    store.n_samples = h.at("n_samples").get<size_t>();
    store.model_seed = h.at("model_seed").get<uint64_t>();
    if (store.n_b() != h.at("n_b").get<size_t>()) {
        throw std::runtime_error(path + ": b_values length does not match n_b");
    }
    const size_t nb = store.n_b();
    for (size_t k = 0; k < 4; ++k) {
        PackedSubnet& sn = store.subnets[k];
        const auto& jr = h.at("ranges").at(k);
        sn.range = Interval{jr.at(0).get<double>(), jr.at(1).get<double>()};
        sn.samples.resize(store.n_samples);
        for (size_t s = 0; s < store.n_samples; ++s) {
            const auto& jk = h.at("kept").at(k).at(s);
            PackedSample& ps = sn.samples[s];
            ps.kept1 = jk.at("k1").get<std::vector<uint32_t>>();
            ps.kept2 = jk.at("k2").get<std::vector<uint32_t>>();
            ps.w1 = r.block<fx::Word>(ps.kept1.size() * nb);
            ps.b1 = r.block<fx::Word>(ps.kept1.size());
            ps.w2 = r.block<fx::Word>(ps.kept2.size() * ps.kept1.size());
            ps.b2 = r.block<fx::Word>(ps.kept2.size());
            ps.enc_w = r.block<fx::Word>(ps.kept2.size());
            ps.enc_b = r.block<fx::Word>(1)[0];
        }
    }
    store.validate();
    return store;
}

}  // namespace uivim
