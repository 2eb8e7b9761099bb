#include "uivim/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "uivim/rng.hpp"

namespace uivim {

namespace {

double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

void check_linear(const Linear& lin, size_t out, size_t in, const char* what) {
    if (lin.out != out || lin.in != in || lin.w.size() != out * in || lin.b.size() != out) {
        throw std::invalid_argument(std::string(what) + ": inconsistent linear layer shape");
    }
    for (double v : lin.w) {
        if (!std::isfinite(v)) throw std::invalid_argument(std::string(what) + ": non-finite weight");
    }
    for (double v : lin.b) {
        if (!std::isfinite(v)) throw std::invalid_argument(std::string(what) + ": non-finite bias");
    }
}

void check_bn(const BatchNorm& bn, size_t width, const char* what) {
    if (bn.gamma.size() != width || bn.beta.size() != width || bn.running_mean.size() != width ||
        bn.running_var.size() != width) {
        throw std::invalid_argument(std::string(what) + ": inconsistent batch-norm shape");
    }
    if (!std::isfinite(bn.eps) || bn.eps < 0.0) {
        throw std::invalid_argument(std::string(what) + ": bad batch-norm epsilon");
    }
    for (size_t c = 0; c < width; ++c) {
        if (!std::isfinite(bn.gamma[c]) || !std::isfinite(bn.beta[c]) ||
            !std::isfinite(bn.running_mean[c]) || !std::isfinite(bn.running_var[c])) {
            throw std::invalid_argument(std::string(what) + ": non-finite batch-norm state");
        }
        if (bn.running_var[c] < 0.0) {
            throw std::invalid_argument(std::string(what) + ": negative running variance");
        }
    }
}

// Trainable parameter vectors of one net in a fixed global order; gradient
// and Adam-state layouts mirror this exactly.
enum ParamSlot : size_t {
    kW1 = 0,
    kB1,
    kGamma1,
    kBeta1,
    kW2,
    kB2,
    kGamma2,
    kBeta2,
    kWEnc,
    kBEnc,
    kSlotsPerSubnet
};

std::vector<std::vector<double>*> collect_params(UIvimNet& net) {
    std::vector<std::vector<double>*> out;
    out.reserve(4 * kSlotsPerSubnet);
    for (auto& s : net.subnets) {
        out.push_back(&s.l1.w);
        out.push_back(&s.l1.b);
        out.push_back(&s.bn1.gamma);
        out.push_back(&s.bn1.beta);
        out.push_back(&s.l2.w);
        out.push_back(&s.l2.b);
        out.push_back(&s.bn2.gamma);
        out.push_back(&s.bn2.beta);
        out.push_back(&s.encoder.w);
        out.push_back(&s.encoder.b);
    }
    return out;
}

std::vector<std::vector<double>> make_like_params(const UIvimNet& net) {
    std::vector<std::vector<double>> out;
    auto ptrs = collect_params(const_cast<UIvimNet&>(net));
    out.reserve(ptrs.size());
    for (const auto* p : ptrs) out.emplace_back(p->size(), 0.0);
    return out;
}

struct LayerCache {
    std::vector<double> z;        // m x C, pre batch-norm
    std::vector<double> xhat;     // m x C, normalized
    std::vector<double> y;        // m x C, post affine (pre ReLU)
    std::vector<double> a;        // m x C, post ReLU + mask
    std::vector<double> inv_std;  // C
};

struct SubnetCache {
    LayerCache c1, c2;
    std::vector<double> t;    // m, encoder logits
    std::vector<double> u;    // m, sigmoid(t) for the backward pass
    std::vector<double> par;  // m, converted parameter
};

void linear_forward(const Linear& lin, const double* x, size_t m, double* z) {
    for (size_t r = 0; r < m; ++r) {
        const double* xr = x + r * lin.in;
        double* zr = z + r * lin.out;
        for (size_t o = 0; o < lin.out; ++o) {
            const double* wr = lin.w.data() + o * lin.in;
            double acc = lin.b[o];
            for (size_t i = 0; i < lin.in; ++i) acc += wr[i] * xr[i];
            zr[o] = acc;
        }
    }
}

// Batch statistics use the biased (divisor m) variance, for normalization and
// for the running-average update alike.
void bn_forward(const BatchNorm& bn, BnMode mode, size_t m, size_t width, LayerCache& c,
                BatchNorm* stats_sink) {
    c.xhat.resize(m * width);
    c.y.resize(m * width);
    c.inv_std.resize(width);
    std::vector<double> mu(width, 0.0), var(width, 0.0);
    if (mode == BnMode::training) {
        for (size_t r = 0; r < m; ++r) {
            const double* zr = c.z.data() + r * width;
            for (size_t cc = 0; cc < width; ++cc) mu[cc] += zr[cc];
        }
        for (size_t cc = 0; cc < width; ++cc) mu[cc] /= static_cast<double>(m);
        for (size_t r = 0; r < m; ++r) {
            const double* zr = c.z.data() + r * width;
            for (size_t cc = 0; cc < width; ++cc) {
                const double d = zr[cc] - mu[cc];
                var[cc] += d * d;
            }
        }
        for (size_t cc = 0; cc < width; ++cc) var[cc] /= static_cast<double>(m);
        if (stats_sink != nullptr) {
            constexpr double kMomentum = 0.1;
            for (size_t cc = 0; cc < width; ++cc) {
                stats_sink->running_mean[cc] =
                    (1.0 - kMomentum) * stats_sink->running_mean[cc] + kMomentum * mu[cc];
                stats_sink->running_var[cc] =
                    (1.0 - kMomentum) * stats_sink->running_var[cc] + kMomentum * var[cc];
            }
        }
    } else {
        mu = bn.running_mean;
        var = bn.running_var;
    }
    for (size_t cc = 0; cc < width; ++cc) c.inv_std[cc] = 1.0 / std::sqrt(var[cc] + bn.eps);
    for (size_t r = 0; r < m; ++r) {
        const double* zr = c.z.data() + r * width;
        double* xr = c.xhat.data() + r * width;
        double* yr = c.y.data() + r * width;
        for (size_t cc = 0; cc < width; ++cc) {
            xr[cc] = (zr[cc] - mu[cc]) * c.inv_std[cc];
            yr[cc] = bn.gamma[cc] * xr[cc] + bn.beta[cc];
        }
    }
}

void relu_mask_forward(const MaskSet& mask, std::span<const size_t> samples, size_t m,
                       size_t width, LayerCache& c) {
    c.a.resize(m * width);
    for (size_t r = 0; r < m; ++r) {
        const auto row = mask.row(samples[r]);
        const double* yr = c.y.data() + r * width;
        double* ar = c.a.data() + r * width;
        for (size_t cc = 0; cc < width; ++cc) {
            ar[cc] = yr[cc] > 0.0 ? yr[cc] * static_cast<double>(row[cc]) : 0.0;
        }
    }
}

// Forward one sub-network for an m-row batch. stats_sink non-null routes
// training-mode running-statistic updates back into the live net.
void subnet_forward(const SubNetwork& s, const double* x, size_t m,
                    std::span<const size_t> samples, BnMode mode, SubNetwork* stats_sink,
                    SubnetCache& c) {
    const size_t width = s.l1.out;
    c.c1.z.resize(m * width);
    linear_forward(s.l1, x, m, c.c1.z.data());
    bn_forward(s.bn1, mode, m, width, c.c1, stats_sink != nullptr ? &stats_sink->bn1 : nullptr);
    relu_mask_forward(s.mask1, samples, m, width, c.c1);

    c.c2.z.resize(m * width);
    linear_forward(s.l2, c.c1.a.data(), m, c.c2.z.data());
    bn_forward(s.bn2, mode, m, width, c.c2, stats_sink != nullptr ? &stats_sink->bn2 : nullptr);
    relu_mask_forward(s.mask2, samples, m, width, c.c2);

    c.t.resize(m);
    c.u.resize(m);
    c.par.resize(m);
    for (size_t r = 0; r < m; ++r) {
        const double* ar = c.c2.a.data() + r * width;
        double acc = s.encoder.b[0];
        for (size_t cc = 0; cc < width; ++cc) acc += s.encoder.w[cc] * ar[cc];
        c.t[r] = acc;
        c.u[r] = sigmoid(acc);
        c.par[r] = convert(acc, s.range);
    }
}

// Backward through one linear + batch-norm + ReLU + mask block. dA is the
// gradient at the block output; dXin (optional) receives the gradient at the
// block input. Training mode uses the standard batch-norm backward that
// accounts for the batch statistics' dependence on every row.
void layer_backward(const Linear& lin, const BatchNorm& bn, const MaskSet& mask,
                    std::span<const size_t> samples, BnMode mode, const double* x_in, size_t m,
                    const LayerCache& c, const std::vector<double>& d_a, std::vector<double>& g_w,
                    std::vector<double>& g_b, std::vector<double>& g_gamma,
                    std::vector<double>& g_beta, std::vector<double>* d_xin) {
    const size_t width = lin.out;
    std::vector<double> d_xhat(m * width);
    std::vector<double> s_dxhat(width, 0.0), s_dxhat_xhat(width, 0.0);
    for (size_t r = 0; r < m; ++r) {
        const auto row = mask.row(samples[r]);
        const double* yr = c.y.data() + r * width;
        const double* xr = c.xhat.data() + r * width;
        const double* dar = d_a.data() + r * width;
        double* dxr = d_xhat.data() + r * width;
        for (size_t cc = 0; cc < width; ++cc) {
            const double dy = (row[cc] != 0 && yr[cc] > 0.0) ? dar[cc] : 0.0;
            g_gamma[cc] += dy * xr[cc];
            g_beta[cc] += dy;
            const double dxh = dy * bn.gamma[cc];
            dxr[cc] = dxh;
            s_dxhat[cc] += dxh;
            s_dxhat_xhat[cc] += dxh * xr[cc];
        }
    }

    std::vector<double> d_z(m * width);
    if (mode == BnMode::training) {
        const double inv_m = 1.0 / static_cast<double>(m);
        for (size_t r = 0; r < m; ++r) {
            const double* xr = c.xhat.data() + r * width;
            const double* dxr = d_xhat.data() + r * width;
            double* dzr = d_z.data() + r * width;
            for (size_t cc = 0; cc < width; ++cc) {
                dzr[cc] = c.inv_std[cc] * inv_m *
                          (static_cast<double>(m) * dxr[cc] - s_dxhat[cc] -
                           xr[cc] * s_dxhat_xhat[cc]);
            }
        }
    } else {
        for (size_t r = 0; r < m; ++r) {
            const double* dxr = d_xhat.data() + r * width;
            double* dzr = d_z.data() + r * width;
            for (size_t cc = 0; cc < width; ++cc) dzr[cc] = dxr[cc] * c.inv_std[cc];
        }
    }

    for (size_t r = 0; r < m; ++r) {
        const double* dzr = d_z.data() + r * width;
        const double* xr = x_in + r * lin.in;
        for (size_t o = 0; o < width; ++o) {
            g_b[o] += dzr[o];
            double* gw = g_w.data() + o * lin.in;
            const double dz = dzr[o];
            for (size_t i = 0; i < lin.in; ++i) gw[i] += dz * xr[i];
        }
    }
    if (d_xin != nullptr) {
        d_xin->assign(m * lin.in, 0.0);
        for (size_t r = 0; r < m; ++r) {
            const double* dzr = d_z.data() + r * width;
            double* dxr = d_xin->data() + r * lin.in;
            for (size_t o = 0; o < width; ++o) {
                const double dz = dzr[o];
                if (dz == 0.0) continue;
                const double* wr = lin.w.data() + o * lin.in;
                for (size_t i = 0; i < lin.in; ++i) dxr[i] += dz * wr[i];
            }
        }
    }
}

void subnet_backward(const SubNetwork& s, const double* x, size_t m,
                     std::span<const size_t> samples, BnMode mode, const SubnetCache& c,
                     const std::vector<double>& d_par,
                     std::span<std::vector<double>> g /* kSlotsPerSubnet entries */) {
    const size_t width = s.l1.out;
    // Head: par = min + sigmoid(t) * (max - min).
    std::vector<double> d_t(m);
    const double span = s.range.max - s.range.min;
    for (size_t r = 0; r < m; ++r) d_t[r] = d_par[r] * span * c.u[r] * (1.0 - c.u[r]);

    std::vector<double> d_a2(m * width, 0.0);
    for (size_t r = 0; r < m; ++r) {
        const double* ar = c.c2.a.data() + r * width;
        double* dar = d_a2.data() + r * width;
        const double dt = d_t[r];
        g[kBEnc][0] += dt;
        for (size_t cc = 0; cc < width; ++cc) {
            g[kWEnc][cc] += dt * ar[cc];
            dar[cc] = dt * s.encoder.w[cc];
        }
    }

    std::vector<double> d_a1;
    layer_backward(s.l2, s.bn2, s.mask2, samples, mode, c.c1.a.data(), m, c.c2, d_a2, g[kW2],
                   g[kB2], g[kGamma2], g[kBeta2], &d_a1);
    layer_backward(s.l1, s.bn1, s.mask1, samples, mode, x, m, c.c1, d_a1, g[kW1], g[kB1],
                   g[kGamma1], g[kBeta1], nullptr);
}

// Loss (and optional parameter gradients) of one batch. The loss averages
// squared reconstruction error over all rows and b-values.
double loss_core(const UIvimNet& net, const double* x, size_t m, std::span<const size_t> samples,
                 BnMode mode, UIvimNet* stats_sink, std::vector<std::vector<double>>* grads) {
    const size_t nb = net.n_b();
    const size_t n_samples = net.n_samples();
    if (m == 0) throw std::invalid_argument("loss: empty batch");
    if (samples.size() != m) throw std::invalid_argument("loss: one mask sample per row required");
    for (size_t r = 0; r < m; ++r) {
        if (samples[r] >= n_samples) throw std::out_of_range("loss: mask sample out of range");
    }
    for (size_t i = 0; i < m * nb; ++i) {
        if (!std::isfinite(x[i])) throw std::invalid_argument("loss: non-finite input signal");
    }

    std::array<SubnetCache, 4> caches;
    for (size_t k = 0; k < 4; ++k) {
        subnet_forward(net.subnets[k], x, m, samples, mode,
                       stats_sink != nullptr ? &stats_sink->subnets[k] : nullptr, caches[k]);
    }

    const double denom = static_cast<double>(m) * static_cast<double>(nb);
    double loss = 0.0;
    std::array<std::vector<double>, 4> d_par;
    if (grads != nullptr) {
        for (auto& v : d_par) v.assign(m, 0.0);
    }
    for (size_t r = 0; r < m; ++r) {
        const IvimParams p{caches[0].par[r], caches[1].par[r], caches[2].par[r],
                           caches[3].par[r]};
        const double* xr = x + r * nb;
        for (size_t j = 0; j < nb; ++j) {
            const double shat = forward_signal(p, net.schedule.b[j]);
            const double err = shat - xr[j];
            loss += err * err;
            if (grads != nullptr) {
                const double dshat = 2.0 * err / denom;
                const auto gsig = signal_gradient(p, net.schedule.b[j]);
                for (size_t k = 0; k < 4; ++k) d_par[k][r] += dshat * gsig[k];
            }
        }
    }
    loss /= denom;

    if (grads != nullptr) {
        for (size_t k = 0; k < 4; ++k) {
            subnet_backward(net.subnets[k], x, m, samples, mode, caches[k], d_par[k],
                            std::span<std::vector<double>>(grads->data() + k * kSlotsPerSubnet,
                                                           kSlotsPerSubnet));
        }
    }
    return loss;
}

Linear init_linear(size_t out, size_t in, rng::Stream& st) {
    Linear lin;
    lin.out = out;
    lin.in = in;
    lin.w.resize(out * in);
    lin.b.resize(out);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& w : lin.w) w = st.uniform(-bound, bound);
    for (auto& b : lin.b) b = st.uniform(-bound, bound);
    return lin;
}

BatchNorm init_bn(size_t width) {
    BatchNorm bn;
    bn.gamma.assign(width, 1.0);
    bn.beta.assign(width, 0.0);
    bn.running_mean.assign(width, 0.0);
    bn.running_var.assign(width, 1.0);
    bn.eps = 1e-5;
    return bn;
}

// Single-voxel inference logit for one sub-network; the float reference the
// fixed-point datapath is measured against.
double single_logit(const SubNetwork& s, const double* x, size_t width, size_t sample) {
    std::vector<double> v1(width), v2(width);
    for (size_t o = 0; o < width; ++o) {
        const double* wr = s.l1.w.data() + o * width;
        double acc = s.l1.b[o];
        for (size_t i = 0; i < width; ++i) acc += wr[i] * x[i];
        v1[o] = acc;
    }
    const auto m1 = s.mask1.row(sample);
    for (size_t c = 0; c < width; ++c) {
        const double inv = 1.0 / std::sqrt(s.bn1.running_var[c] + s.bn1.eps);
        const double y = s.bn1.gamma[c] * (v1[c] - s.bn1.running_mean[c]) * inv + s.bn1.beta[c];
        v1[c] = y > 0.0 ? y * static_cast<double>(m1[c]) : 0.0;
    }
    for (size_t o = 0; o < width; ++o) {
        const double* wr = s.l2.w.data() + o * width;
        double acc = s.l2.b[o];
        for (size_t i = 0; i < width; ++i) acc += wr[i] * v1[i];
        v2[o] = acc;
    }
    const auto m2 = s.mask2.row(sample);
    for (size_t c = 0; c < width; ++c) {
        const double inv = 1.0 / std::sqrt(s.bn2.running_var[c] + s.bn2.eps);
        const double y = s.bn2.gamma[c] * (v2[c] - s.bn2.running_mean[c]) * inv + s.bn2.beta[c];
        v2[c] = y > 0.0 ? y * static_cast<double>(m2[c]) : 0.0;
    }
    double acc = s.encoder.b[0];
    for (size_t c = 0; c < width; ++c) acc += s.encoder.w[c] * v2[c];
    return acc;
}

}  // namespace

void UIvimNet::validate() const {
    schedule.validate();
    const size_t nb = schedule.size();
    const size_t n = subnets[0].mask1.n_samples();
    if (n == 0) throw std::invalid_argument("net: empty mask set");
    for (size_t k = 0; k < 4; ++k) {
        const SubNetwork& s = subnets[k];
        check_linear(s.l1, nb, nb, "net.l1");
        check_linear(s.l2, nb, nb, "net.l2");
        check_linear(s.encoder, 1, nb, "net.encoder");
        check_bn(s.bn1, nb, "net.bn1");
        check_bn(s.bn2, nb, "net.bn2");
        if (s.mask1.width() != nb || s.mask2.width() != nb) {
            throw std::invalid_argument("net: mask width must equal the b-value count");
        }
        if (s.mask1.n_samples() != n || s.mask2.n_samples() != n) {
            throw std::invalid_argument("net: all mask sets must share the same N");
        }
        if (!(s.range.min < s.range.max)) {
            throw std::invalid_argument("net: conversion range must have min < max");
        }
    }
}

void TrainingConfig::validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
        throw std::invalid_argument("training: learning_rate must be finite and >= 0");
    }
    if (batch_size == 0) throw std::invalid_argument("training: batch_size must be positive");
    if (max_epochs == 0) throw std::invalid_argument("training: max_epochs must be positive");
    if (patience == 0) throw std::invalid_argument("training: patience must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw std::invalid_argument("training: betas must lie in [0, 1)");
    }
    if (!(adam_eps > 0.0)) throw std::invalid_argument("training: adam_eps must be positive");
    if (!(drop_rate >= 0.0 && drop_rate < 1.0)) {
        throw std::invalid_argument("training: drop_rate must lie in [0, 1)");
    }
    if (n_samples == 0) throw std::invalid_argument("training: n_samples must be positive");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) {
        throw std::invalid_argument("training: val_fraction must lie in [0, 1)");
    }
}

void GridSpec::validate() const {
    if (drop_rates.empty() || n_samples.empty()) {
        throw std::invalid_argument("grid: empty axis");
    }
    for (double p : drop_rates) {
        if (!(p >= 0.1 - 1e-12 && p <= 0.9 + 1e-12)) {
            throw std::invalid_argument("grid: drop_rate outside [0.1, 0.9]");
        }
    }
    for (size_t n : n_samples) {
        if (n != 4 && n != 8 && n != 16 && n != 32 && n != 64) {
            throw std::invalid_argument("grid: n_samples must be one of {4, 8, 16, 32, 64}");
        }
    }
}

double convert(double x, const Interval& range) {
    if (!(range.min < range.max)) {
        throw std::invalid_argument("convert: range.min must be < range.max");
    }
    double s = sigmoid(x);
    // Keep the output strictly inside the interval even when the sigmoid
    // saturates to 0 or 1 in floating point.
    s = std::clamp(s, std::numeric_limits<double>::min(), 1.0 - 0x1.0p-53);
    const double lo = std::nextafter(range.min, range.max);
    const double hi = std::nextafter(range.max, range.min);
    return std::clamp(range.min + s * (range.max - range.min), lo, hi);
}

UIvimNet init_network(const BValueSchedule& schedule, const ParamRanges& ranges, double drop_rate,
                      size_t n_samples, uint64_t seed) {
    schedule.validate();
    ranges.validate();
    const size_t nb = schedule.size();
    UIvimNet net;
    net.schedule = schedule;
    net.seed = seed;
    for (size_t k = 0; k < 4; ++k) {
        SubNetwork& s = net.subnets[k];
        rng::Stream w1(seed, rng::Tag::weights, k * 4 + 0);
        rng::Stream w2(seed, rng::Tag::weights, k * 4 + 1);
        rng::Stream we(seed, rng::Tag::weights, k * 4 + 2);
        s.l1 = init_linear(nb, nb, w1);
        s.l2 = init_linear(nb, nb, w2);
        s.encoder = init_linear(1, nb, we);
        s.bn1 = init_bn(nb);
        s.bn2 = init_bn(nb);
        MaskConfig mc;
        mc.n_samples = n_samples;
        mc.width = nb;
        mc.drop_rate = drop_rate;
        mc.seed = rng::derive_seed(seed, rng::Tag::masks, k * 2 + 0);
        s.mask1 = generate_masks(mc);
        mc.seed = rng::derive_seed(seed, rng::Tag::masks, k * 2 + 1);
        s.mask2 = generate_masks(mc);
        s.range = ranges.by_index(k);
    }
    net.validate();
    return net;
}

std::array<double, 4> head_logits(const UIvimNet& net, std::span<const double> voxel,
                                  size_t sample) {
    const size_t nb = net.n_b();
    if (voxel.size() != nb) throw std::invalid_argument("forward: voxel length must equal N_b");
    if (sample >= net.n_samples()) throw std::out_of_range("forward: sample index out of range");
    for (double v : voxel) {
        if (!std::isfinite(v)) throw std::invalid_argument("forward: non-finite input signal");
    }
    std::array<double, 4> t{};
    for (size_t k = 0; k < 4; ++k) {
        t[k] = single_logit(net.subnets[k], voxel.data(), nb, sample);
    }
    return t;
}

IvimParams net_forward(const UIvimNet& net, std::span<const double> voxel, size_t sample) {
    const auto t = head_logits(net, voxel, sample);
    return IvimParams{convert(t[0], net.subnets[0].range), convert(t[1], net.subnets[1].range),
                      convert(t[2], net.subnets[2].range), convert(t[3], net.subnets[3].range)};
}

double reconstruction_loss(const UIvimNet& net, std::span<const double> voxels, size_t n_rows,
                           std::span<const size_t> samples, BnMode mode) {
    if (voxels.size() != n_rows * net.n_b()) {
        throw std::invalid_argument("loss: voxel block size must be n_rows * N_b");
    }
    return loss_core(net, voxels.data(), n_rows, samples, mode, nullptr, nullptr);
}

TrainResult train(UIvimNet& net, const Dataset& data, const TrainingConfig& cfg) {
    cfg.validate();
    net.validate();
    if (net.schedule.b != data.schedule.b) {
        throw std::invalid_argument("train: dataset schedule does not match the net");
    }
    const size_t n = data.n_voxels();
    if (n == 0) throw std::invalid_argument("train: empty dataset");
    const size_t nb = net.n_b();
    const size_t n_samples = net.n_samples();

    std::vector<double> all(n * nb);
    for (size_t i = 0; i < all.size(); ++i) all[i] = static_cast<double>(data.signals[i]);

    // Deterministic validation split.
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    rng::Stream split_stream(cfg.seed, rng::Tag::split, 0);
    split_stream.shuffle(order);
    size_t n_val = static_cast<size_t>(std::llround(cfg.val_fraction * static_cast<double>(n)));
    if (n_val >= n) n_val = n - 1;
    std::vector<size_t> val_idx(order.begin(), order.begin() + static_cast<ptrdiff_t>(n_val));
    std::vector<size_t> train_idx(order.begin() + static_cast<ptrdiff_t>(n_val), order.end());

    auto params = collect_params(net);
    auto grads = make_like_params(net);
    auto adam_m = make_like_params(net);
    auto adam_v = make_like_params(net);
    size_t adam_t = 0;

    std::vector<double> xb(cfg.batch_size * nb);
    std::vector<size_t> sb(cfg.batch_size);

    const auto batch_loss = [&](const std::vector<size_t>& idx, size_t start, size_t m,
                                size_t sample_base, BnMode mode, bool want_grads) {
        for (size_t i = 0; i < m; ++i) {
            const float* src = data.voxel(idx[start + i]);
            double* dst = xb.data() + i * nb;
            for (size_t j = 0; j < nb; ++j) dst[j] = static_cast<double>(src[j]);
            sb[i] = (sample_base + i) % n_samples;
        }
        return loss_core(net, xb.data(), m, std::span<const size_t>(sb.data(), m), mode,
                         mode == BnMode::training ? &net : nullptr,
                         want_grads ? &grads : nullptr);
    };

    TrainResult res;
    UIvimNet best = net;
    double best_monitor = std::numeric_limits<double>::infinity();
    size_t bad_epochs = 0;
    bool early_stopped = false;

    for (size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        rng::Stream shuffle_stream(cfg.seed, rng::Tag::shuffle, epoch);
        shuffle_stream.shuffle(train_idx);

        double loss_sum = 0.0;
        size_t loss_den = 0;
        for (size_t start = 0; start < train_idx.size(); start += cfg.batch_size) {
            const size_t m = std::min(cfg.batch_size, train_idx.size() - start);
            for (auto& g : grads) std::fill(g.begin(), g.end(), 0.0);
            const double loss = batch_loss(train_idx, start, m, 0, BnMode::training, true);
            if (!std::isfinite(loss)) {
                char msg[160];
                std::snprintf(msg, sizeof(msg),
                              "train: loss diverged (non-finite) at epoch %zu, step %zu", epoch,
                              start / cfg.batch_size);
                throw std::runtime_error(msg);
            }
            ++adam_t;
            const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(adam_t));
            const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(adam_t));
            for (size_t v = 0; v < params.size(); ++v) {
                auto& p = *params[v];
                const auto& g = grads[v];
                auto& mm = adam_m[v];
                auto& vv = adam_v[v];
                for (size_t i = 0; i < p.size(); ++i) {
                    mm[i] = cfg.beta1 * mm[i] + (1.0 - cfg.beta1) * g[i];
                    vv[i] = cfg.beta2 * vv[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                    p[i] -= cfg.learning_rate * (mm[i] / c1) / (std::sqrt(vv[i] / c2) + cfg.adam_eps);
                }
            }
            loss_sum += loss * static_cast<double>(m * nb);
            loss_den += m * nb;
        }
        res.train_loss.push_back(loss_sum / static_cast<double>(loss_den));

        double monitor;
        if (n_val > 0) {
            double vsum = 0.0;
            size_t vden = 0;
            for (size_t start = 0; start < val_idx.size(); start += cfg.batch_size) {
                const size_t m = std::min(cfg.batch_size, val_idx.size() - start);
                vsum += batch_loss(val_idx, start, m, start, BnMode::inference, false) *
                        static_cast<double>(m * nb);
                vden += m * nb;
            }
            res.val_loss.push_back(vsum / static_cast<double>(vden));
            monitor = res.val_loss.back();
        } else {
            monitor = res.train_loss.back();
        }
        res.epochs_run = epoch + 1;

        if (monitor < best_monitor) {
            best_monitor = monitor;
            best = net;
            res.best_epoch = epoch;
            bad_epochs = 0;
        } else if (++bad_epochs >= cfg.patience) {
            early_stopped = true;
            break;
        }
    }
    net = std::move(best);

    nlohmann::json meta{{"seed", cfg.seed},
                        {"learning_rate", cfg.learning_rate},
                        {"batch_size", cfg.batch_size},
                        {"max_epochs", cfg.max_epochs},
                        {"patience", cfg.patience},
                        {"val_fraction", cfg.val_fraction},
                        {"n_train", train_idx.size()},
                        {"n_val", n_val},
                        {"epochs_run", res.epochs_run},
                        {"best_epoch", res.best_epoch},
                        {"best_monitor", best_monitor},
                        {"monitor", n_val > 0 ? "val_loss" : "train_loss"},
                        {"early_stopped", early_stopped}};
    net.training_meta = meta.dump();
    return res;
}

double gradient_check(const UIvimNet& net, std::span<const double> voxels, size_t n_rows,
                      std::span<const size_t> samples, double h, BnMode mode) {
    if (!(h > 0.0)) throw std::invalid_argument("gradient_check: h must be positive");
    if (voxels.size() != n_rows * net.n_b()) {
        throw std::invalid_argument("gradient_check: voxel block size must be n_rows * N_b");
    }
    UIvimNet work = net;
    auto params = collect_params(work);
    auto grads = make_like_params(work);
    loss_core(work, voxels.data(), n_rows, samples, mode, nullptr, &grads);

    std::vector<double> analytic, fd;
    for (size_t v = 0; v < params.size(); ++v) {
        auto& p = *params[v];
        for (size_t i = 0; i < p.size(); ++i) {
            analytic.push_back(grads[v][i]);
            const double orig = p[i];
            p[i] = orig + h;
            const double lp = loss_core(work, voxels.data(), n_rows, samples, mode, nullptr, nullptr);
            p[i] = orig - h;
            const double lm = loss_core(work, voxels.data(), n_rows, samples, mode, nullptr, nullptr);
            p[i] = orig;
            fd.push_back((lp - lm) / (2.0 * h));
        }
    }

    // Componentwise differences are measured against the gradient's infinity
    // norm; tiny components otherwise dominate with pure rounding noise.
    double scale = 1e-12;
    for (size_t i = 0; i < analytic.size(); ++i) {
        scale = std::max(scale, std::max(std::fabs(analytic[i]), std::fabs(fd[i])));
    }
    double worst = 0.0;
    for (size_t i = 0; i < analytic.size(); ++i) {
        worst = std::max(worst, std::fabs(analytic[i] - fd[i]) / scale);
    }
    return worst;
}

PredictionWithUncertainty predict_with_uncertainty(const UIvimNet& net,
                                                   std::span<const double> voxel,
                                                   bool use_sample_std) {
    const size_t n_samples = net.n_samples();
    PredictionWithUncertainty out;
    out.samples.reserve(n_samples);
    for (size_t s = 0; s < n_samples; ++s) out.samples.push_back(net_forward(net, voxel, s));

    std::array<double, 4> mean{};
    for (const auto& p : out.samples) {
        const auto a = p.as_array();
        for (size_t k = 0; k < 4; ++k) mean[k] += a[k];
    }
    for (auto& v : mean) v /= static_cast<double>(n_samples);

    std::array<double, 4> var{};
    for (const auto& p : out.samples) {
        const auto a = p.as_array();
        for (size_t k = 0; k < 4; ++k) {
            const double d = a[k] - mean[k];
            var[k] += d * d;
        }
    }
    const double divisor = use_sample_std && n_samples > 1
                               ? static_cast<double>(n_samples - 1)
                               : static_cast<double>(n_samples);
    for (auto& v : var) v = std::sqrt(v / divisor);
    if (use_sample_std && n_samples == 1) var = {0.0, 0.0, 0.0, 0.0};

    out.mean = IvimParams{mean[0], mean[1], mean[2], mean[3]};
    out.std = IvimParams{var[0], var[1], var[2], var[3]};
    return out;
}

UIvimNet fold_batchnorm(const UIvimNet& net) {
    net.validate();
    UIvimNet out = net;
    const auto fold_one = [](Linear& lin, BatchNorm& bn) {
        for (size_t c = 0; c < lin.out; ++c) {
            const double denom = bn.running_var[c] + bn.eps;
            if (!(denom > 0.0)) {
                throw std::invalid_argument("fold: running variance + eps must be positive");
            }
            const double scale = bn.gamma[c] / std::sqrt(denom);
            double* wr = lin.w.data() + c * lin.in;
            for (size_t i = 0; i < lin.in; ++i) wr[i] *= scale;
            lin.b[c] = scale * (lin.b[c] - bn.running_mean[c]) + bn.beta[c];
        }
        // Exact identity normalization so a second fold is a no-op.
        std::fill(bn.gamma.begin(), bn.gamma.end(), 1.0);
        std::fill(bn.beta.begin(), bn.beta.end(), 0.0);
        std::fill(bn.running_mean.begin(), bn.running_mean.end(), 0.0);
        std::fill(bn.running_var.begin(), bn.running_var.end(), 1.0);
        bn.eps = 0.0;
    };
    for (auto& s : out.subnets) {
        fold_one(s.l1, s.bn1);
        fold_one(s.l2, s.bn2);
    }
    out.folded = true;
    return out;
}

double reconstruction_rmse(const UIvimNet& net, const Dataset& data) {
    if (net.schedule.b != data.schedule.b) {
        throw std::invalid_argument("rmse: dataset schedule does not match the net");
    }
    const size_t nb = net.n_b();
    const size_t n = data.n_voxels();
    if (n == 0) throw std::invalid_argument("rmse: empty dataset");
    std::vector<double> voxel(nb);
    double se = 0.0;
    for (size_t v = 0; v < n; ++v) {
        const float* src = data.voxel(v);
        for (size_t j = 0; j < nb; ++j) voxel[j] = static_cast<double>(src[j]);
        const auto pred = predict_with_uncertainty(net, voxel, false).mean;
        for (size_t j = 0; j < nb; ++j) {
            // Model error against the noiseless reference rebuilt from truth.
            const double d =
                forward_signal(pred, data.schedule.b[j]) - forward_signal(data.truth[v], data.schedule.b[j]);
            se += d * d;
        }
    }
    return std::sqrt(se / (static_cast<double>(n) * static_cast<double>(nb)));
}

}  // namespace uivim
