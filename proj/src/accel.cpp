#include "uivim/accel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include <json.hpp>

namespace uivim {

namespace {

uint64_t ceil_div(uint64_t a, uint64_t b) { return (a + b - 1) / b; }

struct LayerDims {
    size_t c_out, c_in;
};

// Per (sub-network, sample) layer shapes as the datapath sees them: only
// surviving neurons are computed, layer-1 reads the full voxel.
std::array<LayerDims, 3> layer_dims(const PackedWeightStore& store, size_t subnet,
                                    size_t sample) {
    const PackedSample& ps = store.subnets[subnet].samples[sample];
    return {LayerDims{ps.kept1.size(), store.n_b()},
            LayerDims{ps.kept2.size(), ps.kept1.size()},
            LayerDims{1, ps.kept2.size()}};
}

// Steady-state issue cycles for one voxel through one layer: PE groups times
// input chunks, one issue per cycle.
uint64_t issues_per_voxel(const AcceleratorConfig& cfg, const LayerDims& d) {
    return ceil_div(d.c_out, cfg.n_pe) * ceil_div(d.c_in, cfg.mult_per_pu);
}

// Packed words of one sample copy across all four sub-networks.
uint64_t sample_words(const PackedWeightStore& store, size_t sample) {
    uint64_t words = 0;
    for (const auto& sn : store.subnets) words += sn.samples[sample].words();
    return words;
}

uint64_t load_stall(const PackedWeightStore& store, const AcceleratorConfig& cfg,
                    size_t sample) {
    return ceil_div(sample_words(store, sample), cfg.loader_width);
}

void check_store_config(const PackedWeightStore& store, const AcceleratorConfig& cfg) {
    store.validate();
    cfg.validate();
    if (store.n_b() > cfg.max_voxel_width) {
        throw std::invalid_argument("accel: voxel width exceeds the configured PU capacity");
    }
    if (store.n_samples != cfg.n_samples) {
        throw std::invalid_argument("accel: config n_samples disagrees with the packed store");
    }
}

}  // namespace

size_t AcceleratorConfig::adder_depth() const {
    return static_cast<size_t>(std::countr_zero(mult_per_pu));
}

size_t AcceleratorConfig::pipe_depth() const { return r_m + r_a * (adder_depth() + 1); }

void AcceleratorConfig::validate() const {
    if (n_pe == 0 || mult_per_pu == 0 || r_m == 0 || r_a == 0 || batch_size == 0 ||
        n_samples == 0 || max_voxel_width == 0 || onchip_voxels == 0 || loader_width == 0 ||
        bram_words == 0 || dsp_per_pe == 0) {
        throw std::invalid_argument("accel config: all sizes must be positive");
    }
    if (!std::has_single_bit(mult_per_pu)) {
        throw std::invalid_argument("accel config: mult_per_pu must be a power of two");
    }
    if (!(clock_hz > 0.0) || !std::isfinite(clock_hz)) {
        throw std::invalid_argument("accel config: clock_hz must be finite and positive");
    }
}

const char* schedule_name(Schedule s) {
    return s == Schedule::batch_level ? "batch-level" : "sampling-level";
}

Schedule schedule_from_string(const std::string& name) {
    if (name == "batch-level") return Schedule::batch_level;
    if (name == "sampling-level") return Schedule::sampling_level;
    throw std::invalid_argument("unknown schedule: " + name +
                                " (expected batch-level or sampling-level)");
}

uint64_t pu_latency(const AcceleratorConfig& config, size_t n_b) {
    config.validate();
    if (n_b == 0) throw std::invalid_argument("pu_latency: n_b must be positive");
    if (n_b > config.max_voxel_width) {
        throw std::invalid_argument("pu_latency: n_b exceeds the configured PU capacity");
    }
    const uint64_t l = config.adder_depth();
    return config.r_m + config.r_a * (l + 1) + ceil_div(n_b, config.mult_per_pu) - 1;
}

uint64_t count_weight_loads(const AcceleratorConfig& config, Schedule schedule) {
    config.validate();
    return schedule == Schedule::batch_level
               ? static_cast<uint64_t>(config.n_samples)
               : static_cast<uint64_t>(config.n_samples) * config.batch_size;
}

FunctionalResult simulate_batch_functional(const PackedWeightStore& store,
                                           std::span<const fx::Word> voxels, size_t n_voxels,
                                           const AcceleratorConfig& config, Schedule schedule,
                                           bool allow_batching) {
    check_store_config(store, config);
    const size_t nb = store.n_b();
    if (n_voxels == 0) throw std::invalid_argument("simulate: empty batch");
    if (voxels.size() != n_voxels * nb) {
        throw std::invalid_argument("simulate: voxel block size must be n_voxels * N_b");
    }
    if (n_voxels > config.onchip_voxels && !allow_batching) {
        throw std::invalid_argument("simulate: batch exceeds I/O manager capacity");
    }

    const size_t n_samples = store.n_samples;
    FunctionalResult res;
    res.n_voxels = n_voxels;
    res.n_samples = n_samples;
    res.logits.resize(n_voxels * n_samples);
    res.params.resize(n_voxels * n_samples);

    // Ping-pong halves of the intermediate-layer cache, one in-flight voxel
    // per batch slot.
    std::vector<fx::Word> cache_a(config.batch_size * nb);
    std::vector<fx::Word> cache_b(config.batch_size * nb);

    // One layer for a set of in-flight voxels: output neurons walked in PE
    // groups, every dot product the shared single-rounding mul_acc.
    const auto run_layer = [&](const fx::Word* w, const fx::Word* bias, size_t c_out, size_t c_in,
                               const fx::Word* in, size_t in_stride, fx::Word* out,
                               size_t out_stride, size_t m) {
        for (size_t g = 0; g < c_out; g += config.n_pe) {
            const size_t hi = std::min(g + config.n_pe, c_out);
            for (size_t v = 0; v < m; ++v) {
                const std::span<const fx::Word> x(in + v * in_stride, c_in);
                for (size_t o = g; o < hi; ++o) {
                    out[v * out_stride + o] = fx::relu(fx::mul_acc({w + o * c_in, c_in}, x, bias[o]));
                }
            }
        }
    };

    // Runs sub-network `k`, sample `s` for `m` in-flight voxels starting at
    // global voxel index `base`, writing head outputs.
    const auto run_subnet = [&](size_t k, size_t s, size_t base, size_t m,
                                const fx::Word* in_voxels) {
        const PackedSample& ps = store.subnets[k].samples[s];
        const size_t k1 = ps.kept1.size();
        const size_t k2 = ps.kept2.size();
        run_layer(ps.w1.data(), ps.b1.data(), k1, nb, in_voxels, nb, cache_a.data(), nb, m);
        run_layer(ps.w2.data(), ps.b2.data(), k2, k1, cache_a.data(), nb, cache_b.data(), nb, m);
        // Encoder: a single-neuron layer whose word leaves the datapath for
        // the double-precision head.
        for (size_t v = 0; v < m; ++v) {
            const fx::Word t =
                fx::mul_acc(ps.enc_w, {cache_b.data() + v * nb, k2}, ps.enc_b);
            const size_t idx = (base + v) * n_samples + s;
            res.logits[idx][k] = fx::dequantize(t);
            switch (k) {
                case 0: res.params[idx].d = convert(fx::dequantize(t), store.subnets[0].range); break;
                case 1: res.params[idx].dstar = convert(fx::dequantize(t), store.subnets[1].range); break;
                case 2: res.params[idx].f = convert(fx::dequantize(t), store.subnets[2].range); break;
                case 3: res.params[idx].s0 = convert(fx::dequantize(t), store.subnets[3].range); break;
            }
        }
    };

    for (size_t chunk = 0; chunk < n_voxels; chunk += config.onchip_voxels) {
        const size_t chunk_n = std::min(config.onchip_voxels, n_voxels - chunk);
        for (size_t bstart = 0; bstart < chunk_n; bstart += config.batch_size) {
            const size_t m = std::min(config.batch_size, chunk_n - bstart);
            const size_t base = chunk + bstart;
            const fx::Word* in = voxels.data() + base * nb;
            if (schedule == Schedule::batch_level) {
                for (size_t s = 0; s < n_samples; ++s) {
                    for (size_t k = 0; k < 4; ++k) run_subnet(k, s, base, m, in);
                }
            } else {
                for (size_t v = 0; v < m; ++v) {
                    for (size_t s = 0; s < n_samples; ++s) {
                        for (size_t k = 0; k < 4; ++k) run_subnet(k, s, base + v, 1, in + v * nb);
                    }
                }
            }
        }
    }
    return res;
}

TimingReport estimate_timing(const PackedWeightStore& store, const AcceleratorConfig& config,
                             Schedule schedule) {
    check_store_config(store, config);

    TimingReport rep;
    rep.schedule = schedule;
    rep.n_b = store.n_b();
    rep.batch_size = config.batch_size;
    rep.n_samples = store.n_samples;
    rep.n_pe = config.n_pe;
    rep.pipe_depth = config.pipe_depth();

    const uint64_t b = config.batch_size;
    const uint64_t n = store.n_samples;
    const uint64_t passes_per_layer = schedule == Schedule::batch_level ? n : n * b;

    // Analytic model: work is schedule-invariant, fill and loads are not.
    for (size_t k = 0; k < 4; ++k) {
        for (size_t s = 0; s < n; ++s) {
            const auto dims = layer_dims(store, k, s);
            for (size_t l = 0; l < 3; ++l) {
                rep.layer_cycles[l] += b * issues_per_voxel(config, dims[l]);
            }
        }
    }
    rep.total_passes = passes_per_layer * 4 * 3;
    rep.fill_cycles = rep.total_passes * rep.pipe_depth;

    uint64_t stall_all_samples = 0;
    for (size_t s = 0; s < n; ++s) stall_all_samples += load_stall(store, config, s);
    rep.load_cycles =
        schedule == Schedule::batch_level ? stall_all_samples : b * stall_all_samples;
    rep.weight_loads = count_weight_loads(config, schedule);

    rep.total_cycles =
        rep.layer_cycles[0] + rep.layer_cycles[1] + rep.layer_cycles[2] + rep.fill_cycles +
        rep.load_cycles;
    rep.wall_time_s = static_cast<double>(rep.total_cycles) / config.clock_hz;

    // Event-driven counter: walks the controller's pass structure and charges
    // one dispatch cycle per pass in addition to issue and drain time.
    uint64_t t = 0;
    const auto run_pass = [&](size_t k, size_t l, size_t s, uint64_t voxels_in_pass) {
        const auto dims = layer_dims(store, k, s);
        const uint64_t issues = voxels_in_pass * issues_per_voxel(config, dims[l]);
        t += 1 + issues + rep.pipe_depth;
    };
    if (schedule == Schedule::batch_level) {
        for (size_t s = 0; s < n; ++s) {
            t += load_stall(store, config, s);
            for (size_t k = 0; k < 4; ++k) {
                for (size_t l = 0; l < 3; ++l) run_pass(k, l, s, b);
            }
        }
    } else {
        for (uint64_t v = 0; v < b; ++v) {
            for (size_t s = 0; s < n; ++s) {
                t += load_stall(store, config, s);
                for (size_t k = 0; k < 4; ++k) {
                    for (size_t l = 0; l < 3; ++l) run_pass(k, l, s, 1);
                }
            }
        }
    }
    rep.event_cycles = t;
    rep.analytic_vs_event =
        static_cast<double>(rep.total_cycles > t ? rep.total_cycles - t : t - rep.total_cycles) /
        static_cast<double>(t);
    return rep;
}

ResourceReport estimate_resources(const PackedWeightStore& store,
                                  const AcceleratorConfig& config) {
    check_store_config(store, config);
    ResourceReport rep;
    rep.dsp_used = static_cast<uint64_t>(config.n_pe) * config.dsp_per_pe;
    rep.voxel_words = static_cast<uint64_t>(config.onchip_voxels) * store.n_b();
    rep.weight_words = store.packed_words();
    rep.cache_words = 2ull * store.n_b() * config.batch_size;
    rep.bram_words_used = rep.voxel_words + rep.weight_words + rep.cache_words;
    rep.io_fixed = config.io_fixed;
    rep.over_capacity = rep.bram_words_used > config.bram_words;
    return rep;
}

std::string timing_json(const TimingReport& rep) {
    const nlohmann::json j{{"schedule", schedule_name(rep.schedule)},
                           {"n_b", rep.n_b},
                           {"batch_size", rep.batch_size},
                           {"n_samples", rep.n_samples},
                           {"n_pe", rep.n_pe},
                           {"pipe_depth", rep.pipe_depth},
                           {"total_passes", rep.total_passes},
                           {"layer_cycles",
                            {{"l1", rep.layer_cycles[0]},
                             {"l2", rep.layer_cycles[1]},
                             {"encoder", rep.layer_cycles[2]}}},
                           {"fill_cycles", rep.fill_cycles},
                           {"load_cycles", rep.load_cycles},
                           {"total_cycles", rep.total_cycles},
                           {"wall_time_s", rep.wall_time_s},
                           {"weight_loads", rep.weight_loads},
                           {"event_cycles", rep.event_cycles},
                           {"analytic_vs_event", rep.analytic_vs_event}};
    return j.dump(2) + "\n";
}

std::string resources_json(const ResourceReport& rep) {
    const nlohmann::json j{{"dsp_used", rep.dsp_used},
                           {"voxel_words", rep.voxel_words},
                           {"weight_words", rep.weight_words},
                           {"cache_words", rep.cache_words},
                           {"bram_words_used", rep.bram_words_used},
                           {"io_fixed", rep.io_fixed},
                           {"over_capacity", rep.over_capacity}};
    return j.dump(2) + "\n";
}

std::string pe_sweep_csv(const PackedWeightStore& store, const AcceleratorConfig& base,
                         Schedule schedule, const std::vector<size_t>& pe_counts) {
    if (pe_counts.empty()) throw std::invalid_argument("pe sweep: empty PE list");
    std::string out =
        "n_pe,dsp_used,bram_words_used,io_fixed,steady_cycles,fill_cycles,load_cycles,"
        "total_cycles,wall_time_s,analytic_vs_event\n";
    char buf[64];
    for (size_t pe : pe_counts) {
        AcceleratorConfig cfg = base;
        cfg.n_pe = pe;
        const TimingReport t = estimate_timing(store, cfg, schedule);
        const ResourceReport r = estimate_resources(store, cfg);
        const uint64_t steady = t.layer_cycles[0] + t.layer_cycles[1] + t.layer_cycles[2];
        out += std::to_string(pe) + ',' + std::to_string(r.dsp_used) + ',' +
               std::to_string(r.bram_words_used) + ',' + std::to_string(r.io_fixed) + ',' +
               std::to_string(steady) + ',' + std::to_string(t.fill_cycles) + ',' +
               std::to_string(t.load_cycles) + ',' + std::to_string(t.total_cycles) + ',';
        std::snprintf(buf, sizeof(buf), "%.17g", t.wall_time_s);
        out += buf;
        out += ',';
        std::snprintf(buf, sizeof(buf), "%.17g", t.analytic_vs_event);
        out += buf;
        out += '\n';
    }
    return out;
}

}  // namespace uivim
