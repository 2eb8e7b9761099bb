// Acceptance suite: one line per criterion, nonzero exit if any fail.
// Every check is pinned to an explicit tolerance stated in its notes.

#include <sys/wait.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "uivim/accel.hpp"
#include "uivim/evaluation.hpp"
#include "uivim/fixed_point.hpp"
#include "uivim/ivim.hpp"
#include "uivim/masks.hpp"
#include "uivim/network.hpp"
#include "uivim/packed_store.hpp"
#include "uivim/run_config.hpp"

#if UIVIM_HAVE_BOOST_MP
#include <boost/multiprecision/cpp_int.hpp>
#endif

using namespace uivim;
namespace fs = std::filesystem;

namespace {

struct Check {
    bool ok = true;
    std::vector<std::string> notes;

    void expect(bool cond, const std::string& what) {
        if (!cond) {
            ok = false;
            notes.push_back(what);
        }
    }
    void info(const std::string& what) { notes.push_back(what); }
};

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

bool rel_close(double a, double b, double tol) {
    const double scale = std::max({std::fabs(a), std::fabs(b), 1e-300});
    return std::fabs(a - b) / scale <= tol;
}

std::mt19937_64 make_gen(uint64_t seed) { return std::mt19937_64(seed); }

UIvimNet randomized_net(const BValueSchedule& sched, double drop, size_t n, uint64_t seed) {
    ParamRanges ranges;
    UIvimNet net = init_network(sched, ranges, drop, n, seed);
    std::mt19937_64 gen(seed * 17 + 1);
    std::uniform_real_distribution<double> ug(0.6, 1.4), ub(-0.4, 0.4);
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
    return net;
}

// criterion 1 ------------------------------------------------------------

void c01_signal_oracle(Check& c) {
    struct Row {
        IvimParams p;
        double b, want;
    };
    // Values computed independently from s0*(f*exp(-b*Dstar)+(1-f)*exp(-b*D)).
    const Row rows[] = {
        {{0.001, 0.01, 0.0, 1.0}, 500.0, 0.6065306597126334},
        {{0.001, 0.05, 0.2, 1.0}, 100.0, 0.7252175238285847},
        {{0.002, 0.08, 0.35, 1.1}, 800.0, 0.1443560103661786},
        {{0.0015, 0.02, 0.1, 0.9}, 50.0, 0.7845813736315577},
    };
    for (const Row& r : rows) {
        const double got = forward_signal(r.p, r.b);
        c.expect(rel_close(got, r.want, 1e-12),
                 "forward_signal(b=" + num(r.b) + ") = " + num(got) + ", want " + num(r.want));
    }

    // Degenerate identities hold exactly, not to tolerance.
    auto gen = make_gen(11);
    std::uniform_real_distribution<double> ud(0.0005, 0.005), us(0.01, 0.1), uf(0.0, 1.0),
        u0(0.8, 1.2), ubv(0.0, 1000.0);
    for (int i = 0; i < 200; ++i) {
        IvimParams p{ud(gen), us(gen), uf(gen), u0(gen)};
        c.expect(forward_signal(p, 0.0) == p.s0, "b=0 must return S0 exactly");
        const double b = ubv(gen);
        IvimParams mono = p;
        mono.f = 0.0;
        c.expect(forward_signal(mono, b) == mono.s0 * std::exp(-b * mono.d),
                 "f=0 must be mono-exponential in D exactly");
        IvimParams perf = p;
        perf.f = 1.0;
        c.expect(forward_signal(perf, b) == perf.s0 * std::exp(-b * perf.dstar),
                 "f=1 must be mono-exponential in Dstar exactly");
    }
}

// criterion 2 ------------------------------------------------------------

void c02_gradients(Check& c) {
    // Signal gradient against central differences: rel err < 1e-6 with a
    // 1e-7 absolute floor absorbing FD roundoff where the derivative
    // underflows (dS/dDstar at large b*Dstar is ~1e-41 but FD noise is not).
    auto gen = make_gen(23);
    std::uniform_real_distribution<double> ud(0.0005, 0.005), us(0.01, 0.1), uf(0.05, 0.95),
        u0(0.8, 1.2), ubv(1.0, 1000.0);
    double worst = 0.0;
    for (int i = 0; i < 150; ++i) {
        const IvimParams p{ud(gen), us(gen), uf(gen), u0(gen)};
        const double b = ubv(gen);
        const auto g = signal_gradient(p, b);
        const std::array<double, 4> fields{p.d, p.dstar, p.f, p.s0};
        for (size_t k = 0; k < 4; ++k) {
            const double h = 1e-5 * std::max(std::fabs(fields[k]), 1e-2);
            IvimParams hi = p, lo = p;
            double* fields_hi[4] = {&hi.d, &hi.dstar, &hi.f, &hi.s0};
            double* fields_lo[4] = {&lo.d, &lo.dstar, &lo.f, &lo.s0};
            *fields_hi[k] += h;
            *fields_lo[k] -= h;
            const double fd = (forward_signal(hi, b) - forward_signal(lo, b)) / (2 * h);
            const double tol = 1e-7 + 1e-6 * std::max(std::fabs(g[k]), std::fabs(fd));
            worst = std::max(worst, std::fabs(g[k] - fd) / tol);
        }
    }
    c.expect(worst < 1.0,
             "signal gradient FD mismatch at " + num(worst) + "x tolerance (1e-6 rel + 1e-7 abs)");

    // Worked partial: dS/df at D=0.001, Dstar=0.05, b=100 is exp(-5)-exp(-0.1).
    const auto g = signal_gradient({0.001, 0.05, 0.3, 1.0}, 100.0);
    c.expect(rel_close(g[2], -0.898099471036874, 1e-12),
             "dS/df worked example: got " + num(g[2]));

    // Full-network analytic gradients across >= 20 random nets, widths 6 and
    // 11, h = 1e-4, tol 1e-4. When a random draw lands on a sharp sigmoid the
    // FD itself carries O(h^2) truncation above 1e-4; such configs must show
    // the h^2 signature under refinement (err drops ~100x at h/10) and meet
    // the 1e-4 bound at the refined step, proving the mismatch is the
    // measurement and not the gradient.
    const BValueSchedule w6{{0, 50, 150, 400, 800, 1000}};
    const BValueSchedule w11 = BValueSchedule::defaults();
    double worst_net = 0.0;
    int nets = 0;
    int refined = 0;
    bool all_ok = true;
    for (const BValueSchedule& sched : {w6, w11}) {
        for (uint64_t seed = 1; seed <= 10; ++seed, ++nets) {
            UIvimNet net = randomized_net(sched, 0.5, 4, seed * 7 + sched.size());
            std::mt19937_64 vgen(seed * 31);
            std::uniform_real_distribution<double> uv(0.2, 1.2);
            std::vector<double> voxels(3 * sched.size());
            for (double& x : voxels) x = uv(vgen);
            const std::vector<size_t> samples{0, 1, 2};
            for (BnMode mode : {BnMode::inference, BnMode::training}) {
                const double err4 = gradient_check(net, voxels, 3, samples, 1e-4, mode);
                if (err4 < 1e-4) {
                    worst_net = std::max(worst_net, err4);
                    continue;
                }
                ++refined;
                const double err5 = gradient_check(net, voxels, 3, samples, 1e-5, mode);
                const double ratio = err4 / std::max(err5, 1e-300);
                const bool ok = err5 < 1e-4 && ratio > 25.0 && ratio < 400.0;
                all_ok = all_ok && ok;
                worst_net = std::max(worst_net, err5);
                c.info("n_b=" + std::to_string(sched.size()) + " seed=" + std::to_string(seed) +
                       (mode == BnMode::training ? " training" : " inference") + ": FD " +
                       num(err4) + " at h=1e-4 is truncation (h/10 gives " + num(err5) +
                       ", ratio " + num(ratio) + (ok ? ", h^2 confirmed)" : ", NOT h^2)"));
            }
        }
    }
    c.expect(nets >= 20, "need at least 20 nets, ran " + std::to_string(nets));
    c.expect(all_ok && worst_net < 1e-4,
             "reconstruction-loss gradient FD mismatch " + num(worst_net) + " (tol 1e-4)");
    c.info("worst signal FD " + num(worst) + "x tol, worst net FD " + num(worst_net) + ", " +
           std::to_string(refined) + " config(s) required step refinement");
}

// criterion 3 ------------------------------------------------------------

void c03_uncertainty_requirement(Check& c) {
    const uint64_t seed = 42;
    ParamRanges ranges;
    const BValueSchedule sched = BValueSchedule::defaults();

    const NoiseSpec train_noise{15.0, snr_level_seed(seed, 15.0), true};
    const Dataset train_ds = generate_dataset(ranges, sched, 10000, train_noise);

    TrainingConfig cfg;  // reference defaults
    cfg.seed = seed;
    UIvimNet net = init_network(sched, ranges, cfg.drop_rate, cfg.n_samples, cfg.seed);
    const TrainResult tr = train(net, train_ds, cfg);
    c.info("trained " + std::to_string(tr.epochs_run) + " epochs, best val loss " +
           num(tr.val_loss[tr.best_epoch]));

    const SweepReport rep = snr_sweep(net, ranges, sched, {5, 15, 20, 30, 50}, 2000, seed);
    const RequirementVerdict verdict = check_requirement(rep, 0.05);

    const char* names[4] = {"D", "Dstar", "f", "S0"};
    for (size_t k = 0; k < 4; ++k) {
        std::string u = "rel_uncertainty[" + std::string(names[k]) + "]:";
        std::string r = "rmse[" + std::string(names[k]) + "]:";
        for (const auto& row : rep.rows) {
            u += " " + num(row.rel_uncertainty[k]);
            r += " " + num(row.rmse[k]);
        }
        c.info(u);
        c.info(r);
    }

    c.expect(verdict.passed, "check_requirement failed (tau = 0.05)");
    for (size_t k = 0; k < 4; ++k) {
        if (!verdict.monotone[k]) {
            c.expect(false, std::string("uncertainty not monotone for ") + names[k]);
        }
    }

    // Error itself must also shrink with SNR, same slack.
    for (size_t k = 0; k < 4; ++k) {
        for (size_t i = 0; i + 1 < rep.rows.size(); ++i) {
            const double lo = rep.rows[i].rmse[k];
            const double hi = rep.rows[i + 1].rmse[k];
            c.expect(hi <= lo * 1.05, std::string("rmse rose for ") + names[k] + " between snr " +
                                          num(rep.rows[i].snr) + " and " +
                                          num(rep.rows[i + 1].snr) + ": " + num(lo) + " -> " +
                                          num(hi) + " (tau 0.05)");
        }
    }
}

// criterion 4 ------------------------------------------------------------

AcceleratorConfig lat_cfg(size_t mult, size_t r_m, size_t r_a) {
    AcceleratorConfig cfg;
    cfg.mult_per_pu = mult;
    cfg.r_m = r_m;
    cfg.r_a = r_a;
    cfg.dsp_per_pe = mult;
    cfg.max_voxel_width = 1024;
    return cfg;
}

UIvimNet tiny_folded_net() {
    ParamRanges ranges;
    UIvimNet net = init_network(BValueSchedule{{0.0, 1000.0}}, ranges, 0.0, 1, 5);
    return fold_batchnorm(net);
}

void c04_pu_latency(Check& c) {
    struct Row {
        size_t mult, r_m, r_a, n_b;
        uint64_t want;
    };
    const Row rows[] = {
        {32, 3, 2, 104, 18}, {2, 1, 1, 2, 3},    {2, 1, 1, 1, 3},   {4, 2, 1, 16, 8},
        {8, 1, 2, 64, 16},   {16, 3, 3, 16, 18}, {32, 3, 2, 32, 15}, {32, 3, 2, 33, 16},
        {64, 4, 2, 512, 25}, {128, 2, 2, 128, 18}, {1024, 1, 1, 1, 12},
    };
    for (const Row& r : rows) {
        const uint64_t got = pu_latency(lat_cfg(r.mult, r.r_m, r.r_a), r.n_b);
        c.expect(got == r.want, "pu_latency(mult=" + std::to_string(r.mult) +
                                    ", r_m=" + std::to_string(r.r_m) +
                                    ", r_a=" + std::to_string(r.r_a) +
                                    ", n_b=" + std::to_string(r.n_b) + ") = " +
                                    std::to_string(got) + ", want " + std::to_string(r.want));
    }

    // Event counter vs closed form on a two-b-value store: each of the 12
    // passes costs exactly one issue plus the pipeline fill, i.e.
    // pu_latency + 1 cycles in the analytic model; the event walk adds one
    // dispatch cycle per pass and nothing else.
    const PackedWeightStore store = pack_weights(tiny_folded_net());
    AcceleratorConfig cfg;
    cfg.n_pe = 2;
    cfg.mult_per_pu = 2;
    cfg.r_m = 1;
    cfg.r_a = 1;
    cfg.batch_size = 1;
    cfg.n_samples = 1;
    cfg.loader_width = 64;
    cfg.dsp_per_pe = 2;
    const TimingReport t = estimate_timing(store, cfg, Schedule::batch_level);
    c.expect(t.pipe_depth == 3, "pipe depth: got " + std::to_string(t.pipe_depth));
    c.expect(t.total_cycles == 49, "analytic total: got " + std::to_string(t.total_cycles) +
                                       ", want 49 = 12*(pu_latency+1) + 1 load");
    c.expect(t.event_cycles == 61, "event total: got " + std::to_string(t.event_cycles));
    c.expect(t.event_cycles - t.total_cycles == t.total_passes,
             "event minus analytic must equal the per-pass dispatch overhead");
    const uint64_t per_pass = (t.total_cycles - t.load_cycles) / t.total_passes;
    c.expect(per_pass == pu_latency(cfg, 2) + 1,
             "per-pass cycles " + std::to_string(per_pass) + " != pu_latency + 1");
}

// criterion 5 ------------------------------------------------------------

void c05_weight_loads(Check& c) {
    AcceleratorConfig cfg;  // reference setup: N = 4, batch 64
    const uint64_t batch = count_weight_loads(cfg, Schedule::batch_level);
    const uint64_t sampling = count_weight_loads(cfg, Schedule::sampling_level);
    c.expect(batch == 4, "batch-level loads: got " + std::to_string(batch) + ", want 4");
    c.expect(sampling == 256, "sampling-level loads: got " + std::to_string(sampling) +
                                  ", want 256");
    c.expect(sampling / batch == 64, "ratio must equal the batch size 64");

    for (size_t n : {1u, 4u, 16u}) {
        for (size_t b : {1u, 8u, 64u, 100u}) {
            AcceleratorConfig v;
            v.n_samples = n;
            v.batch_size = b;
            c.expect(count_weight_loads(v, Schedule::batch_level) == n,
                     "batch-level law broken at N=" + std::to_string(n));
            c.expect(count_weight_loads(v, Schedule::sampling_level) == n * b,
                     "sampling-level law broken at N=" + std::to_string(n) +
                         ", B=" + std::to_string(b));
        }
    }
}

// criterion 6 ------------------------------------------------------------

IvimParams dense_fx_forward(const PackedWeightStore& store, size_t k, size_t sample,
                            std::span<const fx::Word> voxel) {
    const size_t n = store.n_b();
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
    IvimParams out;
    const double v = convert(fx::dequantize(enc), store.subnets[k].range);
    switch (k) {
        case 0: out.d = v; break;
        case 1: out.dstar = v; break;
        case 2: out.f = v; break;
        default: out.s0 = v; break;
    }
    return out;
}

void c06_packed_storage(Check& c) {
    const PackedWeightStore store =
        pack_weights(fold_batchnorm(randomized_net(BValueSchedule::profile104(), 0.5, 4, 3)));
    for (size_t k = 0; k < 4; ++k) {
        for (const PackedSample& s : store.subnets[k].samples) {
            c.expect(s.kept1.size() == 52 && s.kept2.size() == 52,
                     "p=0.5 over 104 channels must keep 52");
            c.expect(s.w2.size() == 52 * 52,
                     "masked layer block must be 25% of dense: got " +
                         std::to_string(s.w2.size()) + " words");
            c.expect(s.w2.size() * 4 == 104 * 104, "w2 is a quarter of the dense layer");
            c.expect(s.w1.size() == 52 * 104, "w1 keeps half of the dense layer");
        }
    }

    // Scattering back to dense matrices and running the same fixed-point
    // arithmetic must reproduce the packed path bit for bit.
    const PackedWeightStore small =
        pack_weights(fold_batchnorm(randomized_net(BValueSchedule::defaults(), 0.5, 4, 9)));
    auto gen = make_gen(31);
    std::uniform_real_distribution<double> uv(0.1, 1.2);
    size_t mismatches = 0;
    for (int i = 0; i < 50; ++i) {
        std::vector<double> vox(11);
        for (double& x : vox) x = uv(gen);
        const auto q = fx::quantize_vector(std::span<const double>(vox));
        for (size_t s = 0; s < 4; ++s) {
            const IvimParams packed = quantized_forward(small, q, s);
            const std::array<double, 4> got = packed.as_array();
            const std::array<double, 4> want{
                dense_fx_forward(small, 0, s, q).d, dense_fx_forward(small, 1, s, q).dstar,
                dense_fx_forward(small, 2, s, q).f, dense_fx_forward(small, 3, s, q).s0};
            for (size_t k = 0; k < 4; ++k) mismatches += got[k] != want[k];
        }
    }
    c.expect(mismatches == 0,
             std::to_string(mismatches) + " packed-vs-dense mismatches (must be bit-exact)");
}

// criterion 7 ------------------------------------------------------------

void c07_simulator_equivalence(Check& c) {
    const PackedWeightStore store =
        pack_weights(fold_batchnorm(randomized_net(BValueSchedule::defaults(), 0.5, 4, 7)));
    const size_t n_voxels = 2500;
    auto gen = make_gen(77);
    std::uniform_real_distribution<double> uv(0.1, 1.2);
    std::vector<double> raw(n_voxels * 11);
    for (double& x : raw) x = uv(gen);
    const auto voxels = fx::quantize_vector(std::span<const double>(raw));

    AcceleratorConfig cfg;
    cfg.batch_size = 64;
    cfg.onchip_voxels = 900;

    size_t pairs = 0, mismatches = 0;
    FunctionalResult first;
    for (Schedule sched : {Schedule::batch_level, Schedule::sampling_level}) {
        const FunctionalResult res =
            simulate_batch_functional(store, voxels, n_voxels, cfg, sched);
        for (size_t v = 0; v < n_voxels; ++v) {
            const std::span<const fx::Word> voxel(voxels.data() + v * 11, 11);
            for (size_t s = 0; s < 4; ++s) {
                const IvimParams want = quantized_forward(store, voxel, s);
                const IvimParams got = res.params[v * 4 + s];
                if (got.d != want.d || got.dstar != want.dstar || got.f != want.f ||
                    got.s0 != want.s0) {
                    ++mismatches;
                }
                ++pairs;
            }
        }
        if (sched == Schedule::batch_level) {
            first = res;
        } else {
            for (size_t i = 0; i < res.params.size(); ++i) {
                if (res.params[i].as_array() != first.params[i].as_array()) ++mismatches;
            }
        }
    }
    c.expect(pairs >= 10000, "covered only " + std::to_string(pairs) + " pairs");
    c.expect(mismatches == 0, std::to_string(mismatches) +
                                  " (voxel, sample) mismatches (must be bit-exact)");

    const TimingReport tb = estimate_timing(store, cfg, Schedule::batch_level);
    const TimingReport ts = estimate_timing(store, cfg, Schedule::sampling_level);
    c.expect(tb.total_cycles != ts.total_cycles,
             "controller schedule must change the cycle count");
    c.info(std::to_string(pairs / 2) + " pairs per schedule, batch " +
           std::to_string(tb.total_cycles) + " vs sampling " + std::to_string(ts.total_cycles) +
           " cycles");
}

// criterion 8 ------------------------------------------------------------

void c08_fixed_point(Check& c) {
    for (int32_t w = -32768; w <= 32767; ++w) {
        const auto word = static_cast<fx::Word>(w);
        if (fx::quantize(fx::dequantize(word)) != word) {
            c.expect(false, "round-trip failed at word " + std::to_string(w));
            break;
        }
    }

    auto gen = make_gen(3);
    std::uniform_int_distribution<int32_t> word(-32768, 32767);
    std::uniform_int_distribution<size_t> len(1, 128);
    size_t mismatches = 0;
    for (int trial = 0; trial < 10000; ++trial) {
        const size_t n = len(gen);
        std::vector<fx::Word> w(n), x(n);
        for (auto& v : w) v = static_cast<fx::Word>(word(gen));
        for (auto& v : x) v = static_cast<fx::Word>(word(gen));
        const auto bias = static_cast<fx::Word>(word(gen));

#if UIVIM_HAVE_BOOST_MP
        using boost::multiprecision::cpp_int;
        cpp_int acc = 0;
        for (size_t i = 0; i < n; ++i) acc += cpp_int(w[i]) * cpp_int(x[i]);
        acc += cpp_int(bias) * 4096;
        cpp_int q = acc / 4096;
        cpp_int rem = acc % 4096;
        if (rem < 0) {
            q -= 1;
            rem += 4096;
        }
        if (rem > 2048 || (rem == 2048 && q % 2 != 0)) q += 1;
        if (q > 32767) q = 32767;
        if (q < -32768) q = -32768;
        const auto want = static_cast<fx::Word>(static_cast<int64_t>(q));
#else
        __int128 acc = 0;
        for (size_t i = 0; i < n; ++i)
            acc += static_cast<__int128>(w[i]) * static_cast<__int128>(x[i]);
        acc += static_cast<__int128>(bias) * 4096;
        __int128 q = acc / 4096;
        __int128 rem = acc % 4096;
        if (rem < 0) {
            q -= 1;
            rem += 4096;
        }
        if (rem > 2048 || (rem == 2048 && q % 2 != 0)) q += 1;
        if (q > 32767) q = 32767;
        if (q < -32768) q = -32768;
        const auto want = static_cast<fx::Word>(static_cast<int64_t>(q));
#endif
        mismatches += fx::mul_acc(w, x, bias) != want;
    }
    c.expect(mismatches == 0,
             std::to_string(mismatches) + " mul_acc oracle mismatches over 10000 vectors");
#if UIVIM_HAVE_BOOST_MP
    c.info("oracle: boost cpp_int");
#else
    c.info("oracle: __int128");
#endif
}

// criterion 9 ------------------------------------------------------------

void c09_resource_scaling(Check& c) {
    const PackedWeightStore store =
        pack_weights(fold_batchnorm(randomized_net(BValueSchedule::profile104(), 0.5, 4, 17)));
    uint64_t base_dsp = 0, base_bram = 0;
    size_t base_pe = 0;
    for (size_t pe : {4u, 8u, 16u, 32u}) {
        AcceleratorConfig cfg;
        cfg.n_pe = pe;
        const ResourceReport r = estimate_resources(store, cfg);
        if (base_pe == 0) {
            base_pe = pe;
            base_dsp = r.dsp_used;
            base_bram = r.bram_words_used;
        } else {
            c.expect(r.dsp_used * base_pe == base_dsp * pe,
                     "DSP count not exactly linear at " + std::to_string(pe) + " PEs");
            c.expect(r.bram_words_used == base_bram,
                     "BRAM words changed with PE count at " + std::to_string(pe));
        }
        for (Schedule sched : {Schedule::batch_level, Schedule::sampling_level}) {
            const TimingReport t = estimate_timing(store, cfg, sched);
            c.expect(t.analytic_vs_event <= 0.10,
                     "analytic vs event gap " + num(t.analytic_vs_event) + " at " +
                         std::to_string(pe) + " PEs (tol 10%)");
        }
    }
    AcceleratorConfig ref;
    const ResourceReport r = estimate_resources(store, ref);
    c.expect(r.voxel_words == 2080000,
             "voxel words: got " + std::to_string(r.voxel_words) + ", want 20000 * 104");
}

// criterion 10 -----------------------------------------------------------

void c10_wall_time(Check& c) {
    const PackedWeightStore store =
        pack_weights(fold_batchnorm(randomized_net(BValueSchedule::profile104(), 0.5, 4, 19)));
    const AcceleratorConfig cfg;  // 32 PEs, 32 multipliers, 250 MHz, batch 64, N = 4
    const TimingReport t = estimate_timing(store, cfg, Schedule::batch_level);
    const double ms = t.wall_time_s * 1e3;
    c.info("estimated " + num(ms) + " ms per 64-voxel batch; reference FPGA measurement 0.28 ms");
    c.expect(ms >= 0.028 && ms <= 2.8,
             "wall time " + num(ms) + " ms outside [0.028, 2.8] ms");
}

// criterion 11 -----------------------------------------------------------

int run_cmd(const std::string& cmd) {
    const int rc = std::system(cmd.c_str());
    if (rc == -1) return -1;
    if (WIFEXITED(rc)) return WEXITSTATUS(rc);
    return -2;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) return {};
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void c11_pipeline_determinism(Check& c, const std::string& cli) {
    if (cli.empty()) {
        c.expect(false, "no --cli path given; cannot drive the pipeline");
        return;
    }
    if (!fs::exists(cli)) {
        c.expect(false, "CLI binary not found: " + cli);
        return;
    }

    std::random_device rd;
    const fs::path root =
        fs::temp_directory_path() / ("uivim_accept_" + std::to_string(rd()));
    fs::create_directories(root);

    const fs::path cfg_path = root / "run.json";
    {
        std::ofstream out(cfg_path);
        out << R"({
  "seed": 202,
  "n_voxels": 600,
  "eval_voxels": 200,
  "snr_levels": [5, 15],
  "training": {"max_epochs": 3, "patience": 3, "batch_size": 64},
  "accel": {"batch_size": 16, "onchip_voxels": 256}
})";
    }

    struct RunOut {
        int eval_rc = -1;
        std::vector<std::pair<std::string, std::string>> artifacts;  // name -> bytes
    };

    auto run_pipeline = [&](const fs::path& dir, unsigned gen_threads) -> RunOut {
        RunOut out;
        fs::create_directories(dir / "data");
        const std::string log = " >> " + (dir / "log.txt").string() + " 2>&1";
        const std::string base = cli + " ";

        auto must = [&](const std::string& sub) {
            const int rc = run_cmd(base + sub + log);
            c.expect(rc == 0, "command failed (exit " + std::to_string(rc) + "): " + sub);
            return rc == 0;
        };

        std::string gen_cmd = "gen-data --config " + cfg_path.string() + " --out " +
                              (dir / "data").string();
        if (gen_threads > 1) gen_cmd += " --threads " + std::to_string(gen_threads);
        if (!must(gen_cmd)) return out;
        if (!must("train --config " + cfg_path.string() + " --data " +
                  (dir / "data" / "data_snr15.ivds").string() + " --out " +
                  (dir / "model.uivm").string()))
            return out;
        out.eval_rc = run_cmd(base + "eval --config " + cfg_path.string() + " --model " +
                              (dir / "model.uivm").string() + " --out " +
                              (dir / "eval").string() + log);
        c.expect(out.eval_rc == 0 || out.eval_rc == 1,
                 "eval must exit 0 or 1, got " + std::to_string(out.eval_rc));
        if (!must("quantize --model " + (dir / "model.uivm").string() + " --out " +
                  (dir / "store.uivq").string()))
            return out;
        if (!must("simulate --config " + cfg_path.string() + " --store " +
                  (dir / "store.uivq").string() + " --data " +
                  (dir / "data" / "data_snr5.ivds").string() + " --out " +
                  (dir / "sim").string() + " --pe-sweep 4,8"))
            return out;

        for (const char* name :
             {"data/data_snr5.ivds", "data/data_snr15.ivds", "model.uivm", "eval.csv",
              "eval.json", "store.uivq", "sim_outputs.csv", "sim_timing.json",
              "sim_resources.json", "sim_pe_sweep.csv"}) {
            out.artifacts.emplace_back(name, slurp(dir / name));
        }
        return out;
    };

    const RunOut a = run_pipeline(root / "run1", 1);
    const RunOut b = run_pipeline(root / "run2", 1);
    c.expect(a.eval_rc == b.eval_rc, "eval exit codes differ between runs");
    c.expect(a.artifacts.size() == b.artifacts.size(), "artifact sets differ");
    for (size_t i = 0; i < a.artifacts.size() && i < b.artifacts.size(); ++i) {
        c.expect(!a.artifacts[i].second.empty(), a.artifacts[i].first + " is empty or missing");
        c.expect(a.artifacts[i].second == b.artifacts[i].second,
                 a.artifacts[i].first + " differs between identical runs");
    }

    // Thread count must not change the generated data.
    const fs::path run3 = root / "run3";
    fs::create_directories(run3 / "data");
    const std::string log3 = " >> " + (run3 / "log.txt").string() + " 2>&1";
    const int rc3 = run_cmd(cli + " gen-data --config " + cfg_path.string() + " --out " +
                            (run3 / "data").string() + " --threads 4" + log3);
    c.expect(rc3 == 0, "threaded gen-data failed with exit " + std::to_string(rc3));
    for (const char* name : {"data/data_snr5.ivds", "data/data_snr15.ivds"}) {
        c.expect(slurp(root / "run1" / name) == slurp(run3 / name),
                 std::string(name) + " changed with the thread count");
    }

    if (c.ok) {
        std::error_code ec;
        fs::remove_all(root, ec);
    } else {
        c.info("artifacts kept at " + root.string());
    }
}

}  // namespace

int main(int argc, char** argv) {
    std::string cli;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--cli" && i + 1 < argc) cli = argv[++i];
    }

    struct Criterion {
        int id;
        const char* desc;
        std::function<void(Check&)> fn;
    };
    const std::vector<Criterion> criteria{
        {1, "signal model forward oracle (1e-12 relative, exact degenerate identities)",
         c01_signal_oracle},
        {2, "analytic gradients vs central differences (signal 1e-6, network 1e-4)",
         c02_gradients},
        {3, "uncertainty and error nonincreasing across the SNR sweep (tau 5%)",
         c03_uncertainty_requirement},
        {4, "PU latency formula and pipeline-fill accounting (exact)", c04_pu_latency},
        {5, "weight-load counts: N per batch vs N per voxel (exact)", c05_weight_loads},
        {6, "mask-zero-skipping storage ratio and dense equivalence (bit-exact)",
         c06_packed_storage},
        {7, "functional simulator equals the quantized reference (bit-exact, 10^4 pairs)",
         c07_simulator_equivalence},
        {8, "fixed-point dot product vs wide-integer oracle (bit-exact, 10^4 vectors)",
         c08_fixed_point},
        {9, "DSP linear in PEs, BRAM constant, timing models within 10%", c09_resource_scaling},
        {10, "reference-config wall time within [0.028, 2.8] ms", c10_wall_time},
        {11, "pipeline artifacts byte-identical across runs and thread counts",
         [&cli](Check& ck) { c11_pipeline_determinism(ck, cli); }},
    };

    int failures = 0;
    for (const auto& cr : criteria) {
        Check ck;
        try {
            cr.fn(ck);
        } catch (const std::exception& e) {
            ck.ok = false;
            ck.notes.push_back(std::string("exception: ") + e.what());
        }
        std::printf("criterion %02d %s %s\n", cr.id, ck.ok ? "PASS" : "FAIL", cr.desc);
        for (const auto& note : ck.notes) std::printf("  note: %s\n", note.c_str());
        std::fflush(stdout);
        failures += !ck.ok;
    }

    if (failures != 0) std::printf("%d criterion(s) failed\n", failures);
    return failures == 0 ? 0 : 1;
}
