// uivim: one binary driving the whole flow. Subcommands mirror the pipeline
// phases: gen-data, train, grid, eval, quantize, simulate, report. Every
// command validates its configuration before any file is written; eval's exit
// code encodes the uncertainty-requirement gate (0 pass, 1 fail, 2 error).

#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "uivim/accel.hpp"
#include "uivim/evaluation.hpp"
#include "uivim/fixed_point.hpp"
#include "uivim/ivim.hpp"
#include "uivim/network.hpp"
#include "uivim/packed_store.hpp"
#include "uivim/run_config.hpp"
#include "uivim/serialize.hpp"

namespace fs = std::filesystem;
using namespace uivim;

namespace {

std::string fmt(double v, const char* spec = "%g") {
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

RunConfig load_config(const std::string& path) {
    if (path.empty()) return RunConfig{};
    return RunConfig::from_json_file(path);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out << text;
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

ParamRanges model_ranges(const UIvimNet& net) {
    ParamRanges r;
    r.d = net.subnets[0].range;
    r.dstar = net.subnets[1].range;
    r.f = net.subnets[2].range;
    r.s0 = net.subnets[3].range;
    return r;
}

// gen-data ------------------------------------------------------------------

struct GenDataArgs {
    std::string config_path;
    std::string out_dir = ".";
    std::optional<uint64_t> seed;
    std::optional<size_t> voxels;
    std::vector<double> snr;
    std::optional<unsigned> threads;
    bool normalize_by_clean = false;
};

int cmd_gen_data(const GenDataArgs& args) {
    RunConfig cfg = load_config(args.config_path);
    if (args.seed) cfg.seed = *args.seed;
    if (args.voxels) cfg.n_voxels = *args.voxels;
    if (!args.snr.empty()) cfg.snr_levels = args.snr;
    if (args.threads) cfg.n_threads = *args.threads;
    if (args.normalize_by_clean) cfg.normalize_by_clean = true;
    cfg.validate();

    // File labels must be distinct before anything is written.
    std::map<std::string, double> labels;
    for (double snr : cfg.snr_levels) {
        const std::string label = fmt(snr);
        auto [it, inserted] = labels.emplace(label, snr);
        if (!inserted) {
            throw std::invalid_argument("SNR levels " + fmt(it->second, "%.17g") + " and " +
                                        fmt(snr, "%.17g") + " collide on file label '" + label +
                                        "'");
        }
    }

    fs::create_directories(args.out_dir);
    write_text(fs::path(args.out_dir) / "config.json", cfg.to_json());
    for (double snr : cfg.snr_levels) {
        const NoiseSpec noise{snr, snr_level_seed(cfg.seed, snr), true};
        Dataset ds = generate_dataset(cfg.ranges, cfg.schedule, cfg.n_voxels, noise,
                                      cfg.normalize_by_clean, cfg.n_threads);
        const fs::path path = fs::path(args.out_dir) / ("data_snr" + fmt(snr) + ".ivds");
        save_dataset(path.string(), ds);
        std::printf("wrote %s: %zu voxels, n_b=%zu, snr=%s, redraws=%llu\n",
                    path.string().c_str(), ds.n_voxels(), ds.schedule.size(), fmt(snr).c_str(),
                    static_cast<unsigned long long>(ds.redraws));
    }
    std::printf("gen-data: %zu datasets, %zu voxels each, seed=%llu\n", cfg.snr_levels.size(),
                cfg.n_voxels, static_cast<unsigned long long>(cfg.seed));
    return 0;
}

// train ---------------------------------------------------------------------

struct TrainArgs {
    std::string config_path;
    std::string data_path;
    std::string out_path = "model.uivm";
    std::optional<double> lr;
    std::optional<size_t> batch_size;
    std::optional<size_t> epochs;
    std::optional<size_t> patience;
    std::optional<double> drop_rate;
    std::optional<size_t> samples;
    std::optional<double> val_fraction;
    std::optional<uint64_t> seed;
};

TrainingConfig apply_training_overrides(TrainingConfig tc, const TrainArgs& args) {
    if (args.lr) tc.learning_rate = *args.lr;
    if (args.batch_size) tc.batch_size = *args.batch_size;
    if (args.epochs) tc.max_epochs = *args.epochs;
    if (args.patience) tc.patience = *args.patience;
    if (args.drop_rate) tc.drop_rate = *args.drop_rate;
    if (args.samples) tc.n_samples = *args.samples;
    if (args.val_fraction) tc.val_fraction = *args.val_fraction;
    if (args.seed) tc.seed = *args.seed;
    return tc;
}

int cmd_train(const TrainArgs& args) {
    RunConfig cfg = load_config(args.config_path);
    const TrainingConfig tc = apply_training_overrides(cfg.training, args);
    tc.validate();

    const Dataset data = load_dataset(args.data_path);
    UIvimNet net = init_network(data.schedule, data.ranges, tc.drop_rate, tc.n_samples, tc.seed);
    const TrainResult result = train(net, data, tc);
    save_model(args.out_path, net);
    std::printf("trained %s: epochs=%zu best_epoch=%zu train_loss=%s val_loss=%s\n",
                args.out_path.c_str(), result.epochs_run, result.best_epoch,
                fmt(result.train_loss.back()).c_str(),
                fmt(result.val_loss[result.best_epoch]).c_str());
    return 0;
}

// grid ----------------------------------------------------------------------

struct GridArgs {
    std::string config_path;
    std::string train_path;
    std::string val_path;
    std::string out_dir = ".";
    bool no_probe = false;
};

int cmd_grid(const GridArgs& args) {
    RunConfig cfg = load_config(args.config_path);
    cfg.grid.validate();
    cfg.training.validate();

    const Dataset train_data = load_dataset(args.train_path);
    const Dataset val_data = load_dataset(args.val_path);
    std::optional<RequirementProbe> probe;
    if (!args.no_probe) {
        probe = RequirementProbe{cfg.snr_levels, cfg.probe_voxels, cfg.tau, cfg.seed};
    }
    const GridResult result = grid_search(train_data, val_data, cfg.grid, cfg.training, probe);

    fs::create_directories(args.out_dir);
    write_text(fs::path(args.out_dir) / "grid.csv", grid_csv(result));

    const GridCell& best = result.best();
    if (!best.trained) {
        std::fprintf(stderr, "grid: no cell trained successfully (see grid.csv)\n");
        return 2;
    }
    // Retrain the winning cell (training is deterministic for a fixed seed)
    // and persist it.
    TrainingConfig tc = cfg.training;
    tc.drop_rate = best.drop_rate;
    tc.n_samples = best.n_samples;
    UIvimNet net =
        init_network(train_data.schedule, train_data.ranges, tc.drop_rate, tc.n_samples, tc.seed);
    train(net, train_data, tc);
    const fs::path model_path = fs::path(args.out_dir) / "best_model.uivm";
    save_model(model_path.string(), net);

    std::printf("grid: %zu cells, best drop_rate=%s n_samples=%zu val_rmse=%s -> %s\n",
                result.table.size(), fmt(best.drop_rate).c_str(), best.n_samples,
                fmt(best.val_rmse).c_str(), model_path.string().c_str());
    return 0;
}

// eval ----------------------------------------------------------------------

struct EvalArgs {
    std::string config_path;
    std::string model_path;
    std::string out_prefix = "sweep";
    bool per_snr_training = false;
    std::vector<double> snr;
    std::optional<size_t> voxels;
    std::optional<double> tau;
    bool sample_std = false;
    bool median = false;
    std::optional<uint64_t> seed;
};

int cmd_eval(const EvalArgs& args) {
    RunConfig cfg = load_config(args.config_path);
    if (!args.snr.empty()) cfg.snr_levels = args.snr;
    if (args.voxels) cfg.eval_voxels = *args.voxels;
    if (args.tau) cfg.tau = *args.tau;
    if (args.sample_std) cfg.use_sample_std = true;
    if (args.median) cfg.median_aggregate = true;
    if (args.seed) cfg.seed = *args.seed;
    cfg.validate();

    const UIvimNet net = load_model(args.model_path);
    const ParamRanges ranges = model_ranges(net);
    SweepReport report;
    if (args.per_snr_training) {
        PerSnrTraining training;
        training.config = cfg.training;
        training.config.drop_rate = /* match the loaded architecture */
            net.subnets[0].mask1.config().drop_rate;
        training.config.n_samples = net.n_samples();
        training.n_train_voxels = cfg.n_voxels;
        report = snr_sweep_per_snr(ranges, net.schedule, cfg.snr_levels, cfg.eval_voxels,
                                   cfg.seed, training, cfg.use_sample_std, cfg.median_aggregate);
    } else {
        report = snr_sweep(net, ranges, net.schedule, cfg.snr_levels, cfg.eval_voxels, cfg.seed,
                           cfg.use_sample_std, cfg.median_aggregate);
    }
    const RequirementVerdict verdict = check_requirement(report, cfg.tau);

    write_text(args.out_prefix + ".csv", sweep_csv(report));
    nlohmann::json doc = nlohmann::json::parse(sweep_json(report));
    doc["requirement"] = {
        {"passed", verdict.passed},
        {"tau", verdict.tau},
        {"monotone",
         {{"D", verdict.monotone[0]},
          {"Dstar", verdict.monotone[1]},
          {"f", verdict.monotone[2]},
          {"S0", verdict.monotone[3]}}},
    };
    write_text(args.out_prefix + ".json", doc.dump(2) + "\n");

    static const char* names[4] = {"D", "Dstar", "f", "S0"};
    for (size_t i = 0; i < 4; ++i) {
        std::printf("requirement %-5s %s\n", names[i],
                    verdict.monotone[i] ? "nonincreasing" : "VIOLATED");
    }
    std::printf("requirement gate: %s (tau=%s, mode=%s)\n", verdict.passed ? "PASS" : "FAIL",
                fmt(verdict.tau).c_str(), report.mode.c_str());
    return verdict.passed ? 0 : 1;
}

// quantize ------------------------------------------------------------------

struct QuantizeArgs {
    std::string model_path;
    std::string out_path = "model.uivq";
};

int cmd_quantize(const QuantizeArgs& args) {
    UIvimNet net = load_model(args.model_path);
    if (!net.folded) net = fold_batchnorm(net);
    const PackedWeightStore store = pack_weights(net);
    save_store(args.out_path, store);
    const size_t packed = store.packed_words();
    const size_t dense = store.dense_words();
    std::printf("quantized %s: %zu packed words / %zu dense words = %s of dense size\n",
                args.out_path.c_str(), packed, dense,
                fmt(100.0 * static_cast<double>(packed) / static_cast<double>(dense), "%.1f%%")
                    .c_str());
    return 0;
}

// simulate ------------------------------------------------------------------

struct SimulateArgs {
    std::string config_path;
    std::string store_path;
    std::string data_path;
    std::string out_prefix = "sim";
    std::string schedule = "batch-level";
    std::vector<size_t> pe_sweep;
};

std::string outputs_csv(const FunctionalResult& result) {
    std::string csv = "voxel,sample,D,Dstar,f,S0\n";
    for (size_t v = 0; v < result.n_voxels; ++v) {
        for (size_t s = 0; s < result.n_samples; ++s) {
            const IvimParams& p = result.params[v * result.n_samples + s];
            csv += std::to_string(v) + "," + std::to_string(s) + "," + fmt(p.d, "%.17g") + "," +
                   fmt(p.dstar, "%.17g") + "," + fmt(p.f, "%.17g") + "," + fmt(p.s0, "%.17g") +
                   "\n";
        }
    }
    return csv;
}

int cmd_simulate(const SimulateArgs& args) {
    RunConfig cfg = load_config(args.config_path);
    const Schedule schedule = schedule_from_string(args.schedule);
    const PackedWeightStore store = load_store(args.store_path);
    const Dataset data = load_dataset(args.data_path);
    if (data.schedule.b != store.schedule.b) {
        throw std::invalid_argument("simulate: dataset and weight store use different b-value "
                                    "schedules");
    }
    AcceleratorConfig accel = cfg.accel;
    accel.n_samples = store.n_samples;  // the store fixes N
    accel.validate();

    const size_t n_b = store.n_b();
    std::vector<fx::Word> voxels(data.n_voxels() * n_b);
    for (size_t v = 0; v < data.n_voxels(); ++v) {
        const auto q = fx::quantize_vector(std::span<const float>(data.voxel(v), n_b));
        std::copy(q.begin(), q.end(), voxels.begin() + static_cast<ptrdiff_t>(v * n_b));
    }

    const FunctionalResult result =
        simulate_batch_functional(store, voxels, data.n_voxels(), accel, schedule);
    // The simulator only adds timing; any numeric drift from the quantized
    // reference is a simulator bug and aborts the run.
    for (size_t v = 0; v < data.n_voxels(); ++v) {
        const std::span<const fx::Word> voxel(voxels.data() + v * n_b, n_b);
        for (size_t s = 0; s < store.n_samples; ++s) {
            const IvimParams ref = quantized_forward(store, voxel, s);
            const IvimParams& got = result.params[v * store.n_samples + s];
            if (ref.d != got.d || ref.dstar != got.dstar || ref.f != got.f || ref.s0 != got.s0) {
                throw std::runtime_error("simulate: functional mismatch vs quantized reference "
                                         "at voxel " +
                                         std::to_string(v) + " sample " + std::to_string(s));
            }
        }
    }

    const TimingReport timing = estimate_timing(store, accel, schedule);
    const ResourceReport res = estimate_resources(store, accel);
    write_text(args.out_prefix + "_outputs.csv", outputs_csv(result));
    write_text(args.out_prefix + "_timing.json", timing_json(timing));
    write_text(args.out_prefix + "_resources.json", resources_json(res));
    if (!args.pe_sweep.empty()) {
        write_text(args.out_prefix + "_pe_sweep.csv",
                   pe_sweep_csv(store, accel, schedule, args.pe_sweep));
    }

    std::printf("simulate: %zu voxels x %zu samples verified bit-exact against the quantized "
                "reference\n",
                result.n_voxels, result.n_samples);
    std::printf("schedule=%s cycles=%llu wall=%s ms/batch weight_loads=%llu (batch of %zu)\n",
                schedule_name(schedule), static_cast<unsigned long long>(timing.total_cycles),
                fmt(timing.wall_time_s * 1e3, "%.4f").c_str(),
                static_cast<unsigned long long>(timing.weight_loads), accel.batch_size);
    std::printf("reference FPGA measurement (32 PEs @ 250 MHz, batch 64, N=4, n_b=104): "
                "0.28 ms/batch\n");
    std::printf("resources: dsp=%llu bram_words=%llu%s\n",
                static_cast<unsigned long long>(res.dsp_used),
                static_cast<unsigned long long>(res.bram_words_used),
                res.over_capacity ? " OVER CAPACITY" : "");
    return 0;
}

// report --------------------------------------------------------------------

int cmd_report(const std::string& path) {
    const std::string magic = io::sniff_magic(path);
    if (magic == "IVDS") {
        const Dataset ds = load_dataset(path);
        std::printf("IVDS dataset %s\n", path.c_str());
        std::printf("  voxels=%zu n_b=%zu snr=%s seed=%llu noise=%s\n", ds.n_voxels(),
                    ds.schedule.size(), fmt(ds.noise.snr).c_str(),
                    static_cast<unsigned long long>(ds.noise.seed),
                    ds.noise.enabled ? "on" : "off");
        std::printf("  normalized_by_clean=%s redraws=%llu\n",
                    ds.normalized_by_clean ? "true" : "false",
                    static_cast<unsigned long long>(ds.redraws));
        std::printf("  ranges: D=[%s,%s] Dstar=[%s,%s] f=[%s,%s] S0=[%s,%s]\n",
                    fmt(ds.ranges.d.min).c_str(), fmt(ds.ranges.d.max).c_str(),
                    fmt(ds.ranges.dstar.min).c_str(), fmt(ds.ranges.dstar.max).c_str(),
                    fmt(ds.ranges.f.min).c_str(), fmt(ds.ranges.f.max).c_str(),
                    fmt(ds.ranges.s0.min).c_str(), fmt(ds.ranges.s0.max).c_str());
        return 0;
    }
    if (magic == "UIVM") {
        const UIvimNet net = load_model(path);
        std::printf("UIVM model %s\n", path.c_str());
        std::printf("  n_b=%zu n_samples=%zu folded=%s seed=%llu\n", net.n_b(), net.n_samples(),
                    net.folded ? "true" : "false", static_cast<unsigned long long>(net.seed));
        static const char* names[4] = {"D", "Dstar", "f", "S0"};
        for (size_t k = 0; k < 4; ++k) {
            const SubNetwork& sn = net.subnets[k];
            std::printf("  subnet %-5s range=[%s,%s] drop_rate=%s keep=%zu/%zu\n", names[k],
                        fmt(sn.range.min).c_str(), fmt(sn.range.max).c_str(),
                        fmt(sn.mask1.config().drop_rate).c_str(), sn.mask1.config().keep_count(),
                        sn.mask1.width());
        }
        if (!net.training_meta.empty()) {
            std::printf("  training_meta: %s\n", net.training_meta.c_str());
        }
        return 0;
    }
    if (magic == "UIVQ") {
        const PackedWeightStore store = load_store(path);
        std::printf("UIVQ weight store %s\n", path.c_str());
        std::printf("  n_b=%zu n_samples=%zu model_seed=%llu format=Q3.12\n", store.n_b(),
                    store.n_samples, static_cast<unsigned long long>(store.model_seed));
        std::printf("  packed_words=%zu dense_words=%zu (%s of dense)\n", store.packed_words(),
                    store.dense_words(),
                    fmt(100.0 * static_cast<double>(store.packed_words()) /
                            static_cast<double>(store.dense_words()),
                        "%.1f%%")
                        .c_str());
        static const char* names[4] = {"D", "Dstar", "f", "S0"};
        for (size_t k = 0; k < 4; ++k) {
            const PackedSubnet& sn = store.subnets[k];
            std::printf("  subnet %-5s kept:", names[k]);
            for (const PackedSample& s : sn.samples) {
                std::printf(" %zu/%zu", s.kept1.size(), s.kept2.size());
            }
            std::printf("\n");
        }
        return 0;
    }
    throw std::runtime_error("unrecognized container magic '" + magic + "' in " + path);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "uivim: synthetic IVIM data, mask-ensemble Bayesian fitting, uncertainty "
        "evaluation, fixed-point packing, and accelerator simulation"};
    app.require_subcommand(1);

    GenDataArgs gen;
    CLI::App* c_gen = app.add_subcommand("gen-data", "Generate one dataset per SNR level");
    c_gen->add_option("--config", gen.config_path, "Run configuration JSON");
    c_gen->add_option("--out", gen.out_dir, "Output directory");
    c_gen->add_option("--seed", gen.seed, "Global seed override");
    c_gen->add_option("--voxels", gen.voxels, "Voxels per dataset");
    c_gen->add_option("--snr", gen.snr, "SNR levels (replaces config list)");
    c_gen->add_option("--threads", gen.threads, "Generation threads");
    c_gen->add_flag("--normalize-by-clean", gen.normalize_by_clean,
                    "Normalize by the noiseless S(b=0)");

    TrainArgs tr;
    CLI::App* c_train = app.add_subcommand("train", "Train a model on one dataset");
    c_train->add_option("--config", tr.config_path, "Run configuration JSON");
    c_train->add_option("--data", tr.data_path, "Training dataset (.ivds)")->required();
    c_train->add_option("--out", tr.out_path, "Output model (.uivm)");
    c_train->add_option("--lr", tr.lr, "Learning rate");
    c_train->add_option("--batch-size", tr.batch_size, "Batch size");
    c_train->add_option("--epochs", tr.epochs, "Max epochs");
    c_train->add_option("--patience", tr.patience, "Early-stopping patience");
    c_train->add_option("--drop-rate", tr.drop_rate, "Mask drop rate");
    c_train->add_option("--samples", tr.samples, "Mask samples N");
    c_train->add_option("--val-fraction", tr.val_fraction, "Validation fraction");
    c_train->add_option("--seed", tr.seed, "Training seed override");

    GridArgs gr;
    CLI::App* c_grid = app.add_subcommand("grid", "Grid-search (drop_rate, N)");
    c_grid->add_option("--config", gr.config_path, "Run configuration JSON");
    c_grid->add_option("--train-data", gr.train_path, "Training dataset (.ivds)")->required();
    c_grid->add_option("--val-data", gr.val_path, "Validation dataset (.ivds)")->required();
    c_grid->add_option("--out", gr.out_dir, "Output directory");
    c_grid->add_flag("--no-probe", gr.no_probe, "Skip the per-cell requirement probe");

    EvalArgs ev;
    CLI::App* c_eval = app.add_subcommand("eval", "SNR sweep + uncertainty requirement gate");
    c_eval->add_option("--config", ev.config_path, "Run configuration JSON");
    c_eval->add_option("--model", ev.model_path, "Model (.uivm)")->required();
    c_eval->add_option("--out", ev.out_prefix, "Output prefix (<prefix>.csv/.json)");
    c_eval->add_flag("--per-snr-training", ev.per_snr_training,
                     "Train a fresh net per SNR level instead of reusing the model");
    c_eval->add_option("--snr", ev.snr, "SNR levels (replaces config list)");
    c_eval->add_option("--voxels", ev.voxels, "Evaluation voxels per level");
    c_eval->add_option("--tau", ev.tau, "Monotonicity slack");
    c_eval->add_flag("--sample-std", ev.sample_std, "N-1 divisor for uncertainty");
    c_eval->add_flag("--median", ev.median, "Median aggregation over voxels");
    c_eval->add_option("--seed", ev.seed, "Evaluation seed override");

    QuantizeArgs qz;
    CLI::App* c_quant = app.add_subcommand("quantize", "Fold, quantize, and pack a model");
    c_quant->add_option("--model", qz.model_path, "Model (.uivm)")->required();
    c_quant->add_option("--out", qz.out_path, "Output weight store (.uivq)");

    SimulateArgs sim;
    CLI::App* c_sim = app.add_subcommand("simulate", "Simulate the accelerator on a dataset");
    c_sim->add_option("--config", sim.config_path, "Run configuration JSON");
    c_sim->add_option("--store", sim.store_path, "Weight store (.uivq)")->required();
    c_sim->add_option("--data", sim.data_path, "Input dataset (.ivds)")->required();
    c_sim->add_option("--out", sim.out_prefix, "Output prefix");
    c_sim->add_option("--schedule", sim.schedule, "batch-level or sampling-level");
    c_sim->add_option("--pe-sweep", sim.pe_sweep, "PE counts for a sweep CSV")->delimiter(',');

    std::string report_path;
    CLI::App* c_report = app.add_subcommand("report", "Describe an IVDS/UIVM/UIVQ file");
    c_report->add_option("file", report_path, "Container file")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (c_gen->parsed()) return cmd_gen_data(gen);
        if (c_train->parsed()) return cmd_train(tr);
        if (c_grid->parsed()) return cmd_grid(gr);
        if (c_eval->parsed()) return cmd_eval(ev);
        if (c_quant->parsed()) return cmd_quantize(qz);
        if (c_sim->parsed()) return cmd_simulate(sim);
        if (c_report->parsed()) return cmd_report(report_path);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
