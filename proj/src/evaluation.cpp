#include "uivim/evaluation.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

#include <json.hpp>

#include "uivim/rng.hpp"

namespace uivim {

namespace {

constexpr const char* kParamNames[4] = {"D", "Dstar", "f", "S0"};

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

double aggregate(std::vector<double>& values, bool median) {
    if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
    if (!median) {
        double sum = 0.0;
        for (double v : values) sum += v;
        return sum / static_cast<double>(values.size());
    }
    std::sort(values.begin(), values.end());
    const size_t n = values.size();
    return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

SweepRow evaluate_level(const UIvimNet& net, const Dataset& ds, double snr, bool use_sample_std,
                        bool median_aggregate) {
    const size_t n = ds.n_voxels();
    const size_t nb = ds.n_b();
    SweepRow row;
    row.snr = snr;
    row.n_voxels = n;

    std::vector<IvimParams> means;
    means.reserve(n);
    std::array<std::vector<double>, 4> rel;
    for (auto& v : rel) v.reserve(n);
    std::vector<double> voxel(nb);

    for (size_t i = 0; i < n; ++i) {
        const float* src = ds.voxel(i);
        for (size_t j = 0; j < nb; ++j) voxel[j] = static_cast<double>(src[j]);
        const auto pred = predict_with_uncertainty(net, voxel, use_sample_std);
        means.push_back(pred.mean);
        const auto ru = relative_uncertainty(pred);
        for (size_t k = 0; k < 4; ++k) {
            if (ru.flagged[k]) {
                ++row.rel_excluded[k];
            } else {
                rel[k].push_back(ru.value[k]);
            }
        }
    }

    row.rmse = rmse(means, ds.truth);
    for (size_t k = 0; k < 4; ++k) row.rel_uncertainty[k] = aggregate(rel[k], median_aggregate);

    double se = 0.0;
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j < nb; ++j) {
            const double d = forward_signal(means[i], ds.schedule.b[j]) -
                             forward_signal(ds.truth[i], ds.schedule.b[j]);
            se += d * d;
        }
    }
    row.recon_rmse = std::sqrt(se / (static_cast<double>(n) * static_cast<double>(nb)));
    return row;
}

std::string hash_inputs(const std::string& mode, const ParamRanges& ranges,
                        const BValueSchedule& schedule, const std::vector<double>& levels,
                        size_t n_voxels, uint64_t seed, uint64_t net_seed, bool use_sample_std,
                        bool median_aggregate) {
    std::string s = mode;
    for (const auto* iv : {&ranges.d, &ranges.dstar, &ranges.f, &ranges.s0}) {
        s += "|" + fmt_double(iv->min) + "," + fmt_double(iv->max);
    }
    for (double b : schedule.b) s += "|" + fmt_double(b);
    for (double l : levels) s += "|" + fmt_double(l);
    s += "|" + std::to_string(n_voxels) + "|" + std::to_string(seed) + "|" +
         std::to_string(net_seed) + "|" + std::to_string(use_sample_std ? 1 : 0) + "|" +
         std::to_string(median_aggregate ? 1 : 0);
    return hex64(fnv1a(s));
}

void check_levels(const std::vector<double>& levels) {
    if (levels.empty()) throw std::invalid_argument("sweep: snr_levels must be nonempty");
    for (double l : levels) {
        if (!(l > 0.0) || !std::isfinite(l)) {
            throw std::invalid_argument("sweep: snr levels must be finite and positive");
        }
    }
}

bool cell_better(const GridCell& a, const GridCell& b) {
    if (a.trained != b.trained) return a.trained;
    if (a.val_rmse < b.val_rmse) return true;
    if (b.val_rmse < a.val_rmse) return false;
    if (a.requirement_passed != b.requirement_passed) return a.requirement_passed;
    if (a.n_samples != b.n_samples) return a.n_samples < b.n_samples;
    return a.drop_rate < b.drop_rate;
}

}  // namespace

uint64_t snr_level_seed(uint64_t seed, double snr) {
    return rng::derive_seed(seed, rng::Tag::snr_level, rng::mix64(std::bit_cast<uint64_t>(snr)));
}

uint64_t sweep_eval_seed(uint64_t seed) {
    return rng::derive_seed(seed, rng::Tag::snr_level, 0);
}

std::array<double, 4> rmse(std::span<const IvimParams> predictions,
                           std::span<const IvimParams> truth) {
    if (predictions.size() != truth.size()) {
        throw std::invalid_argument("rmse: prediction and truth counts differ");
    }
    if (predictions.empty()) throw std::invalid_argument("rmse: empty input");
    std::array<double, 4> se{};
    for (size_t i = 0; i < predictions.size(); ++i) {
        const auto p = predictions[i].as_array();
        const auto t = truth[i].as_array();
        for (size_t k = 0; k < 4; ++k) {
            const double d = p[k] - t[k];
            se[k] += d * d;
        }
    }
    for (auto& v : se) v = std::sqrt(v / static_cast<double>(predictions.size()));
    return se;
}

RelativeUncertainty relative_uncertainty(const PredictionWithUncertainty& pred) {
    RelativeUncertainty out;
    const auto mean = pred.mean.as_array();
    const auto std_ = pred.std.as_array();
    for (size_t k = 0; k < 4; ++k) {
        if (std::fabs(mean[k]) < 1e-12) {
            out.flagged[k] = true;
            out.value[k] = std::numeric_limits<double>::quiet_NaN();
        } else {
            out.value[k] = std_[k] / mean[k];
        }
    }
    return out;
}

SweepReport snr_sweep(const UIvimNet& net, const ParamRanges& ranges,
                      const BValueSchedule& schedule, std::vector<double> snr_levels,
                      size_t n_voxels, uint64_t seed, bool use_sample_std,
                      bool median_aggregate) {
    check_levels(snr_levels);
    if (n_voxels == 0) throw std::invalid_argument("sweep: n_voxels must be positive");
    if (net.schedule.b != schedule.b) {
        throw std::invalid_argument("sweep: schedule does not match the net");
    }
    std::sort(snr_levels.begin(), snr_levels.end());

    SweepReport report;
    report.mode = "single-net";
    report.seed = seed;
    report.config_hash = hash_inputs(report.mode, ranges, schedule, snr_levels, n_voxels, seed,
                                     net.seed, use_sample_std, median_aggregate);
    for (double snr : snr_levels) {
        const NoiseSpec noise{snr, sweep_eval_seed(seed), true};
        const Dataset ds = generate_dataset(ranges, schedule, n_voxels, noise);
        report.rows.push_back(evaluate_level(net, ds, snr, use_sample_std, median_aggregate));
    }
    return report;
}

SweepReport snr_sweep_per_snr(const ParamRanges& ranges, const BValueSchedule& schedule,
                              std::vector<double> snr_levels, size_t n_voxels, uint64_t seed,
                              const PerSnrTraining& training, bool use_sample_std,
                              bool median_aggregate) {
    check_levels(snr_levels);
    if (n_voxels == 0) throw std::invalid_argument("sweep: n_voxels must be positive");
    training.config.validate();
    if (training.n_train_voxels == 0) {
        throw std::invalid_argument("sweep: n_train_voxels must be positive");
    }
    std::sort(snr_levels.begin(), snr_levels.end());

    SweepReport report;
    report.mode = "per-snr-training";
    report.seed = seed;
    report.config_hash = hash_inputs(report.mode, ranges, schedule, snr_levels, n_voxels, seed,
                                     training.config.seed, use_sample_std, median_aggregate);
    for (double snr : snr_levels) {
        // Training data stays level-specific; the evaluation set is the
        // common one so rows differ only through noise level and training.
        const uint64_t sub = snr_level_seed(seed, snr);
        const NoiseSpec train_noise{snr, rng::derive_seed(sub, rng::Tag::split, 1), true};
        const Dataset train_ds =
            generate_dataset(ranges, schedule, training.n_train_voxels, train_noise);
        TrainingConfig cfg = training.config;
        cfg.seed = rng::derive_seed(sub, rng::Tag::split, 2);
        UIvimNet net = init_network(schedule, ranges, cfg.drop_rate, cfg.n_samples, cfg.seed);
        train(net, train_ds, cfg);

        const NoiseSpec eval_noise{snr, sweep_eval_seed(seed), true};
        const Dataset eval_ds = generate_dataset(ranges, schedule, n_voxels, eval_noise);
        report.rows.push_back(evaluate_level(net, eval_ds, snr, use_sample_std, median_aggregate));
    }
    return report;
}

RequirementVerdict check_requirement(const SweepReport& report, double tau) {
    if (report.rows.size() < 2) {
        throw std::invalid_argument("check_requirement: at least two SNR levels required");
    }
    if (!(tau >= 0.0) || !std::isfinite(tau)) {
        throw std::invalid_argument("check_requirement: tau must be finite and >= 0");
    }
    RequirementVerdict verdict;
    verdict.tau = tau;
    verdict.passed = true;
    for (size_t k = 0; k < 4; ++k) {
        bool ok = true;
        for (size_t i = 0; i + 1 < report.rows.size(); ++i) {
            const double lo = report.rows[i].rel_uncertainty[k];
            const double hi = report.rows[i + 1].rel_uncertainty[k];
            if (!std::isfinite(lo) || !std::isfinite(hi) || hi > lo * (1.0 + tau)) {
                ok = false;
                break;
            }
        }
        verdict.monotone[k] = ok;
        verdict.passed = verdict.passed && ok;
    }
    return verdict;
}

std::string sweep_csv(const SweepReport& report) {
    std::string out = "snr,parameter,rmse,rel_uncertainty,excluded_voxels,recon_rmse,n_voxels\n";
    for (const auto& row : report.rows) {
        for (size_t k = 0; k < 4; ++k) {
            out += fmt_double(row.snr);
            out += ',';
            out += kParamNames[k];
            out += ',';
            out += fmt_double(row.rmse[k]);
            out += ',';
            out += fmt_double(row.rel_uncertainty[k]);
            out += ',';
            out += std::to_string(row.rel_excluded[k]);
            out += ',';
            out += fmt_double(row.recon_rmse);
            out += ',';
            out += std::to_string(row.n_voxels);
            out += '\n';
        }
    }
    return out;
}

std::string sweep_json(const SweepReport& report) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : report.rows) {
        nlohmann::json r{{"snr", row.snr},
                         {"n_voxels", row.n_voxels},
                         {"recon_rmse", row.recon_rmse}};
        for (size_t k = 0; k < 4; ++k) {
            r["rmse"][kParamNames[k]] = row.rmse[k];
            // NaN is not representable in JSON; emit null for fully excluded.
            if (std::isfinite(row.rel_uncertainty[k])) {
                r["rel_uncertainty"][kParamNames[k]] = row.rel_uncertainty[k];
            } else {
                r["rel_uncertainty"][kParamNames[k]] = nullptr;
            }
            r["rel_excluded"][kParamNames[k]] = row.rel_excluded[k];
        }
        rows.push_back(r);
    }
    const nlohmann::json j{{"mode", report.mode},
                           {"seed", report.seed},
                           {"config_hash", report.config_hash},
                           {"rows", rows}};
    return j.dump(2) + "\n";
}

std::string grid_csv(const GridResult& result) {
    std::string out = "drop_rate,n_samples,trained,val_rmse,requirement_passed,selected,error\n";
    for (size_t i = 0; i < result.table.size(); ++i) {
        const GridCell& c = result.table[i];
        out += fmt_double(c.drop_rate);
        out += ',';
        out += std::to_string(c.n_samples);
        out += ',';
        out += c.trained ? "1" : "0";
        out += ',';
        out += fmt_double(c.val_rmse);
        out += ',';
        out += c.requirement_passed ? "1" : "0";
        out += ',';
        out += i == result.best_index ? "1" : "0";
        out += ',';
        std::string err = c.error;
        for (auto& ch : err) {
            if (ch == ',' || ch == '\n') ch = ';';
        }
        out += err;
        out += '\n';
    }
    return out;
}

GridResult grid_search(const Dataset& train_data, const Dataset& val_data, const GridSpec& grid,
                       const TrainingConfig& base, const std::optional<RequirementProbe>& probe) {
    grid.validate();
    base.validate();
    if (train_data.schedule.b != val_data.schedule.b) {
        throw std::invalid_argument("grid: train and validation schedules differ");
    }
    if (train_data.n_voxels() == 0 || val_data.n_voxels() == 0) {
        throw std::invalid_argument("grid: empty dataset");
    }

    GridResult result;
    result.table.reserve(grid.cells());
    for (double p : grid.drop_rates) {
        for (size_t n : grid.n_samples) {
            GridCell cell;
            cell.drop_rate = p;
            cell.n_samples = n;
            // Every cell shares the base seed so the comparison isolates
            // (drop_rate, N).
            TrainingConfig cfg = base;
            cfg.drop_rate = p;
            cfg.n_samples = n;
            try {
                UIvimNet net =
                    init_network(train_data.schedule, train_data.ranges, p, n, cfg.seed);
                train(net, train_data, cfg);
                cell.val_rmse = reconstruction_rmse(net, val_data);
                cell.trained = true;
                if (probe.has_value()) {
                    const SweepReport rep =
                        snr_sweep(net, val_data.ranges, val_data.schedule, probe->snr_levels,
                                  probe->n_voxels, probe->seed);
                    cell.requirement_passed = check_requirement(rep, probe->tau).passed;
                }
            } catch (const std::exception& e) {
                cell.trained = false;
                cell.val_rmse = std::numeric_limits<double>::infinity();
                cell.requirement_passed = false;
                cell.error = e.what();
            }
            result.table.push_back(std::move(cell));
        }
    }

    result.best_index = 0;
    for (size_t i = 1; i < result.table.size(); ++i) {
        if (cell_better(result.table[i], result.table[result.best_index])) {
            result.best_index = i;
        }
    }
    return result;
}

}  // namespace uivim
