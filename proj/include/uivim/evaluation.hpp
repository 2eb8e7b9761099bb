// Evaluation protocol: per-parameter RMSE and reconstruction RMSE against
// ground truth, mean relative uncertainty (std/mean) per SNR level, and the
// phase-gate check that uncertainty shrinks as SNR rises.

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "uivim/ivim.hpp"
#include "uivim/network.hpp"

namespace uivim {

struct SweepRow {
    double snr = 0.0;
    size_t n_voxels = 0;
    std::array<double, 4> rmse{};             // per parameter (D, Dstar, f, S0)
    double recon_rmse = 0.0;                  // vs noiseless reference signals
    std::array<double, 4> rel_uncertainty{};  // aggregated std/mean per parameter
    std::array<size_t, 4> rel_excluded{};     // voxels dropped by the |mean| guard
};

struct SweepReport {
    std::vector<SweepRow> rows;  // sorted by snr ascending
    std::string mode;            // "single-net" or "per-snr-training"
    uint64_t seed = 0;
    std::string config_hash;     // hex digest of the evaluation inputs
};

// Per-parameter sqrt(mean squared error); lengths must match.
std::array<double, 4> rmse(std::span<const IvimParams> predictions,
                           std::span<const IvimParams> truth);

struct RelativeUncertainty {
    std::array<double, 4> value{};
    // |mean| < 1e-12: the ratio is meaningless; flagged entries are excluded
    // from sweep aggregates.
    std::array<bool, 4> flagged{};
};

RelativeUncertainty relative_uncertainty(const PredictionWithUncertainty& pred);

// Sub-seed for one SNR level's dataset: a pure function of (seed, level
// value), used by the data-generation command to emit distinct datasets.
uint64_t snr_level_seed(uint64_t seed, double snr);

// Seed shared by every level of one sweep: the same truth draws and unit
// noise at each SNR, with only sigma = S0/snr scaled. Common random numbers
// isolate the noise-level effect the monotonicity requirement is about, and
// keep the evaluation voxels disjoint from any snr_level_seed training set.
uint64_t sweep_eval_seed(uint64_t seed);

// Evaluates one dataset per SNR level, all generated from sweep_eval_seed
// (duplicate levels give identical rows), runs predict_with_uncertainty on
// every voxel, and aggregates. Aggregation over voxels is the arithmetic
// mean by default, the median with the flag.
SweepReport snr_sweep(const UIvimNet& net, const ParamRanges& ranges,
                      const BValueSchedule& schedule, std::vector<double> snr_levels,
                      size_t n_voxels, uint64_t seed, bool use_sample_std = false,
                      bool median_aggregate = false);

// Per-SNR-training variant: trains a fresh net on each level's own data
// before evaluating it. Both modes exist because the evaluation protocol can
// be read either way; the report records which one ran.
struct PerSnrTraining {
    TrainingConfig config;
    size_t n_train_voxels = 10000;
};

SweepReport snr_sweep_per_snr(const ParamRanges& ranges, const BValueSchedule& schedule,
                              std::vector<double> snr_levels, size_t n_voxels, uint64_t seed,
                              const PerSnrTraining& training, bool use_sample_std = false,
                              bool median_aggregate = false);

struct RequirementVerdict {
    bool passed = false;
    std::array<bool, 4> monotone{};  // per-parameter verdicts
    double tau = 0.05;
};

// Passes iff mean relative uncertainty is nonincreasing as SNR increases for
// every parameter, allowing a relative slack tau between adjacent levels:
// u[i+1] <= u[i] * (1 + tau). Needs at least two levels.
RequirementVerdict check_requirement(const SweepReport& report, double tau = 0.05);

// Stable CSV, one row per SNR x parameter:
// snr,parameter,rmse,rel_uncertainty,excluded_voxels,recon_rmse,n_voxels
std::string sweep_csv(const SweepReport& report);

// Full report (rows + metadata) as a deterministic JSON document.
std::string sweep_json(const SweepReport& report);

std::string grid_csv(const GridResult& result);

}  // namespace uivim
