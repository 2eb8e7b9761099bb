// Single declarative configuration consumed by every CLI subcommand. All
// fields are optional in the file and default to the reference setup; unknown
// keys are rejected and every diagnostic carries the offending field path.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "uivim/accel.hpp"
#include "uivim/ivim.hpp"
#include "uivim/network.hpp"

namespace uivim {

struct RunConfig {
    RunConfig() { training.seed = seed; }

    uint64_t seed = 42;
    ParamRanges ranges;
    BValueSchedule schedule = BValueSchedule::defaults();
    std::vector<double> snr_levels = {5, 15, 20, 30, 50};
    size_t n_voxels = 10000;    // generated voxels per SNR level
    size_t eval_voxels = 2000;  // sweep voxels per SNR level
    bool normalize_by_clean = false;
    unsigned n_threads = 1;
    TrainingConfig training;
    GridSpec grid;
    // Evaluation knobs.
    double tau = 0.05;
    bool use_sample_std = false;
    bool median_aggregate = false;
    size_t probe_voxels = 500;  // per-cell requirement probe in grid search
    AcceleratorConfig accel;

    // Cross-module consistency (schedule width vs accelerator capacity, per
    // module validators).
    void validate() const;

    static RunConfig from_json_file(const std::string& path);
    static RunConfig from_json_text(const std::string& text, const std::string& origin);

    // Canonical JSON dump of the effective configuration.
    std::string to_json() const;
};

}  // namespace uivim
