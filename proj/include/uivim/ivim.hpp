// Bi-exponential IVIM signal model, analytic parameter gradients, and
// SNR-controlled synthetic dataset generation.

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace uivim {

// One voxel's physical parameters. Used both as ground truth and prediction.
struct IvimParams {
    double d = 0.0;      // diffusion coefficient, mm^2/s
    double dstar = 0.0;  // pseudo-diffusion coefficient, mm^2/s
    double f = 0.0;      // perfusion fraction, dimensionless
    double s0 = 1.0;     // signal at b=0, normalized

    std::array<double, 4> as_array() const { return {d, dstar, f, s0}; }
};

struct Interval {
    double min = 0.0;
    double max = 1.0;
};

// Sampling intervals for synthetic parameter draws. Dstar.min must exceed
// D.max so the two exponentials stay identifiable.
struct ParamRanges {
    Interval d{0.0005, 0.005};
    Interval dstar{0.01, 0.1};
    Interval f{0.0, 0.7};
    Interval s0{0.8, 1.2};

    void validate() const;
    bool contains(const IvimParams& p) const;
    const Interval& by_index(size_t i) const;  // order: D, Dstar, f, S0
};

// Ordered b-value schedule; must contain b=0 (the normalization anchor).
struct BValueSchedule {
    std::vector<double> b;

    size_t size() const { return b.size(); }
    void validate() const;
    size_t b0_index() const;  // first index with b == 0

    static BValueSchedule defaults();    // 11 values, 0..1000 s/mm^2
    static BValueSchedule profile104();  // synthetic 104-value capacity profile
};

struct NoiseSpec {
    double snr = 15.0;
    uint64_t seed = 0;
    bool enabled = true;  // disabled models the snr -> infinity limit
};

// Synthetic dataset: normalized signals plus the generating ground truth.
// Signals are stored as float32 to match the on-disk container.
struct Dataset {
    BValueSchedule schedule;
    std::vector<float> signals;  // row-major, n_voxels x n_b
    std::vector<IvimParams> truth;
    NoiseSpec noise;
    ParamRanges ranges;
    bool normalized_by_clean = false;  // default divides by the noisy S(b=0)
    uint64_t redraws = 0;              // voxels re-noised because S(b=0) <= 0

    size_t n_voxels() const { return truth.size(); }
    size_t n_b() const { return schedule.size(); }
    const float* voxel(size_t i) const { return signals.data() + i * n_b(); }
};

// S(b) = S0 * (f*exp(-b*Dstar) + (1-f)*exp(-b*D)). Throws on non-finite or
// negative b.
double forward_signal(const IvimParams& p, double b);

// Partials of forward_signal in order (dS/dD, dS/dDstar, dS/df, dS/dS0).
std::array<double, 4> signal_gradient(const IvimParams& p, double b);

// Draws parameters uniformly from `ranges`, evaluates the clean decay over
// `schedule`, injects i.i.d. Gaussian noise with std S0/snr per b-value, and
// stores signals normalized by the measured (noisy) S(b=0). Voxels whose
// measured S(b=0) comes out non-positive are re-noised; the count is recorded.
// Bit-reproducible for a fixed seed and independent of n_threads.
Dataset generate_dataset(const ParamRanges& ranges, const BValueSchedule& schedule,
                         size_t n_voxels, const NoiseSpec& noise,
                         bool normalize_by_clean = false, unsigned n_threads = 1);

// IVDS v1 container (JSON header + float32 blocks, see docs/formats.md).
void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

}  // namespace uivim
