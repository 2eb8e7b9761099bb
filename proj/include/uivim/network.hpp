// uIVIM-NET: four identical sub-networks (one per IVIM parameter), each a
// linear/batch-norm/ReLU/mask stack with a one-neuron encoder head, a sigmoid
// and a range conversion. Trained self-supervised against the signal model:
// predicted parameters rebuild the decay curve and the loss is the MSE
// between rebuilt and measured signals. All arithmetic is 64-bit; inference
// is fully deterministic (fixed masks, no runtime sampling).

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "uivim/ivim.hpp"
#include "uivim/masks.hpp"

namespace uivim {

struct Linear {
    size_t out = 0, in = 0;
    std::vector<double> w;  // row-major out x in
    std::vector<double> b;  // out
};

struct BatchNorm {
    std::vector<double> gamma, beta, running_mean, running_var;
    double eps = 1e-5;
};

// One parameter head. Width of every linear layer equals the b-value count.
struct SubNetwork {
    Linear l1;
    BatchNorm bn1;
    MaskSet mask1;
    Linear l2;
    BatchNorm bn2;
    MaskSet mask2;
    Linear encoder;  // n_b -> 1
    Interval range;  // conversion interval for this head's parameter
};

// Sub-network order is fixed as (D, Dstar, f, S0) everywhere, including the
// serialized model file.
struct UIvimNet {
    BValueSchedule schedule;
    std::array<SubNetwork, 4> subnets;
    bool folded = false;  // batch-norm folded into the linear layers
    uint64_t seed = 0;
    std::string training_meta;  // JSON blob recorded by train()

    size_t n_b() const { return schedule.size(); }
    size_t n_samples() const { return subnets[0].mask1.n_samples(); }
    void validate() const;
};

struct TrainingConfig {
    double learning_rate = 1e-3;
    size_t batch_size = 128;
    size_t max_epochs = 200;
    size_t patience = 10;  // early stop on validation loss
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    double drop_rate = 0.5;
    size_t n_samples = 4;
    double val_fraction = 0.1;
    uint64_t seed = 0;

    void validate() const;
};

struct PredictionWithUncertainty {
    IvimParams mean;
    IvimParams std;                  // population std (divisor N) by default
    std::vector<IvimParams> samples;  // raw per-sample predictions
};

enum class BnMode { training, inference };

// Range-mapping head: min + sigmoid(x) * (max - min), clamped to the open
// interval so outputs never land on a range endpoint.
double convert(double x, const Interval& range);

// Fresh net with seeded fan-in-uniform weights, identity batch norm and
// per-layer masks (two independent sets per sub-network, all sharing N).
UIvimNet init_network(const BValueSchedule& schedule, const ParamRanges& ranges,
                      double drop_rate, size_t n_samples, uint64_t seed);

// Single-voxel inference pass for one mask sample.
IvimParams net_forward(const UIvimNet& net, std::span<const double> voxel, size_t sample);

// Pre-sigmoid encoder outputs in sub-network order; the reference the
// quantized datapath is compared against.
std::array<double, 4> head_logits(const UIvimNet& net, std::span<const double> voxel,
                                  size_t sample);

// MSE between measured signals and the decay curves rebuilt from the
// predicted parameters, averaged over all voxels and b-values. Rows use the
// mask sample given by `samples` (one entry per row).
double reconstruction_loss(const UIvimNet& net, std::span<const double> voxels, size_t n_rows,
                           std::span<const size_t> samples, BnMode mode = BnMode::inference);

struct TrainResult {
    std::vector<double> train_loss;  // per epoch
    std::vector<double> val_loss;
    size_t best_epoch = 0;
    size_t epochs_run = 0;
};

// Adam on the reconstruction loss. Mask sample for row i of a mini-batch is
// i mod N so every mask trains each step. Deterministic per config seed;
// aborts with a diagnostic if the loss goes non-finite.
TrainResult train(UIvimNet& net, const Dataset& data, const TrainingConfig& cfg);

// Central finite differences against the analytic gradient of the
// reconstruction loss over every weight, bias and batch-norm parameter.
// Errors are relative to the largest gradient magnitude. Batch-norm runs with
// frozen statistics unless mode says otherwise.
double gradient_check(const UIvimNet& net, std::span<const double> voxels, size_t n_rows,
                      std::span<const size_t> samples, double h = 1e-4,
                      BnMode mode = BnMode::inference);

PredictionWithUncertainty predict_with_uncertainty(const UIvimNet& net,
                                                   std::span<const double> voxel,
                                                   bool use_sample_std = false);

// Folds each batch norm's affine transform into the preceding linear layer;
// the folded net computes plain linear + ReLU, as the accelerator does.
UIvimNet fold_batchnorm(const UIvimNet& net);

struct GridSpec {
    std::vector<double> drop_rates = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
    std::vector<size_t> n_samples = {4, 8, 16, 32, 64};

    size_t cells() const { return drop_rates.size() * n_samples.size(); }
    void validate() const;
};

// Optional per-cell uncertainty probe for grid scoring (a small SNR sweep).
struct RequirementProbe {
    std::vector<double> snr_levels = {5, 15, 20, 30, 50};
    size_t n_voxels = 500;
    double tau = 0.05;
    uint64_t seed = 0;
};

struct GridCell {
    double drop_rate = 0.0;
    size_t n_samples = 0;
    bool trained = false;
    double val_rmse = 0.0;  // reconstruction RMSE on the validation set
    bool requirement_passed = true;
    std::string error;
};

struct GridResult {
    std::vector<GridCell> table;
    size_t best_index = 0;

    const GridCell& best() const { return table[best_index]; }
};

// Trains one net per (drop_rate, N) cell and scores on the validation set.
// Ranking: reconstruction RMSE first, requirement pass/fail second, then
// smaller N, then smaller drop_rate. Per-cell failures are recorded, not
// propagated.
GridResult grid_search(const Dataset& train_data, const Dataset& val_data, const GridSpec& grid,
                       const TrainingConfig& base,
                       const std::optional<RequirementProbe>& probe = std::nullopt);

// Reconstruction RMSE of mean predictions against a dataset's measured
// signals; the grid-search score.
double reconstruction_rmse(const UIvimNet& net, const Dataset& data);

// UIVM v1 model container (JSON header + float64 blocks + packed masks).
void save_model(const std::string& path, const UIvimNet& net);
UIvimNet load_model(const std::string& path);

}  // namespace uivim
