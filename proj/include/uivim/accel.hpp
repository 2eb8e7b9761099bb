// Functional and timing model of the fixed-point accelerator: an array of
// n_pe processing elements, each a PU of mult_per_pu parallel multipliers
// feeding a pipelined adder tree. Layers run serially; output neurons are
// assigned to PEs in groups; sub-networks and mask samples run serially.
// The functional path must be bit-identical to quantized_forward: the
// simulator adds timing, never numerics.

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "uivim/ivim.hpp"
#include "uivim/packed_store.hpp"

namespace uivim {

struct AcceleratorConfig {
    size_t n_pe = 32;         // processing elements (output-neuron parallelism)
    size_t mult_per_pu = 32;  // parallel multipliers per PU; power of two
    size_t r_m = 3;           // multiplier pipeline registers
    size_t r_a = 2;           // adder pipeline registers
    double clock_hz = 250e6;
    size_t batch_size = 64;       // voxels per processed batch
    size_t n_samples = 4;         // mask samples N
    size_t max_voxel_width = 128;  // elements per voxel the PU datapath supports
    size_t onchip_voxels = 20000;  // I/O manager voxel capacity
    size_t loader_width = 64;      // packed words transferred per load cycle
    size_t bram_words = 4000000;   // configured on-chip capacity, 16-bit words
    size_t dsp_per_pe = 32;        // DSP blocks per PE (typically mult_per_pu)
    size_t io_fixed = 2;           // constant external-interface estimate

    size_t adder_depth() const;  // L = log2(mult_per_pu)
    // Cycles from issue to retirement: R_M + R_A * (L + 1); the +1 stage is
    // the bias add.
    size_t pipe_depth() const;
    void validate() const;
};

// Controller orderings. Results are identical; weight traffic is not:
// batch-level loads weights N times per batch, sampling-level N*batch_size.
enum class Schedule { batch_level, sampling_level };

const char* schedule_name(Schedule s);
Schedule schedule_from_string(const std::string& name);

// Closed-form PU latency for one n_b-wide dot product:
// R_M + R_A * (L + 1) + ceil(n_b / mult_per_pu) - 1.
uint64_t pu_latency(const AcceleratorConfig& config, size_t n_b);

struct TimingReport {
    Schedule schedule = Schedule::batch_level;
    size_t n_b = 0, batch_size = 0, n_samples = 0, n_pe = 0;
    uint64_t pipe_depth = 0;
    uint64_t total_passes = 0;               // serial layer executions
    std::array<uint64_t, 3> layer_cycles{};  // steady-state issue cycles: l1, l2, encoder
    uint64_t fill_cycles = 0;                // pipeline fill/drain over all passes
    uint64_t load_cycles = 0;                // weight-load stalls
    uint64_t total_cycles = 0;               // layer + fill + load, exactly
    double wall_time_s = 0.0;
    uint64_t weight_loads = 0;
    // Independent event-driven walk of the same machine.
    uint64_t event_cycles = 0;
    double analytic_vs_event = 0.0;  // |total_cycles - event_cycles| / event_cycles
};

struct ResourceReport {
    uint64_t dsp_used = 0;
    uint64_t voxel_words = 0;   // I/O manager voxel storage
    uint64_t weight_words = 0;  // packed store, N copies
    uint64_t cache_words = 0;   // intermediate-layer cache, 2 * n_b per in-flight voxel
    uint64_t bram_words_used = 0;
    uint64_t io_fixed = 0;
    bool over_capacity = false;  // bram_words_used exceeds the configured capacity
};

// Weight loads per processed batch per the schedule law.
uint64_t count_weight_loads(const AcceleratorConfig& config, Schedule schedule);

struct FunctionalResult {
    size_t n_voxels = 0;
    size_t n_samples = 0;
    // Row-major (voxel, sample): index v * n_samples + s.
    std::vector<std::array<double, 4>> logits;
    std::vector<IvimParams> params;
};

// Dataflow emulation: voxels staged through the I/O manager (chunked when the
// batch exceeds onchip capacity and allow_batching is set), layers serial,
// activations ping-ponged through the intermediate cache, neurons computed in
// PE groups. Bit-identical to quantized_forward per (voxel, sample).
FunctionalResult simulate_batch_functional(const PackedWeightStore& store,
                                           std::span<const fx::Word> voxels, size_t n_voxels,
                                           const AcceleratorConfig& config, Schedule schedule,
                                           bool allow_batching = true);

// Analytic cycle model cross-checked against an event-driven counter that
// walks the schedule's pass structure cycle by cycle.
TimingReport estimate_timing(const PackedWeightStore& store, const AcceleratorConfig& config,
                             Schedule schedule);

ResourceReport estimate_resources(const PackedWeightStore& store,
                                  const AcceleratorConfig& config);

std::string timing_json(const TimingReport& report);
std::string resources_json(const ResourceReport& report);
// Fig.-12-style sweep table: one row per PE count.
std::string pe_sweep_csv(const PackedWeightStore& store, const AcceleratorConfig& base,
                         Schedule schedule, const std::vector<size_t>& pe_counts);

}  // namespace uivim
