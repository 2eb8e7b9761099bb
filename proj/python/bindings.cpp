// Python bindings for the core operations: data synthesis, training,
// uncertainty evaluation, fixed-point packing, and accelerator simulation.
// Arrays cross the boundary as numpy; containers as plain lists.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <span>
#include <vector>

#include "uivim/accel.hpp"
#include "uivim/evaluation.hpp"
#include "uivim/fixed_point.hpp"
#include "uivim/ivim.hpp"
#include "uivim/masks.hpp"
#include "uivim/network.hpp"
#include "uivim/packed_store.hpp"

namespace py = pybind11;
using namespace uivim;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using WordArray = py::array_t<fx::Word, py::array::c_style | py::array::forcecast>;

std::vector<double> as_vector(const DoubleArray& arr) {
    return {arr.data(), arr.data() + arr.size()};
}

py::array_t<float> dataset_signals(const Dataset& ds) {
    py::array_t<float> out({ds.n_voxels(), ds.schedule.size()});
    std::copy(ds.signals.begin(), ds.signals.end(), out.mutable_data());
    return out;
}

py::array_t<double> dataset_truth(const Dataset& ds) {
    py::array_t<double> out({ds.n_voxels(), size_t{4}});
    double* p = out.mutable_data();
    for (const IvimParams& t : ds.truth) {
        const auto a = t.as_array();
        p = std::copy(a.begin(), a.end(), p);
    }
    return out;
}

py::array_t<uint8_t> mask_rows(const MaskSet& masks) {
    py::array_t<uint8_t> out({masks.n_samples(), masks.width()});
    uint8_t* p = out.mutable_data();
    for (size_t s = 0; s < masks.n_samples(); ++s) {
        const auto row = masks.row(s);
        p = std::copy(row.begin(), row.end(), p);
    }
    return out;
}

std::span<const fx::Word> word_span(const WordArray& arr) {
    return {arr.data(), static_cast<size_t>(arr.size())};
}

py::array_t<double> params_matrix(const std::vector<IvimParams>& params) {
    py::array_t<double> out({params.size(), size_t{4}});
    double* p = out.mutable_data();
    for (const IvimParams& q : params) {
        const auto a = q.as_array();
        p = std::copy(a.begin(), a.end(), p);
    }
    return out;
}

}  // namespace

PYBIND11_MODULE(_uivim, m) {
    m.doc() = "Mask-ensemble Bayesian IVIM fitting with a fixed-point accelerator model";

    // Signal model -----------------------------------------------------------
    py::class_<Interval>(m, "Interval")
        .def(py::init<>())
        .def(py::init([](double min, double max) { return Interval{min, max}; }),
             py::arg("min"), py::arg("max"))
        .def_readwrite("min", &Interval::min)
        .def_readwrite("max", &Interval::max);

    py::class_<IvimParams>(m, "IvimParams")
        .def(py::init<>())
        .def(py::init([](double d, double dstar, double f, double s0) {
                 return IvimParams{d, dstar, f, s0};
             }),
             py::arg("d"), py::arg("dstar"), py::arg("f"), py::arg("s0"))
        .def_readwrite("d", &IvimParams::d)
        .def_readwrite("dstar", &IvimParams::dstar)
        .def_readwrite("f", &IvimParams::f)
        .def_readwrite("s0", &IvimParams::s0)
        .def("as_array", &IvimParams::as_array)
        .def("__repr__", [](const IvimParams& p) {
            return "IvimParams(d=" + std::to_string(p.d) + ", dstar=" + std::to_string(p.dstar) +
                   ", f=" + std::to_string(p.f) + ", s0=" + std::to_string(p.s0) + ")";
        });

    py::class_<ParamRanges>(m, "ParamRanges")
        .def(py::init<>())
        .def_readwrite("d", &ParamRanges::d)
        .def_readwrite("dstar", &ParamRanges::dstar)
        .def_readwrite("f", &ParamRanges::f)
        .def_readwrite("s0", &ParamRanges::s0)
        .def("validate", &ParamRanges::validate)
        .def("contains", &ParamRanges::contains);

    py::class_<BValueSchedule>(m, "BValueSchedule")
        .def(py::init<>())
        .def(py::init([](std::vector<double> b) { return BValueSchedule{std::move(b)}; }),
             py::arg("b"))
        .def_readwrite("b", &BValueSchedule::b)
        .def("size", &BValueSchedule::size)
        .def("validate", &BValueSchedule::validate)
        .def_static("defaults", &BValueSchedule::defaults)
        .def_static("profile104", &BValueSchedule::profile104);

    py::class_<NoiseSpec>(m, "NoiseSpec")
        .def(py::init<>())
        .def(py::init([](double snr, uint64_t seed, bool enabled) {
                 return NoiseSpec{snr, seed, enabled};
             }),
             py::arg("snr"), py::arg("seed"), py::arg("enabled") = true)
        .def_readwrite("snr", &NoiseSpec::snr)
        .def_readwrite("seed", &NoiseSpec::seed)
        .def_readwrite("enabled", &NoiseSpec::enabled);

    py::class_<Dataset>(m, "Dataset")
        .def_readonly("schedule", &Dataset::schedule)
        .def_readonly("noise", &Dataset::noise)
        .def_readonly("ranges", &Dataset::ranges)
        .def_readonly("normalized_by_clean", &Dataset::normalized_by_clean)
        .def_readonly("redraws", &Dataset::redraws)
        .def_property_readonly("n_voxels", &Dataset::n_voxels)
        .def_property_readonly("signals", &dataset_signals)
        .def_property_readonly("truth", &dataset_truth);

    m.def("forward_signal", &forward_signal, py::arg("params"), py::arg("b"));
    m.def("signal_gradient", &signal_gradient, py::arg("params"), py::arg("b"));
    m.def("generate_dataset", &generate_dataset, py::arg("ranges"), py::arg("schedule"),
          py::arg("n_voxels"), py::arg("noise"), py::arg("normalize_by_clean") = false,
          py::arg("n_threads") = 1);
    m.def("save_dataset", &save_dataset, py::arg("path"), py::arg("dataset"));
    m.def("load_dataset", &load_dataset, py::arg("path"));
    m.def("snr_level_seed", &snr_level_seed, py::arg("seed"), py::arg("snr"));
    m.def("sweep_eval_seed", &sweep_eval_seed, py::arg("seed"));

    // Masks --------------------------------------------------------------
    py::class_<MaskConfig>(m, "MaskConfig")
        .def(py::init<>())
        .def_readwrite("n_samples", &MaskConfig::n_samples)
        .def_readwrite("width", &MaskConfig::width)
        .def_readwrite("drop_rate", &MaskConfig::drop_rate)
        .def_readwrite("seed", &MaskConfig::seed)
        .def_readwrite("max_overlap", &MaskConfig::max_overlap)
        .def("keep_count", &MaskConfig::keep_count)
        .def("validate", &MaskConfig::validate);

    py::class_<MaskSet>(m, "MaskSet")
        .def_property_readonly("config", &MaskSet::config)
        .def_property_readonly("n_samples", &MaskSet::n_samples)
        .def_property_readonly("width", &MaskSet::width)
        .def_property_readonly("overlap_warning", &MaskSet::overlap_warning)
        .def_property_readonly("rows", &mask_rows)
        .def("kept_indices", &MaskSet::kept_indices, py::arg("sample"));

    m.def("generate_masks", &generate_masks, py::arg("config"));

    // Network --------------------------------------------------------------
    py::class_<TrainingConfig>(m, "TrainingConfig")
        .def(py::init<>())
        .def_readwrite("learning_rate", &TrainingConfig::learning_rate)
        .def_readwrite("batch_size", &TrainingConfig::batch_size)
        .def_readwrite("max_epochs", &TrainingConfig::max_epochs)
        .def_readwrite("patience", &TrainingConfig::patience)
        .def_readwrite("beta1", &TrainingConfig::beta1)
        .def_readwrite("beta2", &TrainingConfig::beta2)
        .def_readwrite("adam_eps", &TrainingConfig::adam_eps)
        .def_readwrite("drop_rate", &TrainingConfig::drop_rate)
        .def_readwrite("n_samples", &TrainingConfig::n_samples)
        .def_readwrite("val_fraction", &TrainingConfig::val_fraction)
        .def_readwrite("seed", &TrainingConfig::seed)
        .def("validate", &TrainingConfig::validate);

    py::class_<UIvimNet>(m, "UIvimNet")
        .def_readonly("schedule", &UIvimNet::schedule)
        .def_readonly("folded", &UIvimNet::folded)
        .def_readonly("seed", &UIvimNet::seed)
        .def_readonly("training_meta", &UIvimNet::training_meta)
        .def_property_readonly("n_b", &UIvimNet::n_b)
        .def_property_readonly("n_samples", &UIvimNet::n_samples)
        .def("validate", &UIvimNet::validate);

    py::class_<TrainResult>(m, "TrainResult")
        .def_readonly("train_loss", &TrainResult::train_loss)
        .def_readonly("val_loss", &TrainResult::val_loss)
        .def_readonly("best_epoch", &TrainResult::best_epoch)
        .def_readonly("epochs_run", &TrainResult::epochs_run);

    py::class_<PredictionWithUncertainty>(m, "PredictionWithUncertainty")
        .def_readonly("mean", &PredictionWithUncertainty::mean)
        .def_readonly("std", &PredictionWithUncertainty::std)
        .def_readonly("samples", &PredictionWithUncertainty::samples);

    m.def("init_network", &init_network, py::arg("schedule"), py::arg("ranges"),
          py::arg("drop_rate"), py::arg("n_samples"), py::arg("seed"));
    m.def("train", &train, py::arg("net"), py::arg("data"), py::arg("config"),
          py::call_guard<py::gil_scoped_release>());
    m.def(
        "predict_with_uncertainty",
        [](const UIvimNet& net, const DoubleArray& voxel, bool use_sample_std) {
            const auto v = as_vector(voxel);
            return predict_with_uncertainty(net, v, use_sample_std);
        },
        py::arg("net"), py::arg("voxel"), py::arg("use_sample_std") = false);
    m.def("fold_batchnorm", &fold_batchnorm, py::arg("net"));
    m.def("reconstruction_rmse", &reconstruction_rmse, py::arg("net"), py::arg("data"));
    m.def("save_model", &save_model, py::arg("path"), py::arg("net"));
    m.def("load_model", &load_model, py::arg("path"));

    // Grid search ------------------------------------------------------------
    py::class_<GridSpec>(m, "GridSpec")
        .def(py::init<>())
        .def_readwrite("drop_rates", &GridSpec::drop_rates)
        .def_readwrite("n_samples", &GridSpec::n_samples)
        .def("cells", &GridSpec::cells)
        .def("validate", &GridSpec::validate);

    py::class_<RequirementProbe>(m, "RequirementProbe")
        .def(py::init<>())
        .def_readwrite("snr_levels", &RequirementProbe::snr_levels)
        .def_readwrite("n_voxels", &RequirementProbe::n_voxels)
        .def_readwrite("tau", &RequirementProbe::tau)
        .def_readwrite("seed", &RequirementProbe::seed);

    py::class_<GridCell>(m, "GridCell")
        .def_readonly("drop_rate", &GridCell::drop_rate)
        .def_readonly("n_samples", &GridCell::n_samples)
        .def_readonly("trained", &GridCell::trained)
        .def_readonly("val_rmse", &GridCell::val_rmse)
        .def_readonly("requirement_passed", &GridCell::requirement_passed)
        .def_readonly("error", &GridCell::error);

    py::class_<GridResult>(m, "GridResult")
        .def_readonly("table", &GridResult::table)
        .def_readonly("best_index", &GridResult::best_index)
        .def("best", &GridResult::best, py::return_value_policy::reference_internal);

    m.def("grid_search", &grid_search, py::arg("train_data"), py::arg("val_data"),
          py::arg("grid"), py::arg("base"), py::arg("probe") = std::nullopt,
          py::call_guard<py::gil_scoped_release>());
    m.def("grid_csv", &grid_csv, py::arg("result"));

    // Evaluation ---------------------------------------------------------
    py::class_<SweepRow>(m, "SweepRow")
        .def_readonly("snr", &SweepRow::snr)
        .def_readonly("n_voxels", &SweepRow::n_voxels)
        .def_readonly("rmse", &SweepRow::rmse)
        .def_readonly("recon_rmse", &SweepRow::recon_rmse)
        .def_readonly("rel_uncertainty", &SweepRow::rel_uncertainty)
        .def_readonly("rel_excluded", &SweepRow::rel_excluded);

    py::class_<SweepReport>(m, "SweepReport")
        .def_readonly("rows", &SweepReport::rows)
        .def_readonly("mode", &SweepReport::mode)
        .def_readonly("seed", &SweepReport::seed)
        .def_readonly("config_hash", &SweepReport::config_hash);

    py::class_<RequirementVerdict>(m, "RequirementVerdict")
        .def_readonly("passed", &RequirementVerdict::passed)
        .def_readonly("monotone", &RequirementVerdict::monotone)
        .def_readonly("tau", &RequirementVerdict::tau);

    m.def("snr_sweep", &snr_sweep, py::arg("net"), py::arg("ranges"), py::arg("schedule"),
          py::arg("snr_levels"), py::arg("n_voxels"), py::arg("seed"),
          py::arg("use_sample_std") = false, py::arg("median_aggregate") = false,
          py::call_guard<py::gil_scoped_release>());
    m.def("check_requirement", &check_requirement, py::arg("report"), py::arg("tau") = 0.05);
    m.def("sweep_csv", &sweep_csv, py::arg("report"));
    m.def("sweep_json", &sweep_json, py::arg("report"));

    // Fixed point and packing ----------------------------------------------
    m.attr("Q_SCALE") = fx::kScale;
    m.def("quantize", &fx::quantize, py::arg("x"));
    m.def("dequantize", &fx::dequantize, py::arg("word"));
    m.def(
        "quantize_vector",
        [](const DoubleArray& values) {
            const auto v = as_vector(values);
            const auto words = fx::quantize_vector(std::span<const double>(v));
            py::array_t<fx::Word> out(words.size());
            std::copy(words.begin(), words.end(), out.mutable_data());
            return out;
        },
        py::arg("values"));

    py::class_<PackedSample>(m, "PackedSample")
        .def_readonly("kept1", &PackedSample::kept1)
        .def_readonly("kept2", &PackedSample::kept2)
        .def("words", &PackedSample::words);

    py::class_<PackedSubnet>(m, "PackedSubnet")
        .def_readonly("samples", &PackedSubnet::samples)
        .def_readonly("range", &PackedSubnet::range);

    py::class_<PackedWeightStore>(m, "PackedWeightStore")
        .def_readonly("schedule", &PackedWeightStore::schedule)
        .def_readonly("n_samples", &PackedWeightStore::n_samples)
        .def_readonly("subnets", &PackedWeightStore::subnets)
        .def_readonly("model_seed", &PackedWeightStore::model_seed)
        .def_property_readonly("n_b", &PackedWeightStore::n_b)
        .def("packed_words", &PackedWeightStore::packed_words)
        .def("dense_words", &PackedWeightStore::dense_words);

    m.def("pack_weights", &pack_weights, py::arg("folded_net"));
    m.def("save_store", &save_store, py::arg("path"), py::arg("store"));
    m.def("load_store", &load_store, py::arg("path"));
    m.def(
        "quantized_forward",
        [](const PackedWeightStore& store, const WordArray& voxel, size_t sample) {
            return quantized_forward(store, word_span(voxel), sample);
        },
        py::arg("store"), py::arg("voxel"), py::arg("sample"));

    // Accelerator ----------------------------------------------------------
    py::class_<AcceleratorConfig>(m, "AcceleratorConfig")
        .def(py::init<>())
        .def_readwrite("n_pe", &AcceleratorConfig::n_pe)
        .def_readwrite("mult_per_pu", &AcceleratorConfig::mult_per_pu)
        .def_readwrite("r_m", &AcceleratorConfig::r_m)
        .def_readwrite("r_a", &AcceleratorConfig::r_a)
        .def_readwrite("clock_hz", &AcceleratorConfig::clock_hz)
        .def_readwrite("batch_size", &AcceleratorConfig::batch_size)
        .def_readwrite("n_samples", &AcceleratorConfig::n_samples)
        .def_readwrite("max_voxel_width", &AcceleratorConfig::max_voxel_width)
        .def_readwrite("onchip_voxels", &AcceleratorConfig::onchip_voxels)
        .def_readwrite("loader_width", &AcceleratorConfig::loader_width)
        .def_readwrite("bram_words", &AcceleratorConfig::bram_words)
        .def_readwrite("dsp_per_pe", &AcceleratorConfig::dsp_per_pe)
        .def_readwrite("io_fixed", &AcceleratorConfig::io_fixed)
        .def("pipe_depth", &AcceleratorConfig::pipe_depth)
        .def("validate", &AcceleratorConfig::validate);

    py::enum_<Schedule>(m, "Schedule")
        .value("batch_level", Schedule::batch_level)
        .value("sampling_level", Schedule::sampling_level);

    m.def("schedule_from_string", &schedule_from_string, py::arg("name"));
    m.def("pu_latency", &pu_latency, py::arg("config"), py::arg("n_b"));
    m.def("count_weight_loads", &count_weight_loads, py::arg("config"), py::arg("schedule"));

    py::class_<FunctionalResult>(m, "FunctionalResult")
        .def_readonly("n_voxels", &FunctionalResult::n_voxels)
        .def_readonly("n_samples", &FunctionalResult::n_samples)
        .def_property_readonly("params",
                               [](const FunctionalResult& r) { return params_matrix(r.params); })
        .def_property_readonly("logits", [](const FunctionalResult& r) {
            py::array_t<double> out({r.logits.size(), size_t{4}});
            double* p = out.mutable_data();
            for (const auto& l : r.logits) p = std::copy(l.begin(), l.end(), p);
            return out;
        });

    m.def(
        "simulate_batch_functional",
        [](const PackedWeightStore& store, const WordArray& voxels, size_t n_voxels,
           const AcceleratorConfig& config, Schedule schedule, bool allow_batching) {
            return simulate_batch_functional(store, word_span(voxels), n_voxels, config,
                                             schedule, allow_batching);
        },
        py::arg("store"), py::arg("voxels"), py::arg("n_voxels"), py::arg("config"),
        py::arg("schedule"), py::arg("allow_batching") = true);

    py::class_<TimingReport>(m, "TimingReport")
        .def_readonly("schedule", &TimingReport::schedule)
        .def_readonly("n_b", &TimingReport::n_b)
        .def_readonly("batch_size", &TimingReport::batch_size)
        .def_readonly("n_samples", &TimingReport::n_samples)
        .def_readonly("n_pe", &TimingReport::n_pe)
        .def_readonly("pipe_depth", &TimingReport::pipe_depth)
        .def_readonly("total_passes", &TimingReport::total_passes)
        .def_readonly("layer_cycles", &TimingReport::layer_cycles)
        .def_readonly("fill_cycles", &TimingReport::fill_cycles)
        .def_readonly("load_cycles", &TimingReport::load_cycles)
        .def_readonly("total_cycles", &TimingReport::total_cycles)
        .def_readonly("wall_time_s", &TimingReport::wall_time_s)
        .def_readonly("weight_loads", &TimingReport::weight_loads)
        .def_readonly("event_cycles", &TimingReport::event_cycles)
        .def_readonly("analytic_vs_event", &TimingReport::analytic_vs_event);

    py::class_<ResourceReport>(m, "ResourceReport")
        .def_readonly("dsp_used", &ResourceReport::dsp_used)
        .def_readonly("voxel_words", &ResourceReport::voxel_words)
        .def_readonly("weight_words", &ResourceReport::weight_words)
        .def_readonly("cache_words", &ResourceReport::cache_words)
        .def_readonly("bram_words_used", &ResourceReport::bram_words_used)
        .def_readonly("io_fixed", &ResourceReport::io_fixed)
        .def_readonly("over_capacity", &ResourceReport::over_capacity);

    m.def("estimate_timing", &estimate_timing, py::arg("store"), py::arg("config"),
          py::arg("schedule"));
    m.def("estimate_resources", &estimate_resources, py::arg("store"), py::arg("config"));
    m.def("timing_json", &timing_json, py::arg("report"));
    m.def("resources_json", &resources_json, py::arg("report"));
    m.def("pe_sweep_csv", &pe_sweep_csv, py::arg("store"), py::arg("base"), py::arg("schedule"),
          py::arg("pe_counts"));
}
