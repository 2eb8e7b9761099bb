#include "uivim/run_config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace uivim {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& path, const std::string& why) {
    throw std::runtime_error("config: " + path + ": " + why);
}

// Typed field access with path-qualified diagnostics and unknown-key checks.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) fail(path_, "expected an object");
    }

    ~Section() = default;

    bool has(const char* key) const { return j_.contains(key); }

    Section child(const char* key) {
        mark(key);
        return Section(j_.at(key), path_ + "." + key);
    }

    template <typename T>
    void read(const char* key, T& out) {
        if (!j_.contains(key)) return;
        mark(key);
        const json& v = j_.at(key);
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!v.is_boolean()) fail(path_ + "." + key, "expected a boolean");
            } else if constexpr (std::is_arithmetic_v<T>) {
                if (!v.is_number()) fail(path_ + "." + key, "expected a number");
            }
            out = v.get<T>();
        } catch (const json::exception& e) {
            fail(path_ + "." + key, e.what());
        }
    }

    void read_interval(const char* key, Interval& out) {
        if (!j_.contains(key)) return;
        mark(key);
        const json& v = j_.at(key);
        if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) {
            fail(path_ + "." + key, "expected [min, max]");
        }
        out = Interval{v[0].get<double>(), v[1].get<double>()};
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.contains(it.key())) fail(path_ + "." + it.key(), "unknown key");
        }
    }

private:
    void mark(const char* key) { seen_.insert(key); }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

}  // namespace

void RunConfig::validate() const {
    ranges.validate();
    schedule.validate();
    if (snr_levels.empty()) throw std::runtime_error("config: snr_levels: must be nonempty");
    for (double l : snr_levels) {
        if (!(l > 0.0) || !std::isfinite(l)) {
            throw std::runtime_error("config: snr_levels: values must be finite and positive");
        }
    }
    if (n_voxels == 0) throw std::runtime_error("config: n_voxels: must be positive");
    if (eval_voxels == 0) throw std::runtime_error("config: eval_voxels: must be positive");
    if (probe_voxels == 0) throw std::runtime_error("config: probe_voxels: must be positive");
    if (n_threads == 0) throw std::runtime_error("config: n_threads: must be positive");
    if (!(tau >= 0.0) || !std::isfinite(tau)) {
        throw std::runtime_error("config: tau: must be finite and >= 0");
    }
    training.validate();
    grid.validate();
    accel.validate();
    if (schedule.size() > accel.max_voxel_width) {
        throw std::runtime_error(
            "config: b_values: schedule length exceeds accel.max_voxel_width");
    }
}

RunConfig RunConfig::from_json_text(const std::string& text, const std::string& origin) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw std::runtime_error("config: " + origin + ": " + e.what());
    }

    RunConfig cfg;
    Section root(j, origin);
    root.read("seed", cfg.seed);
    if (root.has("ranges")) {
        Section r = root.child("ranges");
        r.read_interval("d", cfg.ranges.d);
        r.read_interval("dstar", cfg.ranges.dstar);
        r.read_interval("f", cfg.ranges.f);
        r.read_interval("s0", cfg.ranges.s0);
        r.finish();
    }
    root.read("b_values", cfg.schedule.b);
    root.read("snr_levels", cfg.snr_levels);
    root.read("n_voxels", cfg.n_voxels);
    root.read("eval_voxels", cfg.eval_voxels);
    root.read("normalize_by_clean", cfg.normalize_by_clean);
    root.read("n_threads", cfg.n_threads);
    if (root.has("training")) {
        Section t = root.child("training");
        t.read("learning_rate", cfg.training.learning_rate);
        t.read("batch_size", cfg.training.batch_size);
        t.read("max_epochs", cfg.training.max_epochs);
        t.read("patience", cfg.training.patience);
        t.read("beta1", cfg.training.beta1);
        t.read("beta2", cfg.training.beta2);
        t.read("adam_eps", cfg.training.adam_eps);
        t.read("drop_rate", cfg.training.drop_rate);
        t.read("n_samples", cfg.training.n_samples);
        t.read("val_fraction", cfg.training.val_fraction);
        t.finish();
    }
    if (root.has("grid")) {
        Section g = root.child("grid");
        g.read("drop_rates", cfg.grid.drop_rates);
        g.read("n_samples", cfg.grid.n_samples);
        g.finish();
    }
    if (root.has("evaluation")) {
        Section e = root.child("evaluation");
        e.read("tau", cfg.tau);
        e.read("use_sample_std", cfg.use_sample_std);
        e.read("median_aggregate", cfg.median_aggregate);
        e.read("probe_voxels", cfg.probe_voxels);
        e.finish();
    }
    if (root.has("accel")) {
        Section a = root.child("accel");
        a.read("n_pe", cfg.accel.n_pe);
        a.read("mult_per_pu", cfg.accel.mult_per_pu);
        a.read("r_m", cfg.accel.r_m);
        a.read("r_a", cfg.accel.r_a);
        a.read("clock_hz", cfg.accel.clock_hz);
        a.read("batch_size", cfg.accel.batch_size);
        a.read("n_samples", cfg.accel.n_samples);
        a.read("max_voxel_width", cfg.accel.max_voxel_width);
        a.read("onchip_voxels", cfg.accel.onchip_voxels);
        a.read("loader_width", cfg.accel.loader_width);
        a.read("bram_words", cfg.accel.bram_words);
        a.read("dsp_per_pe", cfg.accel.dsp_per_pe);
        a.read("io_fixed", cfg.accel.io_fixed);
        a.finish();
    }
    root.finish();

    // Training seeds default to the global seed unless overridden later.
    cfg.training.seed = cfg.seed;
    cfg.validate();
    return cfg;
}

RunConfig RunConfig::from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json_text(ss.str(), path);
}

std::string RunConfig::to_json() const {
    const json j{
        {"seed", seed},
        {"ranges",
         {{"d", {ranges.d.min, ranges.d.max}},
          {"dstar", {ranges.dstar.min, ranges.dstar.max}},
          {"f", {ranges.f.min, ranges.f.max}},
          {"s0", {ranges.s0.min, ranges.s0.max}}}},
        {"b_values", schedule.b},
        {"snr_levels", snr_levels},
        {"n_voxels", n_voxels},
        {"eval_voxels", eval_voxels},
        {"normalize_by_clean", normalize_by_clean},
        {"n_threads", n_threads},
        {"training",
         {{"learning_rate", training.learning_rate},
          {"batch_size", training.batch_size},
          {"max_epochs", training.max_epochs},
          {"patience", training.patience},
          {"beta1", training.beta1},
          {"beta2", training.beta2},
          {"adam_eps", training.adam_eps},
          {"drop_rate", training.drop_rate},
          {"n_samples", training.n_samples},
          {"val_fraction", training.val_fraction}}},
        {"grid", {{"drop_rates", grid.drop_rates}, {"n_samples", grid.n_samples}}},
        {"evaluation",
         {{"tau", tau},
          {"use_sample_std", use_sample_std},
          {"median_aggregate", median_aggregate},
          {"probe_voxels", probe_voxels}}},
        {"accel",
         {{"n_pe", accel.n_pe},
          {"mult_per_pu", accel.mult_per_pu},
          {"r_m", accel.r_m},
          {"r_a", accel.r_a},
          {"clock_hz", accel.clock_hz},
          {"batch_size", accel.batch_size},
          {"n_samples", accel.n_samples},
          {"max_voxel_width", accel.max_voxel_width},
          {"onchip_voxels", accel.onchip_voxels},
          {"loader_width", accel.loader_width},
          {"bram_words", accel.bram_words},
          {"dsp_per_pe", accel.dsp_per_pe},
          {"io_fixed", accel.io_fixed}}}};
    return j.dump(2) + "\n";
}

}  // namespace uivim
