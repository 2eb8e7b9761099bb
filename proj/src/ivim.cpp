#include "uivim/ivim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <thread>

#include "uivim/rng.hpp"
#include "uivim/serialize.hpp"

namespace uivim {

void ParamRanges::validate() const {
    auto check = [](const Interval& iv, const char* name) {
        if (!(iv.min < iv.max) || !std::isfinite(iv.min) || !std::isfinite(iv.max))
            throw std::invalid_argument(std::string("ranges.") + name + ": min must be < max");
    };
    check(d, "d");
    check(dstar, "dstar");
    check(f, "f");
    check(s0, "s0");
    if (d.min < 0.0) throw std::invalid_argument("ranges.d: negative diffusion");
    if (!(dstar.min > d.max))
        throw std::invalid_argument("ranges.dstar: min must exceed ranges.d max");
    if (f.min < 0.0 || f.max > 1.0)
        throw std::invalid_argument("ranges.f: must lie within [0, 1]");
    if (!(s0.min > 0.0)) throw std::invalid_argument("ranges.s0: min must be positive");
}

bool ParamRanges::contains(const IvimParams& p) const {
    auto in = [](const Interval& iv, double x) { return x >= iv.min && x <= iv.max; };
    return in(d, p.d) && in(dstar, p.dstar) && in(f, p.f) && in(s0, p.s0);
}

const Interval& ParamRanges::by_index(size_t i) const {
    switch (i) {
        case 0: return d;
        case 1: return dstar;
        case 2: return f;
        default: return s0;
    }
}

void BValueSchedule::validate() const {
    if (b.empty()) throw std::invalid_argument("b-value schedule is empty");
    double prev = -1.0;
    bool has_zero = false;
    for (double v : b) {
        if (!std::isfinite(v) || v < 0.0)
            throw std::invalid_argument("b-values must be finite and non-negative");
        if (v < prev) throw std::invalid_argument("b-values must be nondecreasing");
        if (v == 0.0) has_zero = true;
        prev = v;
    }
    if (!has_zero)
        throw std::invalid_argument("b-value schedule must contain b=0 (normalization anchor)");
}

size_t BValueSchedule::b0_index() const {
    for (size_t i = 0; i < b.size(); ++i)
        if (b[i] == 0.0) return i;
    throw std::invalid_argument("b-value schedule lacks b=0");
}

BValueSchedule BValueSchedule::defaults() {
    return {{0, 5, 10, 20, 30, 40, 60, 150, 300, 500, 1000}};
}

BValueSchedule BValueSchedule::profile104() {
    // Synthetic capacity profile: 26 distinct b-values, 4 acquisitions each.
    // Stands in for multi-average clinical protocols of the same width.
    const std::vector<double> distinct = {0,   2.5, 5,   7.5, 10,  15,  20,  25,  30,
                                          35,  40,  50,  60,  80,  100, 125, 150, 200,
                                          250, 300, 400, 500, 600, 700, 850, 1000};
    BValueSchedule s;
    for (double v : distinct)
        for (int rep = 0; rep < 4; ++rep) s.b.push_back(v);
    return s;
}

double forward_signal(const IvimParams& p, double b) {
    if (!std::isfinite(b) || b < 0.0)
        throw std::invalid_argument("forward_signal: b must be finite and non-negative");
    if (!std::isfinite(p.d) || !std::isfinite(p.dstar) || !std::isfinite(p.f) ||
        !std::isfinite(p.s0))
        throw std::invalid_argument("forward_signal: non-finite parameter");
    return p.s0 * (p.f * std::exp(-b * p.dstar) + (1.0 - p.f) * std::exp(-b * p.d));
}

std::array<double, 4> signal_gradient(const IvimParams& p, double b) {
    if (!std::isfinite(b) || b < 0.0)
        throw std::invalid_argument("signal_gradient: b must be finite and non-negative");
    const double ed = std::exp(-b * p.d);
    const double es = std::exp(-b * p.dstar);
    return {
        p.s0 * (1.0 - p.f) * -b * ed,  // dS/dD
        p.s0 * p.f * -b * es,          // dS/dDstar
        p.s0 * (es - ed),              // dS/df
        p.f * es + (1.0 - p.f) * ed,   // dS/dS0
    };
}

namespace {

// One voxel. Parameter and noise draws come from per-voxel streams, so the
// result is independent of which thread or order processes the voxel.
void synthesize_voxel(size_t v, const ParamRanges& ranges, const BValueSchedule& schedule,
                      const NoiseSpec& noise, bool normalize_by_clean, size_t b0,
                      float* out_row, IvimParams* out_truth, uint64_t* out_redraws) {
    rng::Stream ps(noise.seed, rng::Tag::params, v);
    IvimParams p;
    p.d = ps.uniform(ranges.d.min, ranges.d.max);
    p.dstar = ps.uniform(ranges.dstar.min, ranges.dstar.max);
    p.f = ps.uniform(ranges.f.min, ranges.f.max);
    p.s0 = ps.uniform(ranges.s0.min, ranges.s0.max);
    *out_truth = p;

    const size_t n_b = schedule.size();
    std::vector<double> clean(n_b);
    for (size_t j = 0; j < n_b; ++j) clean[j] = forward_signal(p, schedule.b[j]);

    std::vector<double> measured(n_b);
    uint64_t redraws = 0;
    if (!noise.enabled) {
        measured = clean;
    } else {
        rng::Stream ns(noise.seed, rng::Tag::noise, v);
        const double sigma = p.s0 / noise.snr;
        constexpr uint64_t kMaxAttempts = 1000;
        for (;; ++redraws) {
            for (size_t j = 0; j < n_b; ++j) measured[j] = clean[j] + sigma * ns.normal();
            if (measured[b0] > 0.0) break;
            if (redraws + 1 >= kMaxAttempts)
                throw std::runtime_error("generate_dataset: measured S(b=0) stayed non-positive; "
                                         "SNR too low to normalize");
        }
    }

    const double denom = normalize_by_clean ? p.s0 : measured[b0];
    for (size_t j = 0; j < n_b; ++j) {
        const double s = measured[j] / denom;
        if (!std::isfinite(s)) throw std::runtime_error("generate_dataset: non-finite signal");
        out_row[j] = static_cast<float>(s);
    }
    *out_redraws = redraws;
}

}  // namespace

Dataset generate_dataset(const ParamRanges& ranges, const BValueSchedule& schedule,
                         size_t n_voxels, const NoiseSpec& noise, bool normalize_by_clean,
                         unsigned n_threads) {
    ranges.validate();
    schedule.validate();
    if (n_voxels == 0) throw std::invalid_argument("generate_dataset: n_voxels must be > 0");
    if (noise.enabled && !(noise.snr > 0.0))
        throw std::invalid_argument("generate_dataset: snr must be > 0");

    const size_t b0 = schedule.b0_index();
    const size_t n_b = schedule.size();

    Dataset ds;
    ds.schedule = schedule;
    ds.noise = noise;
    ds.ranges = ranges;
    ds.normalized_by_clean = normalize_by_clean;
    ds.signals.resize(n_voxels * n_b);
    ds.truth.resize(n_voxels);

    std::vector<uint64_t> redraws(n_voxels, 0);
    auto work = [&](size_t lo, size_t hi) {
        for (size_t v = lo; v < hi; ++v)
            synthesize_voxel(v, ranges, schedule, noise, normalize_by_clean, b0,
                             ds.signals.data() + v * n_b, &ds.truth[v], &redraws[v]);
    };

    if (n_threads <= 1 || n_voxels < 2 * n_threads) {
        work(0, n_voxels);
    } else {
        std::vector<std::thread> pool;
        const size_t chunk = (n_voxels + n_threads - 1) / n_threads;
        for (unsigned t = 0; t < n_threads; ++t) {
            const size_t lo = t * chunk;
            if (lo >= n_voxels) break;
            pool.emplace_back(work, lo, std::min(n_voxels, lo + chunk));
        }
        for (auto& th : pool) th.join();
    }

    for (uint64_t r : redraws) ds.redraws += r;
    return ds;
}

namespace {

nlohmann::json interval_json(const Interval& iv) { return {iv.min, iv.max}; }

Interval interval_from(const nlohmann::json& j) { return {j.at(0), j.at(1)}; }

}  // namespace

void save_dataset(const std::string& path, const Dataset& ds) {
    nlohmann::json h;
    h["magic"] = "IVDS";
    h["version"] = 1;
    h["n_voxels"] = ds.n_voxels();
    h["b_values"] = ds.schedule.b;
    h["snr"] = ds.noise.snr;
    h["seed"] = ds.noise.seed;
    h["noise_enabled"] = ds.noise.enabled;
    h["normalized_by"] = ds.normalized_by_clean ? "clean" : "measured";
    h["redraws"] = ds.redraws;
    h["ranges"] = {{"d", interval_json(ds.ranges.d)},
                   {"dstar", interval_json(ds.ranges.dstar)},
                   {"f", interval_json(ds.ranges.f)},
                   {"s0", interval_json(ds.ranges.s0)}};

    io::Writer w(path);
    w.header(h);
    w.block(ds.signals);
    // Truth stays float64 so save/load round-trips the exact generator draws.
    std::vector<double> truth(ds.n_voxels() * 4);
    for (size_t i = 0; i < ds.truth.size(); ++i) {
        const auto a = ds.truth[i].as_array();
        for (size_t k = 0; k < 4; ++k) truth[i * 4 + k] = a[k];
    }
    w.block(truth);
    w.finish(path);
}

Dataset load_dataset(const std::string& path) {
    io::Reader r(path);
    const nlohmann::json h = r.header("IVDS");

    Dataset ds;
    ds.schedule.b = h.at("b_values").get<std::vector<double>>();
    ds.noise.snr = h.at("snr");
    ds.noise.seed = h.at("seed");
    ds.noise.enabled = h.at("noise_enabled");
    ds.normalized_by_clean = h.at("normalized_by") == "clean";
    ds.redraws = h.at("redraws");
    ds.ranges.d = interval_from(h.at("ranges").at("d"));
    ds.ranges.dstar = interval_from(h.at("ranges").at("dstar"));
    ds.ranges.f = interval_from(h.at("ranges").at("f"));
    ds.ranges.s0 = interval_from(h.at("ranges").at("s0"));

    const size_t n_voxels = h.at("n_voxels");
    const size_t n_b = ds.schedule.size();
    ds.signals = r.block<float>(n_voxels * n_b);
    const auto truth = r.block<double>(n_voxels * 4);
    ds.truth.resize(n_voxels);
    for (size_t i = 0; i < n_voxels; ++i) {
        ds.truth[i] = {truth[i * 4 + 0], truth[i * 4 + 1], truth[i * 4 + 2], truth[i * 4 + 3]};
    }
    return ds;
}

}  // namespace uivim

namespace uivim::io {

std::string sniff_magic(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    uint32_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 4);
    if (!in || len == 0 || len > (64u << 20)) return "";
    std::string s(std::min<size_t>(len, 4096), '\0');
    in.read(s.data(), static_cast<std::streamsize>(s.size()));
    if (!in) return "";
    try {
        // Header may be truncated at 4096 bytes; magic sits at the front.
        auto pos = s.find("\"magic\":\"");
        if (pos == std::string::npos) return "";
        pos += 9;
        return s.substr(pos, s.find('"', pos) - pos);
    } catch (...) {
        return "";
    }
}

}  // namespace uivim::io
