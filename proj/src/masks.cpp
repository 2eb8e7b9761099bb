#include "uivim/masks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include "uivim/rng.hpp"

namespace uivim {

size_t MaskConfig::keep_count() const {
    return static_cast<size_t>(std::llround(static_cast<double>(width) * (1.0 - drop_rate)));
}

void MaskConfig::validate() const {
    if (n_samples < 1) throw std::invalid_argument("mask config: n_samples must be >= 1");
    if (width < 1) throw std::invalid_argument("mask config: width must be >= 1");
    if (!(drop_rate >= 0.0) || !(drop_rate < 1.0))
        throw std::invalid_argument("mask config: drop_rate must lie in [0, 1)");
    const size_t k = keep_count();
    if (k < 1) throw std::invalid_argument("mask config: keep count rounds to zero");
    if (k * n_samples < width)
        throw std::invalid_argument("mask config: k*N < C, cannot cover every channel");
    if (max_overlap && (*max_overlap < 0.0 || *max_overlap > 1.0))
        throw std::invalid_argument("mask config: max_overlap must lie in [0, 1]");
}

MaskSet::MaskSet(MaskConfig config, std::vector<uint8_t> rows, bool overlap_warning)
    : config_(config), rows_(std::move(rows)), overlap_warning_(overlap_warning) {
    if (rows_.size() != config_.n_samples * config_.width)
        throw std::invalid_argument("mask set: row buffer size mismatch");
}

std::span<const uint8_t> MaskSet::row(size_t sample) const {
    if (sample >= config_.n_samples) throw std::out_of_range("mask set: sample index out of range");
    return {rows_.data() + sample * config_.width, config_.width};
}

std::vector<uint32_t> MaskSet::kept_indices(size_t sample) const {
    auto r = row(sample);
    std::vector<uint32_t> kept;
    kept.reserve(config_.keep_count());
    for (uint32_t c = 0; c < r.size(); ++c)
        if (r[c]) kept.push_back(c);
    return kept;
}

std::vector<uint8_t> MaskSet::pack_bits() const {
    const size_t bytes_per_row = (config_.width + 7) / 8;
    std::vector<uint8_t> packed(config_.n_samples * bytes_per_row, 0);
    for (size_t s = 0; s < config_.n_samples; ++s)
        for (size_t c = 0; c < config_.width; ++c)
            if (rows_[s * config_.width + c])
                packed[s * bytes_per_row + c / 8] |= static_cast<uint8_t>(1u << (c % 8));
    return packed;
}

MaskSet MaskSet::unpack_bits(const MaskConfig& config, std::span<const uint8_t> bits,
                             bool overlap_warning) {
    const size_t bytes_per_row = (config.width + 7) / 8;
    if (bits.size() != config.n_samples * bytes_per_row)
        throw std::invalid_argument("mask set: packed bit size mismatch");
    std::vector<uint8_t> rows(config.n_samples * config.width, 0);
    for (size_t s = 0; s < config.n_samples; ++s)
        for (size_t c = 0; c < config.width; ++c)
            rows[s * config.width + c] =
                (bits[s * bytes_per_row + c / 8] >> (c % 8)) & 1u;
    return MaskSet(config, std::move(rows), overlap_warning);
}

namespace {

// Stratified construction: shuffled channels are dealt round-robin into N
// guaranteed-kept buckets (forcing column coverage), then each row is filled
// to k ones by uniform sampling without replacement.
std::vector<uint8_t> build_rows(const MaskConfig& cfg, rng::Stream& rs) {
    const size_t n = cfg.n_samples, c = cfg.width, k = cfg.keep_count();
    std::vector<uint32_t> order(c);
    std::iota(order.begin(), order.end(), 0u);
    rs.shuffle(order);

    std::vector<uint8_t> rows(n * c, 0);
    for (size_t i = 0; i < c; ++i) rows[(i % n) * c + order[i]] = 1;

    std::vector<uint32_t> pool;
    for (size_t s = 0; s < n; ++s) {
        pool.clear();
        size_t have = 0;
        for (size_t ch = 0; ch < c; ++ch) {
            if (rows[s * c + ch])
                ++have;
            else
                pool.push_back(static_cast<uint32_t>(ch));
        }
        while (have < k) {
            const size_t pick = rs.bounded(pool.size());
            rows[s * c + pool[pick]] = 1;
            pool.erase(pool.begin() + static_cast<ptrdiff_t>(pick));
            ++have;
        }
    }
    return rows;
}

double max_pairwise_jaccard(const std::vector<uint8_t>& rows, size_t n, size_t c) {
    double worst = 0.0;
    for (size_t a = 0; a < n; ++a) {
        for (size_t b = a + 1; b < n; ++b) {
            size_t inter = 0, uni = 0;
            for (size_t ch = 0; ch < c; ++ch) {
                const bool x = rows[a * c + ch], y = rows[b * c + ch];
                inter += (x && y);
                uni += (x || y);
            }
            if (uni > 0) worst = std::max(worst, static_cast<double>(inter) / uni);
        }
    }
    return worst;
}

bool rows_distinct(const std::vector<uint8_t>& rows, size_t n, size_t c) {
    std::set<std::vector<uint8_t>> seen;
    for (size_t s = 0; s < n; ++s)
        if (!seen.insert({rows.begin() + s * c, rows.begin() + (s + 1) * c}).second) return false;
    return true;
}

// log(C choose k) >= log(n): can n distinct rows exist at all?
bool distinct_possible(size_t c, size_t k, size_t n) {
    double log_comb = 0.0;
    for (size_t i = 0; i < k; ++i)
        log_comb += std::log(static_cast<double>(c - i)) - std::log(static_cast<double>(i + 1));
    return log_comb >= std::log(static_cast<double>(n)) - 1e-9;
}

}  // namespace

MaskSet generate_masks(const MaskConfig& config) {
    config.validate();
    const size_t n = config.n_samples, c = config.width, k = config.keep_count();
    const bool want_distinct = distinct_possible(c, k, n);

    rng::Stream rs(config.seed, rng::Tag::masks, 0);
    constexpr int kRetryBudget = 64;

    std::vector<uint8_t> best;
    double best_overlap = 2.0;
    for (int attempt = 0; attempt < kRetryBudget; ++attempt) {
        auto rows = build_rows(config, rs);
        if (want_distinct && !rows_distinct(rows, n, c)) continue;
        const double overlap = n > 1 ? max_pairwise_jaccard(rows, n, c) : 0.0;
        if (overlap < best_overlap) {
            best_overlap = overlap;
            best = std::move(rows);
        }
        if (!config.max_overlap || best_overlap <= *config.max_overlap)
            return MaskSet(config, std::move(best), false);
    }
    if (best.empty())  // distinctness never achieved within budget; take what we have
        best = build_rows(config, rs);
    return MaskSet(config, std::move(best), config.max_overlap.has_value());
}

std::vector<double> apply_mask(std::span<const double> activations, const MaskSet& masks,
                               size_t sample_index) {
    auto r = masks.row(sample_index);
    if (activations.size() != r.size())
        throw std::invalid_argument("apply_mask: activation width mismatch");
    std::vector<double> out(activations.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = r[i] ? activations[i] : 0.0;
    return out;
}

}  // namespace uivim
