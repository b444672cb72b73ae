#pragma once

// Affinity map and binary focus mask over image tokens.
//
// The affinity of image token i is the cross-attention mass it places on the
// aesthetic prompt tokens, averaged over the selected layers. The mask keeps
// the tokens at or above the skip-ratio percentile of that map. The mask is
// built once, at a fixed sampler iteration, and reused unchanged afterwards.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "accelaes/core_math.hpp"
#include "accelaes/errors.hpp"
#include "accelaes/text_affinity.hpp"

namespace accelaes {

inline constexpr double kDefaultSkipRatio = 0.50;
inline constexpr int kDefaultMaskStep = 5;

// Head-averaged cross-attention weights of one layer, N image tokens x M text tokens.
struct CrossAttnRecord {
    int layer_id = 0;
    Matrix weights;

    // Largest deviation of a row sum from 1, or +inf if a weight is negative.
    double stochastic_error() const {
        double worst = 0.0;
        for (std::size_t i = 0; i < weights.rows(); ++i) {
            double s = 0.0;
            for (double w : weights.row(i)) {
                if (w < 0.0) return INFINITY;
                s += w;
            }
            worst = std::max(worst, std::abs(s - 1.0));
        }
        return worst;
    }
};

// Which capture layers feed the affinity map; empty ids means all of them.
struct LayerSet {
    std::vector<int> ids;

    static LayerSet all() { return {}; }
    bool selects(int id) const { return ids.empty() || std::find(ids.begin(), ids.end(), id) != ids.end(); }
};

struct AffinityMap {
    std::vector<double> values;
    std::size_t n_layers_used = 0;
    std::size_t aes_token_count = 0;
    bool fallback = false;
};

struct AesMask {
    std::vector<unsigned char> bits;
    std::vector<std::size_t> focus_indices;
    double percentile_p = 100.0 * kDefaultSkipRatio;
    int built_at_step = -1;
    std::vector<std::string> warnings;

    std::size_t size() const { return bits.size(); }
    std::size_t focus_count() const { return focus_indices.size(); }

    static AesMask from_bits(std::vector<unsigned char> bits, double p = 0.0, int step = -1) {
        AesMask m;
        m.bits = std::move(bits);
        for (std::size_t i = 0; i < m.bits.size(); ++i)
            if (m.bits[i]) m.focus_indices.push_back(i);
        m.percentile_p = p;
        m.built_at_step = step;
        return m;
    }

    static AesMask all_ones(std::size_t n, int step = -1) {
        return from_bits(std::vector<unsigned char>(n, 1), 0.0, step);
    }

    nlohmann::json to_json() const {
        return {{"N", bits.size()}, {"p", percentile_p}, {"built_at_step", built_at_step}, {"focus_indices", focus_indices}};
    }
};

namespace detail {

inline std::vector<const CrossAttnRecord*> select_layers(std::span<const CrossAttnRecord> records, const LayerSet& layers) {
    if (records.empty()) throw ContractError("affinity: no cross-attention records");
    std::vector<const CrossAttnRecord*> used;
    const std::size_t n = records.front().weights.rows();
    const std::size_t m = records.front().weights.cols();
    for (const auto& r : records) {
        if (r.weights.rows() != n || r.weights.cols() != m) {
            throw ShapeError("affinity: record shapes disagree (" + shape_str(r.weights) + " vs " +
                             std::to_string(n) + "x" + std::to_string(m) + ")");
        }
        if (layers.selects(r.layer_id)) used.push_back(&r);
    }
    if (used.empty()) throw ConfigError("affinity: layer selection matches no records");
    return used;
}

}  // namespace detail

// m[i] = (1/|L|) * sum over layers of sum over selected tokens j of A[i, j]
inline AffinityMap aggregate_affinity(std::span<const CrossAttnRecord> records, const LayerSet& layers,
                                      std::span<const std::size_t> selected_tokens) {
    const auto used = detail::select_layers(records, layers);
    if (selected_tokens.empty()) throw ContractError("aggregate_affinity: empty aesthetic token set");
    const std::size_t n = used.front()->weights.rows();
    const std::size_t m = used.front()->weights.cols();
    for (std::size_t j : selected_tokens)
        if (j >= m) throw ShapeError("aggregate_affinity: token index " + std::to_string(j) + " >= M=" + std::to_string(m));

    AffinityMap out;
    out.values.assign(n, 0.0);
    out.n_layers_used = used.size();
    out.aes_token_count = selected_tokens.size();
    for (const auto* rec : used) {
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t j : selected_tokens) s += rec->weights(i, j);
            out.values[i] += s;
        }
    }
    const double inv = 1.0 / static_cast<double>(used.size());
    for (double& v : out.values) v *= inv;
    return out;
}

// No-trigger path: every prompt token weighted 1/M.
inline AffinityMap fallback_affinity(std::span<const CrossAttnRecord> records, const LayerSet& layers) {
    const auto used = detail::select_layers(records, layers);
    const std::size_t m = used.front()->weights.cols();
    std::vector<std::size_t> all(m);
    for (std::size_t j = 0; j < m; ++j) all[j] = j;
    AffinityMap out = aggregate_affinity(records, layers, all);
    const double inv = 1.0 / static_cast<double>(m);
    for (double& v : out.values) v *= inv;
    out.fallback = true;
    return out;
}

// Threshold index into the ascending values: the smallest floor(N * skip_ratio)
// entries fall below it, so distinct values yield N - floor(N * skip_ratio)
// focus tokens. Ties at the threshold are all kept.
inline std::size_t percentile_rank(std::size_t n, double skip_ratio) {
    const auto below = static_cast<std::size_t>(std::floor(static_cast<double>(n) * skip_ratio));
    return std::min(below, n - 1);
}

inline AesMask binarize(const AffinityMap& map, double skip_ratio, int step = -1) {
    const std::size_t n = map.values.size();
    if (n < 2) throw ShapeError("binarize: need at least 2 tokens");
    if (!(skip_ratio > 0.0 && skip_ratio < 1.0)) throw ConfigError("binarize: skip_ratio must lie in (0, 1)");

    std::vector<double> sorted = map.values;
    std::sort(sorted.begin(), sorted.end());
    const double threshold = sorted[percentile_rank(n, skip_ratio)];

    std::vector<unsigned char> bits(n, 0);
    for (std::size_t i = 0; i < n; ++i) bits[i] = map.values[i] >= threshold ? 1 : 0;

    AesMask mask;
    if (sorted.front() == sorted.back()) {
        mask = AesMask::from_bits(std::vector<unsigned char>(n, 1));
        mask.warnings.push_back("affinity map is constant; all tokens marked focus");
    } else {
        mask = AesMask::from_bits(std::move(bits));
    }
    if (mask.focus_indices.empty()) {
        // unreachable with finite values, kept for NaN maps
        const auto best = static_cast<std::size_t>(std::max_element(map.values.begin(), map.values.end()) - map.values.begin());
        mask.bits[best] = 1;
        mask.focus_indices = {best};
        mask.warnings.push_back("threshold selected nothing; kept the max-affinity token");
    }
    mask.percentile_p = 100.0 * skip_ratio;
    mask.built_at_step = step;
    return mask;
}

struct MaskInputs {
    TokenAffinity affinity;
    double skip_ratio = kDefaultSkipRatio;
    LayerSet layers;
};

// One-shot mask: nothing before mask_step, built at mask_step, frozen after.
class MaskLifecycle {
public:
    explicit MaskLifecycle(int mask_step = kDefaultMaskStep) : mask_step_(mask_step) {
        if (mask_step < 0) throw ConfigError("mask_step must be >= 0");
    }

    int mask_step() const { return mask_step_; }
    bool needs_capture(int step) const { return step == mask_step_ && !mask_; }
    bool built() const { return mask_.has_value(); }
    const AesMask* mask() const { return mask_ ? &*mask_ : nullptr; }
    const AffinityMap* affinity() const { return affinity_ ? &*affinity_ : nullptr; }

    const AesMask* step(int step, std::span<const CrossAttnRecord> records, const MaskInputs& inputs) {
        if (step < mask_step_) return nullptr;
        if (step == mask_step_ && !mask_) {
            if (records.empty()) {
                throw LifecycleError("mask construction at step " + std::to_string(step) +
                                     " needs captured cross-attention from a dense pass");
            }
            affinity_ = inputs.affinity.triggered
                            ? aggregate_affinity(records, inputs.layers, inputs.affinity.selected)
                            : fallback_affinity(records, inputs.layers);
            mask_ = binarize(*affinity_, inputs.skip_ratio, step);
            return &*mask_;
        }
        if (!mask_) throw LifecycleError("mask requested at step " + std::to_string(step) + " but never built");
        return &*mask_;
    }

private:
    int mask_step_;
    std::optional<AffinityMap> affinity_;
    std::optional<AesMask> mask_;
};

}  // namespace accelaes
