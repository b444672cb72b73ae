#pragma once

// Euler sampling loop with the acceleration stack wired in:
//   schedule lookup -> full forward (conditional + unconditional pass) or
//   cached extrapolation -> spatial guidance -> Euler update.
// The focus mask is built once from the conditional pass's cross-attention at
// mask_step; later full forwards run the sparse block path with it.

#include <concepts>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "accelaes/aesmask.hpp"
#include "accelaes/guidance.hpp"
#include "accelaes/sparse_block.hpp"
#include "accelaes/stepcache.hpp"
#include "accelaes/toy_dit.hpp"

namespace accelaes {

struct ForwardArgs {
    const LatentTokens& z;
    const TextCondition& cond;
    double t;
    int step;
    BlockMode mode;
    const AesMask* mask;
    BlockCaches& caches;
    bool capture;
};

template <class D>
concept Denoiser = requires(D& d, const ForwardArgs& args, BlockMode mode, std::size_t n) {
    { d.forward(args) } -> std::same_as<ForwardResult>;
    { d.flops(mode, n, n) } -> std::same_as<ForwardFlops>;
};

class DitDenoiser {
public:
    explicit DitDenoiser(const Model& model) : model_(&model) {}

    ForwardResult forward(const ForwardArgs& a) {
        return accelaes::forward(*model_, a.z, a.cond, a.t, a.mode, a.mask, a.caches, a.capture, a.step);
    }

    ForwardFlops flops(BlockMode mode, std::size_t focus, std::size_t text_tokens) const {
        return forward_flops(model_->spec, mode, focus, text_tokens);
    }

private:
    const Model* model_;
};

struct EngineConfig {
    StepCacheConfig cache;  // cache.total_steps is T
    GuidanceConfig guidance;
    bool cfg_two_pass = true;
    bool sparse = true;  // focus-token block path after the mask exists
    int mask_step = kDefaultMaskStep;
    MaskInputs mask_inputs;
    std::optional<AesMask> mask_override;  // replaces the constructed mask from mask_step on
    bool record_predictions = false;

    int steps() const { return cache.total_steps; }
    bool needs_mask() const { return sparse || guidance.enabled_spatial || mask_override.has_value(); }
    bool accelerated() const { return sparse || cache.caching_enabled(); }

    void validate() const {
        cache.validate();
        guidance.validate();
        if (needs_mask() && (mask_step < 0 || mask_step >= steps())) {
            throw LifecycleError("mask_step " + std::to_string(mask_step) + " must lie in [0, T) with T=" + std::to_string(steps()));
        }
        if (needs_mask() && !mask_override && !(mask_inputs.skip_ratio > 0.0 && mask_inputs.skip_ratio < 1.0)) {
            throw ConfigError("skip_ratio must lie in (0, 1)");
        }
    }
};

// FLOP ledger for one run; actual() is the exact sum of the component fields.
struct FlopLedger {
    std::uint64_t dense_equivalent = 0;
    std::uint64_t attention = 0;
    std::uint64_t ffn = 0;
    std::uint64_t io = 0;
    std::uint64_t guidance = 0;
    std::uint64_t extrapolation = 0;

    std::uint64_t actual() const { return attention + ffn + io + guidance + extrapolation; }
    double speedup() const { return actual() == 0 ? 1.0 : static_cast<double>(dense_equivalent) / static_cast<double>(actual()); }

    void add(const ForwardFlops& f) {
        attention += f.attention;
        ffn += f.ffn;
        io += f.io;
    }
};

struct SampleResult {
    LatentTokens final_latent;
    StepSchedule schedule;
    FlopLedger flops;
    std::optional<AesMask> mask;
    std::optional<AffinityMap> affinity;
    int model_forwards = 0;
    int sparse_forwards = 0;
    int extrapolations = 0;
    std::vector<Matrix> predictions;  // per step, when recorded
};

inline std::uint64_t guidance_flops(std::size_t elements) { return 3 * static_cast<std::uint64_t>(elements); }

template <Denoiser D>
SampleResult sample(D& denoiser, const LatentTokens& init_noise, const TextCondition& cond, const TextCondition& uncond,
                    const EngineConfig& cfg) {
    cfg.validate();
    const int steps = cfg.steps();
    const std::size_t n = init_noise.tokens();
    const std::size_t elems = init_noise.values.size();

    std::vector<int> forced;
    if (cfg.needs_mask()) forced.push_back(cfg.mask_step);
    StepCache cache(cfg.cache, plan_schedule(cfg.cache, forced));
    MaskLifecycle lifecycle(cfg.needs_mask() ? cfg.mask_step : 0);

    SampleResult res;
    res.schedule = cache.schedule();
    res.final_latent = init_noise;
    LatentTokens& z = res.final_latent;
    BlockCaches cond_caches, uncond_caches;

    const std::uint64_t dense_step = denoiser.flops(BlockMode::dense, n, cond.tokens()).total() +
                                     (cfg.cfg_two_pass ? denoiser.flops(BlockMode::dense, n, uncond.tokens()).total() + guidance_flops(elems) : 0);
    res.flops.dense_equivalent = dense_step * static_cast<std::uint64_t>(steps);

    const double dt = -1.0 / static_cast<double>(steps);
    for (int s = 0; s < steps; ++s) {
        const double t = 1.0 - static_cast<double>(s) / static_cast<double>(steps);
        const AesMask* mask = nullptr;
        if (cfg.needs_mask() && s >= cfg.mask_step) {
            if (cfg.mask_override) {
                mask = &*cfg.mask_override;
            } else if (lifecycle.built()) {
                mask = lifecycle.mask();
            }
        }

        auto full_forward = [&]() -> Matrix {
            const bool capture = cfg.needs_mask() && !cfg.mask_override && lifecycle.needs_capture(s);
            const BlockMode mode = cfg.sparse && mask != nullptr && s > cfg.mask_step ? BlockMode::sparse : BlockMode::dense;
            const std::size_t focus = mode == BlockMode::sparse ? mask->focus_count() : n;

            ForwardResult c = denoiser.forward(ForwardArgs{z, cond, t, s, mode, mask, cond_caches, capture});
            res.flops.add(denoiser.flops(mode, focus, cond.tokens()));
            ++res.model_forwards;
            if (mode == BlockMode::sparse) ++res.sparse_forwards;
            if (capture) {
                mask = lifecycle.step(s, c.attention, cfg.mask_inputs);
                res.affinity = *lifecycle.affinity();
            }
            if (!cfg.cfg_two_pass) return std::move(c.prediction);

            ForwardResult u = denoiser.forward(ForwardArgs{z, uncond, t, s, mode, mask, uncond_caches, false});
            res.flops.add(denoiser.flops(mode, focus, uncond.tokens()));
            ++res.model_forwards;
            if (mode == BlockMode::sparse) ++res.sparse_forwards;
            res.flops.guidance += guidance_flops(elems);
            return apply_cfg(c.prediction, u.prediction, mask, cfg.guidance);
        };

        const bool full = res.schedule.is_full(s);
        Matrix eps = cache.step_or_skip(s, full_forward);
        if (!full) {
            ++res.extrapolations;
            res.flops.extrapolation += kExtrapolateFlopsPerElement * elems;
        }
        if (!eps.same_shape(z.values)) throw ShapeError("sampler: prediction shape " + shape_str(eps));
        for (std::size_t i = 0; i < elems; ++i) z.values.data()[i] += dt * eps.data()[i];
        if (cfg.record_predictions) res.predictions.push_back(std::move(eps));
    }
    if (cfg.mask_override) {
        res.mask = cfg.mask_override;
    } else if (lifecycle.built()) {
        res.mask = *lifecycle.mask();
    }
    return res;
}

}  // namespace accelaes
