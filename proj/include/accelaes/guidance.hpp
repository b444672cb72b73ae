#pragma once

// Classifier-free guidance with a per-token scale:
//   out[i] = uncond[i] + g[i] * (cond[i] - uncond[i]),  g[i] = g_bg + (g_aes - g_bg) * mask[i]
// With no mask, spatial guidance disabled, or g_aes == g_bg every token uses g_bg.

#include <cstddef>
#include <string>

#include "accelaes/aesmask.hpp"
#include "accelaes/core_math.hpp"
#include "accelaes/errors.hpp"

namespace accelaes {

struct GuidanceConfig {
    double g_bg = 4.0;
    double g_aes = 4.0;
    bool enabled_spatial = false;

    void validate() const {
        if (!(g_bg >= 1.0)) throw ConfigError("guidance: g_bg must be >= 1");
        if (!(g_aes >= g_bg)) throw ConfigError("guidance: g_aes must be >= g_bg");
    }
};

// Predictions are token-major (row i = token i).
inline Matrix apply_cfg(const Matrix& cond, const Matrix& uncond, const AesMask* mask, const GuidanceConfig& cfg) {
    if (!cond.same_shape(uncond)) throw ShapeError("apply_cfg: " + shape_str(cond) + " vs " + shape_str(uncond));
    const bool spatial = cfg.enabled_spatial && mask != nullptr;
    if (spatial && mask->size() != cond.rows()) {
        throw ShapeError("apply_cfg: mask length " + std::to_string(mask->size()) + " vs " + std::to_string(cond.rows()) + " tokens");
    }
    Matrix out(cond.rows(), cond.cols());
    for (std::size_t i = 0; i < cond.rows(); ++i) {
        const double g = spatial && mask->bits[i] ? cfg.g_aes : cfg.g_bg;
        auto c = cond.row(i);
        auto u = uncond.row(i);
        auto o = out.row(i);
        for (std::size_t k = 0; k < o.size(); ++k) o[k] = u[k] + g * (c[k] - u[k]);
    }
    return out;
}

}  // namespace accelaes
