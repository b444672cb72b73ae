#pragma once

// Desk-scale diffusion transformer used as the reference denoiser. Weights are
// drawn from a seeded stream, so a ModelSpec fully determines the model.
//
// Token layout: LatentTokens and predictions hold an N x d matrix whose row i
// is spatial token i (grid position i / w, i % w). The binary latent dump
// writes the same values channel-major (d x N).

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "accelaes/aesmask.hpp"
#include "accelaes/core_math.hpp"
#include "accelaes/errors.hpp"
#include "accelaes/random.hpp"
#include "accelaes/sparse_block.hpp"
#include "accelaes/text_affinity.hpp"

namespace accelaes {

struct ModelSpec {
    std::size_t depth = 4;
    std::size_t width = 64;       // d
    std::size_t text_width = 32;  // d_c
    std::size_t heads = 4;
    std::size_t grid_h = 8;
    std::size_t grid_w = 8;
    std::size_t ffn_mult = 4;
    std::size_t max_text_tokens = 16;
    std::uint64_t seed = 0;

    std::size_t tokens() const { return grid_h * grid_w; }
    std::size_t head_dim() const { return width / heads; }

    void validate() const {
        if (depth < 1) throw ConfigError("model: depth must be >= 1");
        if (heads < 1 || width % heads != 0) throw ConfigError("model: width must be divisible by heads");
        if (width < 2 || width % 2 != 0) throw ConfigError("model: width must be even and >= 2");
        if (text_width < 2) throw ConfigError("model: text_width must be >= 2");
        if (grid_h < 1 || grid_w < 1) throw ConfigError("model: empty token grid");
        if (ffn_mult < 1) throw ConfigError("model: ffn_mult must be >= 1");
        if (max_text_tokens < 1) throw ConfigError("model: max_text_tokens must be >= 1");
    }

    bool operator==(const ModelSpec&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelSpec& s) {
    j = {{"depth", s.depth},   {"d", s.width},           {"d_c", s.text_width},
         {"heads", s.heads},   {"h", s.grid_h},          {"w", s.grid_w},
         {"ffn_mult", s.ffn_mult}, {"max_text_tokens", s.max_text_tokens}, {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, ModelSpec& s) {
    ModelSpec d;
    s.depth = j.value("depth", d.depth);
    s.width = j.value("d", d.width);
    s.text_width = j.value("d_c", d.text_width);
    s.heads = j.value("heads", d.heads);
    s.grid_h = j.value("h", d.grid_h);
    s.grid_w = j.value("w", d.grid_w);
    s.ffn_mult = j.value("ffn_mult", d.ffn_mult);
    s.max_text_tokens = j.value("max_text_tokens", d.max_text_tokens);
    s.seed = j.value("seed", d.seed);
}

struct LatentTokens {
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;
    Matrix values;  // N x d

    std::size_t tokens() const { return values.rows(); }
    std::size_t width() const { return values.cols(); }

    static LatentTokens zeros(const ModelSpec& s) { return {s.grid_h, s.grid_w, Matrix(s.tokens(), s.width)}; }

    static LatentTokens noise(const ModelSpec& s, std::uint64_t seed) {
        LatentTokens z = zeros(s);
        Rng rng(mix_seed(seed, 0x6c6174656e74ULL));
        for (double& v : z.values.data()) v = rng.normal();
        return z;
    }
};

struct TextCondition {
    Matrix embeddings;  // M x d_c
    PromptTokens prompt;

    std::size_t tokens() const { return embeddings.rows(); }
};

// Cross-attention keys for a prompt: one synthetic embedding per word, scaled
// to unit-variance entries. Prompts longer than `max_tokens` are truncated.
inline TextCondition make_text_condition(const PromptTokens& prompt, std::size_t text_width, std::size_t max_tokens,
                                         std::uint64_t seed) {
    TextCondition c;
    c.prompt = prompt;
    if (c.prompt.tokens.size() > max_tokens) c.prompt.tokens.resize(max_tokens);
    if (c.prompt.tokens.empty()) throw ConfigError("text condition: prompt has no tokens");
    c.embeddings = Matrix(c.prompt.size(), text_width);
    const double scale = std::sqrt(static_cast<double>(text_width));
    for (std::size_t j = 0; j < c.prompt.size(); ++j) {
        const auto v = synthetic_embedding(c.prompt.tokens[j], text_width, mix_seed(seed, 0x74657874ULL));
        for (std::size_t k = 0; k < text_width; ++k) c.embeddings(j, k) = v[k] * scale;
    }
    return c;
}

// Unconditional branch: a single null token.
inline TextCondition null_condition(std::size_t text_width, std::uint64_t seed) {
    return make_text_condition(PromptTokens{{"<null>"}}, text_width, 1, seed);
}

inline std::vector<double> timestep_embedding(double t, std::size_t dim) {
    std::vector<double> e(dim);
    const std::size_t half = dim / 2;
    for (std::size_t k = 0; k < half; ++k) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
        e[k] = std::sin(1000.0 * t * freq);
        e[half + k] = std::cos(1000.0 * t * freq);
    }
    return e;
}

struct Model {
    ModelSpec spec;
    Matrix in_proj;  // d x d
    std::vector<double> in_bias;
    Matrix pos_embed;  // N x d
    Matrix time_proj;  // d x d
    std::vector<BlockWeights> blocks;
    std::vector<double> final_gain, final_bias;
    Matrix out_proj;  // d x d
    std::vector<double> out_bias;
};

namespace detail {

inline Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale) {
    Matrix m(rows, cols);
    for (double& v : m.data()) v = scale * rng.normal();
    return m;
}

inline std::vector<double> random_vector(Rng& rng, std::size_t n, double scale) {
    std::vector<double> v(n);
    for (double& x : v) x = scale * rng.normal();
    return v;
}

inline double fan_in_scale(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

}  // namespace detail

inline Model build_model(const ModelSpec& spec) {
    spec.validate();
    using detail::fan_in_scale;
    using detail::random_matrix;
    using detail::random_vector;
    const std::size_t d = spec.width, dc = spec.text_width, hid = spec.ffn_mult * spec.width;
    Rng rng(mix_seed(spec.seed, 0x6d6f64656cULL));

    Model m;
    m.spec = spec;
    m.in_proj = random_matrix(rng, d, d, fan_in_scale(d));
    m.in_bias = random_vector(rng, d, 0.02);
    m.pos_embed = random_matrix(rng, spec.tokens(), d, 0.5);
    m.time_proj = random_matrix(rng, d, d, fan_in_scale(d));
    for (std::size_t b = 0; b < spec.depth; ++b) {
        BlockWeights w;
        w.heads = spec.heads;
        w.ln1_gain.assign(d, 1.0);
        w.ln1_bias.assign(d, 0.0);
        w.ln2_gain.assign(d, 1.0);
        w.ln2_bias.assign(d, 0.0);
        w.ln3_gain.assign(d, 1.0);
        w.ln3_bias.assign(d, 0.0);
        // residual branches are down-scaled so the stack stays well conditioned
        const double branch = 0.5;
        w.self_attn = {random_matrix(rng, d, d, fan_in_scale(d)), random_matrix(rng, d, d, fan_in_scale(d)),
                       random_matrix(rng, d, d, fan_in_scale(d)), random_matrix(rng, d, d, branch * fan_in_scale(d))};
        w.cross_attn = {random_matrix(rng, d, d, fan_in_scale(d)), random_matrix(rng, dc, d, fan_in_scale(dc)),
                        random_matrix(rng, dc, d, fan_in_scale(dc)), random_matrix(rng, d, d, branch * fan_in_scale(d))};
        w.ffn_in = random_matrix(rng, d, hid, fan_in_scale(d));
        w.ffn_in_bias = random_vector(rng, hid, 0.02);
        w.ffn_out = random_matrix(rng, hid, d, branch * fan_in_scale(hid));
        w.ffn_out_bias = random_vector(rng, d, 0.02);
        w.validate();
        m.blocks.push_back(std::move(w));
    }
    m.final_gain.assign(d, 1.0);
    m.final_bias.assign(d, 0.0);
    m.out_proj = random_matrix(rng, d, d, fan_in_scale(d));
    m.out_bias = random_vector(rng, d, 0.02);
    return m;
}

struct ForwardResult {
    Matrix prediction;                        // N x d
    std::vector<CrossAttnRecord> attention;   // one per block when captured
};

// Per-sample, per-conditioning FFN caches, one per block.
using BlockCaches = std::vector<FfnCache>;

// Head-averaged cross-attention is captured from every block when requested;
// capture forces nothing, the caller must pass dense mode.
inline ForwardResult forward(const Model& model, const LatentTokens& z, const TextCondition& cond, double t, BlockMode mode,
                             const AesMask* mask, BlockCaches& caches, bool capture_attention, int step = -1) {
    const ModelSpec& s = model.spec;
    if (z.tokens() != s.tokens() || z.width() != s.width) {
        throw ShapeError("forward: latent is " + shape_str(z.values) + ", model expects " + std::to_string(s.tokens()) + "x" +
                         std::to_string(s.width));
    }
    if (cond.embeddings.cols() != s.text_width) throw ShapeError("forward: text width mismatch");
    if (capture_attention && mode != BlockMode::dense) throw ContractError("forward: attention capture requires dense mode");
    if (caches.size() != s.depth) caches.resize(s.depth);

    Matrix h = matmul(z.values, model.in_proj);
    add_row_bias(h, model.in_bias);
    add_inplace(h, model.pos_embed);
    const Matrix temb(1, s.width, timestep_embedding(t, s.width));
    const Matrix tvec = matmul(temb, model.time_proj);
    add_row_bias(h, tvec.row(0));

    ForwardResult out;
    for (std::size_t b = 0; b < s.depth; ++b) {
        Matrix captured;
        h = run_block(h, mask, caches[b], model.blocks[b], mode, cond.embeddings, step, capture_attention ? &captured : nullptr);
        if (capture_attention) out.attention.push_back({static_cast<int>(b), std::move(captured)});
    }
    const Matrix hn = layer_norm(h, model.final_gain, model.final_bias);
    out.prediction = matmul(hn, model.out_proj);
    add_row_bias(out.prediction, model.out_bias);
    return out;
}

struct ForwardFlops {
    std::uint64_t attention = 0;
    std::uint64_t ffn = 0;
    std::uint64_t io = 0;  // input, time and output projections

    std::uint64_t total() const { return attention + ffn + io; }
};

inline ForwardFlops forward_flops(const ModelSpec& s, BlockMode mode, std::size_t focus, std::size_t text_tokens) {
    const std::uint64_t n = s.tokens(), d = s.width;
    BlockDims dims{s.tokens(), mode == BlockMode::dense ? s.tokens() : focus, s.width, s.heads, text_tokens, s.text_width,
                   s.ffn_mult * s.width};
    const BlockFlops bf = block_flops(dims, mode);
    ForwardFlops f;
    f.attention = bf.attention() * s.depth;
    f.ffn = bf.ffn * s.depth;
    f.io = 2 * n * d * d + 2 * d * d + 2 * n * d * d;
    return f;
}

// Fraction of interior grid cells whose gradient magnitude exceeds
// `threshold`. Per channel the gradient uses forward differences to the right
// and lower neighbours inside the cell's 3x3 window; magnitudes are averaged
// over channels.
inline double edge_density(const Matrix& grid, std::size_t h, std::size_t w, double threshold) {
    if (h < 3 || w < 3) throw ShapeError("edge_density: grid must be at least 3x3");
    if (grid.rows() != h * w) throw ShapeError("edge_density: grid has " + std::to_string(grid.rows()) + " cells, expected " + std::to_string(h * w));
    const std::size_t channels = grid.cols();
    if (channels == 0) throw ShapeError("edge_density: no channels");
    std::size_t hits = 0, total = 0;
    for (std::size_t y = 1; y + 1 < h; ++y) {
        for (std::size_t x = 1; x + 1 < w; ++x) {
            const auto here = grid.row(y * w + x);
            const auto right = grid.row(y * w + x + 1);
            const auto down = grid.row((y + 1) * w + x);
            double mag = 0.0;
            for (std::size_t c = 0; c < channels; ++c) {
                const double gx = right[c] - here[c];
                const double gy = down[c] - here[c];
                mag += std::sqrt(gx * gx + gy * gy);
            }
            mag /= static_cast<double>(channels);
            ++total;
            if (mag > threshold) ++hits;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(total);
}

inline double edge_density(const LatentTokens& z, double threshold) {
    return edge_density(z.values, z.grid_h, z.grid_w, threshold);
}

// Latent dump: 16-byte little-endian header {magic "AAEL", d, h, w} (uint32)
// followed by d*h*w float64 values, channel-major.
inline constexpr std::array<char, 4> kLatentMagic{'A', 'A', 'E', 'L'};

namespace detail {

template <class T>
void put_le(std::ostream& out, T v) {
    std::array<char, sizeof(T)> b;
    std::memcpy(b.data(), &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
    out.write(b.data(), sizeof(T));
}

template <class T>
T get_le(std::istream& in) {
    std::array<char, sizeof(T)> b;
    if (!in.read(b.data(), sizeof(T))) throw FormatError("latent dump: truncated");
    if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
    T v;
    std::memcpy(&v, b.data(), sizeof(T));
    return v;
}

}  // namespace detail

inline void write_latent(std::ostream& out, const LatentTokens& z) {
    out.write(kLatentMagic.data(), 4);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(z.width()));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(z.grid_h));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(z.grid_w));
    for (std::size_t c = 0; c < z.width(); ++c)
        for (std::size_t i = 0; i < z.tokens(); ++i) detail::put_le<double>(out, z.values(i, c));
}

inline LatentTokens read_latent(std::istream& in) {
    std::array<char, 4> magic{};
    if (!in.read(magic.data(), 4) || magic != kLatentMagic) throw FormatError("latent dump: bad magic");
    const auto d = detail::get_le<std::uint32_t>(in);
    const auto h = detail::get_le<std::uint32_t>(in);
    const auto w = detail::get_le<std::uint32_t>(in);
    LatentTokens z{h, w, Matrix(std::size_t{h} * w, d)};
    for (std::size_t c = 0; c < d; ++c)
        for (std::size_t i = 0; i < z.tokens(); ++i) z.values(i, c) = detail::get_le<double>(in);
    return z;
}

inline void save_latent(const std::string& path, const LatentTokens& z) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot write latent dump: " + path);
    write_latent(f, z);
}

inline LatentTokens load_latent(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot open latent dump: " + path);
    return read_latent(f);
}

}  // namespace accelaes
