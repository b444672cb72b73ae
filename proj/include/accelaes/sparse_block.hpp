#pragma once

// One pre-norm transformer block (self-attention, cross-attention, FFN) with a
// dense path and a focus-token sparse path.
//
// Hidden states are stored token-major: row i is token i, so a block input is
// an N x d matrix. In sparse mode only focus tokens issue queries; keys and
// values still come from every token, so each focus row is computed exactly as
// in the dense block. Background tokens keep their hidden state through the
// attention sublayers and receive the FFN activation cached at the last dense
// pass through this block.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "accelaes/aesmask.hpp"
#include "accelaes/core_math.hpp"
#include "accelaes/errors.hpp"

namespace accelaes {

enum class BlockMode { dense, sparse };

inline const char* to_string(BlockMode m) { return m == BlockMode::dense ? "dense" : "sparse"; }

struct AttentionWeights {
    Matrix wq;  // d x d
    Matrix wk;  // d_kv x d
    Matrix wv;  // d_kv x d
    Matrix wo;  // d x d
};

struct BlockWeights {
    std::size_t heads = 1;

    std::vector<double> ln1_gain, ln1_bias;
    std::vector<double> ln2_gain, ln2_bias;
    std::vector<double> ln3_gain, ln3_bias;

    AttentionWeights self_attn;
    AttentionWeights cross_attn;  // keys/values from the d_c-wide text condition

    Matrix ffn_in;  // d x hidden
    std::vector<double> ffn_in_bias;
    Matrix ffn_out;  // hidden x d
    std::vector<double> ffn_out_bias;

    std::size_t width() const { return self_attn.wq.rows(); }
    std::size_t text_width() const { return cross_attn.wk.rows(); }
    std::size_t ffn_hidden() const { return ffn_in.cols(); }
    std::size_t head_dim() const { return width() / heads; }

    void validate() const {
        const std::size_t d = width();
        auto need = [](bool ok, const char* what) {
            if (!ok) throw ShapeError(std::string("BlockWeights: ") + what);
        };
        need(heads >= 1 && d % heads == 0, "width not divisible by heads");
        for (const auto* v : {&ln1_gain, &ln1_bias, &ln2_gain, &ln2_bias, &ln3_gain, &ln3_bias})
            need(v->size() == d, "norm parameter length");
        need(self_attn.wq.rows() == d && self_attn.wq.cols() == d, "self W_Q");
        need(self_attn.wk.rows() == d && self_attn.wk.cols() == d, "self W_K");
        need(self_attn.wv.rows() == d && self_attn.wv.cols() == d, "self W_V");
        need(self_attn.wo.rows() == d && self_attn.wo.cols() == d, "self W_O");
        need(cross_attn.wq.rows() == d && cross_attn.wq.cols() == d, "cross W_Q");
        need(cross_attn.wk.cols() == d && cross_attn.wv.cols() == d, "cross W_K/W_V");
        need(cross_attn.wk.rows() == cross_attn.wv.rows(), "cross K/V input width");
        need(cross_attn.wo.rows() == d && cross_attn.wo.cols() == d, "cross W_O");
        need(ffn_in.rows() == d && ffn_out.cols() == d && ffn_out.rows() == ffn_in.cols(), "FFN shapes");
        need(ffn_in_bias.size() == ffn_in.cols() && ffn_out_bias.size() == d, "FFN bias");
    }
};

struct TokenPartition {
    std::vector<std::size_t> focus;       // ascending
    std::vector<std::size_t> background;  // ascending

    std::size_t size() const { return focus.size() + background.size(); }

    static TokenPartition all(std::size_t n) {
        TokenPartition p;
        p.focus.resize(n);
        std::iota(p.focus.begin(), p.focus.end(), std::size_t{0});
        return p;
    }

    static TokenPartition from_mask(const AesMask& mask) {
        TokenPartition p;
        for (std::size_t i = 0; i < mask.bits.size(); ++i) (mask.bits[i] ? p.focus : p.background).push_back(i);
        return p;
    }

    // Gathered layout: focus tokens first, then background. order()[k] is the
    // original index of gathered row k.
    std::vector<std::size_t> order() const {
        std::vector<std::size_t> o(focus);
        o.insert(o.end(), background.begin(), background.end());
        return o;
    }

    void validate(std::size_t n) const {
        if (size() != n) throw ShapeError("partition covers " + std::to_string(size()) + " of " + std::to_string(n) + " tokens");
        std::vector<unsigned char> seen(n, 0);
        for (std::size_t i : order()) {
            if (i >= n || seen[i]) throw ShapeError("partition is not a disjoint cover");
            seen[i] = 1;
        }
    }
};

struct FfnCache {
    Matrix activations;  // N x d FFN output from the last dense pass
    int last_full_step = -1;
    bool valid = false;
};

// Multi-head attention: queries from `query_in` rows, keys/values from every
// row of `kv_in`. Heads are concatenated and projected by W_O. If `capture` is
// non-null it receives the head-averaged attention weights (rows x kv tokens).
inline Matrix multi_head_attention(const Matrix& query_in, const Matrix& kv_in, const AttentionWeights& w,
                                   std::size_t heads, Matrix* capture = nullptr) {
    const Matrix q = matmul(query_in, w.wq);
    const Matrix k = matmul(kv_in, w.wk);
    const Matrix v = matmul(kv_in, w.wv);
    const std::size_t d = q.cols();
    const std::size_t dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Matrix concat(q.rows(), d);
    if (capture) *capture = Matrix(q.rows(), k.rows());
    for (std::size_t h = 0; h < heads; ++h) {
        const Matrix qh = column_block(q, h * dh, dh);
        const Matrix kh = column_block(k, h * dh, dh);
        const Matrix vh = column_block(v, h * dh, dh);
        Matrix scores = matmul_transposed(qh, kh);
        for (double& s : scores.data()) s *= scale;
        row_softmax_inplace(scores);
        set_column_block(concat, h * dh, matmul(scores, vh));
        if (capture) add_inplace(*capture, scores);
    }
    if (capture) {
        const double inv = 1.0 / static_cast<double>(heads);
        for (double& a : capture->data()) a *= inv;
    }
    return matmul(concat, w.wo);
}

// Self-attention outputs for the focus rows of `normed` (already layer-normed
// hidden states of all N tokens). Row r of the result belongs to token
// partition.focus[r].
inline Matrix sparse_attention(const Matrix& normed, const TokenPartition& partition, const BlockWeights& w) {
    if (partition.focus.empty()) throw ContractError("sparse_attention: empty focus set");
    if (normed.cols() != w.width()) throw ShapeError("sparse_attention: hidden width " + std::to_string(normed.cols()));
    return multi_head_attention(gather_rows(normed, partition.focus), normed, w.self_attn, w.heads);
}

inline Matrix feed_forward(const Matrix& normed, const BlockWeights& w) {
    Matrix h = matmul(normed, w.ffn_in);
    add_row_bias(h, w.ffn_in_bias);
    gelu_inplace(h);
    Matrix out = matmul(h, w.ffn_out);
    add_row_bias(out, w.ffn_out_bias);
    return out;
}

struct FfnOutput {
    Matrix focus;       // rows follow partition.focus
    Matrix background;  // rows follow partition.background
};

// FFN restricted to focus tokens; background rows come from the cache. With
// full_update the FFN runs on every token and refreshes the cache. `normed`
// holds all N normalized tokens on a full update and the focus rows otherwise.
inline FfnOutput sparse_ffn(const Matrix& normed, const TokenPartition& partition, FfnCache& cache, const BlockWeights& w,
                            bool full_update, int step = -1) {
    const std::size_t n = partition.size();
    if (full_update) {
        if (normed.rows() != n) throw ShapeError("sparse_ffn: full update needs all tokens");
        cache.activations = feed_forward(normed, w);
        cache.last_full_step = step;
        cache.valid = true;
        return {gather_rows(cache.activations, partition.focus), gather_rows(cache.activations, partition.background)};
    }
    if (!cache.valid) throw CacheError("sparse_ffn: background cache is empty; run a full update first");
    if (cache.activations.rows() != n || cache.activations.cols() != w.width()) {
        throw CacheError("sparse_ffn: cached activations are " + shape_str(cache.activations) + ", partition has " +
                         std::to_string(n) + " tokens");
    }
    if (normed.rows() != partition.focus.size()) throw ShapeError("sparse_ffn: expected focus rows only");
    return {feed_forward(normed, w), gather_rows(cache.activations, partition.background)};
}

// Full block. `text` is the M x d_c condition; when `capture` is non-null the
// head-averaged cross-attention weights (N x M) are written to it, which is
// only possible in dense mode.
inline Matrix run_block(const Matrix& hidden, const AesMask* mask, FfnCache& cache, const BlockWeights& w, BlockMode mode,
                        const Matrix& text, int step = -1, Matrix* capture = nullptr) {
    const std::size_t n = hidden.rows();
    if (hidden.cols() != w.width()) throw ShapeError("run_block: hidden width " + std::to_string(hidden.cols()));
    if (text.cols() != w.text_width()) throw ShapeError("run_block: text width " + std::to_string(text.cols()));

    if (mode == BlockMode::dense) {
        Matrix x = hidden;
        const Matrix n1 = layer_norm(x, w.ln1_gain, w.ln1_bias);
        add_inplace(x, multi_head_attention(n1, n1, w.self_attn, w.heads));
        const Matrix n2 = layer_norm(x, w.ln2_gain, w.ln2_bias);
        add_inplace(x, multi_head_attention(n2, text, w.cross_attn, w.heads, capture));
        const Matrix n3 = layer_norm(x, w.ln3_gain, w.ln3_bias);
        cache.activations = feed_forward(n3, w);
        cache.last_full_step = step;
        cache.valid = true;
        add_inplace(x, cache.activations);
        return x;
    }

    if (mask == nullptr) throw ContractError("run_block: sparse mode requires a mask");
    if (mask->size() != n) throw ShapeError("run_block: mask length " + std::to_string(mask->size()) + " vs " + std::to_string(n));
    if (capture != nullptr) throw ContractError("run_block: attention capture requires dense mode");
    const TokenPartition part = TokenPartition::from_mask(*mask);
    if (part.focus.empty()) throw ContractError("run_block: empty focus set");
    if (!cache.valid) throw CacheError("run_block: sparse mode requires a valid FFN cache");

    const Matrix n1 = layer_norm(hidden, w.ln1_gain, w.ln1_bias);
    Matrix xf = gather_rows(hidden, part.focus);
    add_inplace(xf, sparse_attention(n1, part, w));
    const Matrix n2 = layer_norm(xf, w.ln2_gain, w.ln2_bias);
    add_inplace(xf, multi_head_attention(n2, text, w.cross_attn, w.heads));
    const Matrix n3 = layer_norm(xf, w.ln3_gain, w.ln3_bias);
    FfnOutput ffn = sparse_ffn(n3, part, cache, w, false, step);
    add_inplace(xf, ffn.focus);

    Matrix xb = gather_rows(hidden, part.background);
    add_inplace(xb, ffn.background);

    Matrix out(n, hidden.cols());
    scatter_rows(out, xf, part.focus);
    scatter_rows(out, xb, part.background);
    return out;
}

// Analytic multiply-add count (2 FLOPs per MAC) for the matrix products of a
// block. Query-side terms scale with the number of query tokens, key/value
// projections with the full token count.
struct BlockDims {
    std::size_t tokens = 64;       // N
    std::size_t focus = 64;        // |I|, ignored in dense mode
    std::size_t width = 64;        // d
    std::size_t heads = 4;
    std::size_t text_tokens = 16;  // M
    std::size_t text_width = 32;   // d_c
    std::size_t ffn_hidden = 256;
};

struct AttentionFlops {
    std::uint64_t q_proj = 0, k_proj = 0, v_proj = 0, scores = 0, mix = 0, out_proj = 0;

    std::uint64_t total() const { return q_proj + k_proj + v_proj + scores + mix + out_proj; }
};

struct BlockFlops {
    AttentionFlops self_attn;
    AttentionFlops cross_attn;
    std::uint64_t ffn = 0;

    std::uint64_t attention() const { return self_attn.total() + cross_attn.total(); }
    std::uint64_t total() const { return attention() + ffn; }
};

inline BlockFlops block_flops(const BlockDims& dims, BlockMode mode) {
    if (dims.focus > dims.tokens) throw ConfigError("block_flops: focus exceeds token count");
    using u64 = std::uint64_t;
    const u64 n = dims.tokens, d = dims.width, m = dims.text_tokens, dc = dims.text_width, hid = dims.ffn_hidden;
    const u64 q = mode == BlockMode::dense ? n : dims.focus;

    BlockFlops f;
    f.self_attn = {2 * q * d * d, 2 * n * d * d, 2 * n * d * d, 2 * q * n * d, 2 * q * n * d, 2 * q * d * d};
    f.cross_attn = {2 * q * d * d, 2 * m * dc * d, 2 * m * dc * d, 2 * q * m * d, 2 * q * m * d, 2 * q * d * d};
    f.ffn = 2 * q * d * hid + 2 * q * hid * d;
    return f;
}

}  // namespace accelaes
