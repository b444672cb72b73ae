#include <gtest/gtest.h>

#include "accelaes/sparse_block.hpp"
#include "support/oracles.hpp"

using namespace accelaes;

namespace {

constexpr std::size_t kD = 16, kHeads = 4, kDc = 8, kHidden = 32;

struct Fixture {
    BlockWeights w = oracle::random_block(41, kD, kHeads, kDc, kHidden);
    Rng rng{42};
    Matrix text = oracle::random_matrix(rng, 5, kDc);
};

}  // namespace

TEST(Partition, CoverAndOrder) {
    const auto p = TokenPartition::from_mask(AesMask::from_bits({0, 1, 0, 1, 1}));
    EXPECT_EQ(p.focus, (std::vector<std::size_t>{1, 3, 4}));
    EXPECT_EQ(p.background, (std::vector<std::size_t>{0, 2}));
    EXPECT_NO_THROW(p.validate(5));
    EXPECT_THROW(p.validate(6), ShapeError);
    TokenPartition bad{{0, 1}, {1}};
    EXPECT_THROW(bad.validate(3), ShapeError);
    Rng rng(43);
    const Matrix m = oracle::random_matrix(rng, 5, 3);
    Matrix back(5, 3);
    const auto order = p.order();
    scatter_rows(back, gather_rows(m, order), order);
    EXPECT_EQ(back, m);
}

TEST(SparseAttention, AllFocusEqualsDense) {
    Fixture f;
    const Matrix x = oracle::random_matrix(f.rng, 12, kD);
    const Matrix dense = multi_head_attention(x, x, f.w.self_attn, kHeads);
    const Matrix sparse = sparse_attention(x, TokenPartition::all(12), f.w);
    EXPECT_EQ(sparse, dense);
    EXPECT_LE(max_abs_diff(dense, oracle::dense_attention(x, x, f.w.self_attn, kHeads)), 1e-12);
}

TEST(SparseAttention, SingleFocusRowExact) {
    Fixture f;
    const Matrix x = oracle::random_matrix(f.rng, 12, kD);
    const Matrix dense = multi_head_attention(x, x, f.w.self_attn, kHeads);
    for (std::size_t i = 0; i < 12; ++i) {
        std::vector<unsigned char> bits(12, 0);
        bits[i] = 1;
        const Matrix row = sparse_attention(x, TokenPartition::from_mask(AesMask::from_bits(bits)), f.w);
        ASSERT_EQ(row.rows(), 1u);
        for (std::size_t c = 0; c < kD; ++c) ASSERT_EQ(row(0, c), dense(i, c)) << i;
    }
}

TEST(SparseAttention, RandomPartitionsMatchOracleRows) {
    Fixture f;
    for (int trial = 0; trial < 50; ++trial) {
        const Matrix x = oracle::random_matrix(f.rng, 16, kD);
        const auto part = oracle::random_partition(f.rng, 16);
        const Matrix ref = oracle::dense_attention(x, x, f.w.self_attn, kHeads);
        const Matrix got = sparse_attention(x, part, f.w);
        for (std::size_t r = 0; r < part.focus.size(); ++r)
            for (std::size_t c = 0; c < kD; ++c) ASSERT_NEAR(got(r, c), ref(part.focus[r], c), 1e-9);
    }
}

TEST(SparseAttention, EmptyFocusAndWidthErrors) {
    Fixture f;
    const Matrix x(4, kD);
    EXPECT_THROW(sparse_attention(x, TokenPartition{{}, {0, 1, 2, 3}}, f.w), ContractError);
    EXPECT_THROW(sparse_attention(Matrix(4, kD + 1), TokenPartition::all(4), f.w), ShapeError);
}

TEST(Capture, HeadAveragedRowsAreStochastic) {
    Fixture f;
    const Matrix x = oracle::random_matrix(f.rng, 10, kD, 3.0);
    Matrix cap;
    multi_head_attention(x, f.text, f.w.cross_attn, kHeads, &cap);
    ASSERT_EQ(cap.rows(), 10u);
    ASSERT_EQ(cap.cols(), 5u);
    EXPECT_LE((CrossAttnRecord{0, cap}.stochastic_error()), 1e-12);
}

TEST(SparseFfn, FullUpdateThenCachedBackground) {
    Fixture f;
    const Matrix x = oracle::random_matrix(f.rng, 8, kD);
    const auto part = TokenPartition::from_mask(AesMask::from_bits({1, 0, 0, 1, 0, 1, 0, 0}));
    FfnCache cache;
    EXPECT_THROW(sparse_ffn(gather_rows(x, part.focus), part, cache, f.w, false), CacheError);
    const FfnOutput full = sparse_ffn(x, part, cache, f.w, true, 3);
    EXPECT_TRUE(cache.valid);
    EXPECT_EQ(cache.last_full_step, 3);
    EXPECT_EQ(full.focus, gather_rows(feed_forward(x, f.w), part.focus));

    // replay: several sparse steps on fresh focus inputs never touch the background rows
    for (int step = 4; step < 8; ++step) {
        const Matrix xf = oracle::random_matrix(f.rng, part.focus.size(), kD);
        const FfnOutput out = sparse_ffn(xf, part, cache, f.w, false, step);
        ASSERT_EQ(out.background, full.background);
        ASSERT_EQ(out.focus, feed_forward(xf, f.w));
        ASSERT_EQ(cache.last_full_step, 3);
    }
}

TEST(SparseFfn, AllFocusEqualsDense) {
    Fixture f;
    const Matrix x = oracle::random_matrix(f.rng, 8, kD);
    FfnCache cache;
    sparse_ffn(x, TokenPartition::all(8), cache, f.w, true);
    EXPECT_EQ(sparse_ffn(x, TokenPartition::all(8), cache, f.w, false).focus, feed_forward(x, f.w));
}

TEST(SparseFfn, ShapeMismatchIsCacheError) {
    Fixture f;
    FfnCache cache;
    sparse_ffn(oracle::random_matrix(f.rng, 8, kD), TokenPartition::all(8), cache, f.w, true);
    EXPECT_THROW(sparse_ffn(Matrix(9, kD), TokenPartition::all(9), cache, f.w, false), CacheError);
}

TEST(RunBlock, DenseIsDeterministic) {
    Fixture f;
    const Matrix x = oracle::random_matrix(f.rng, 12, kD);
    FfnCache c1, c2;
    EXPECT_EQ(run_block(x, nullptr, c1, f.w, BlockMode::dense, f.text), run_block(x, nullptr, c2, f.w, BlockMode::dense, f.text));
    EXPECT_TRUE(c1.valid);
}

TEST(RunBlock, AllOnesSparseMatchesDenseExactly) {
    Fixture f;
    const Matrix x = oracle::random_matrix(f.rng, 12, kD);
    FfnCache cache;
    const Matrix dense = run_block(x, nullptr, cache, f.w, BlockMode::dense, f.text);
    const AesMask ones = AesMask::all_ones(12);
    const Matrix sparse = run_block(x, &ones, cache, f.w, BlockMode::sparse, f.text);
    EXPECT_EQ(sparse, dense);
}

TEST(RunBlock, SparseFocusRowsMatchDenseAndBackgroundUsesCache) {
    Fixture f;
    const Matrix x0 = oracle::random_matrix(f.rng, 12, kD);
    FfnCache cache;
    run_block(x0, nullptr, cache, f.w, BlockMode::dense, f.text, 0);
    const Matrix cached = cache.activations;
    const Matrix x1 = oracle::random_matrix(f.rng, 12, kD);
    const AesMask mask = AesMask::from_bits({1, 1, 0, 0, 1, 0, 1, 0, 0, 0, 1, 1});
    const Matrix out = run_block(x1, &mask, cache, f.w, BlockMode::sparse, f.text, 1);
    FfnCache scratch;
    const Matrix dense = run_block(x1, nullptr, scratch, f.w, BlockMode::dense, f.text, 1);
    ASSERT_EQ(out.rows(), 12u);
    ASSERT_EQ(out.cols(), kD);
    for (std::size_t i = 0; i < 12; ++i) {
        for (std::size_t c = 0; c < kD; ++c) {
            if (mask.bits[i]) {
                ASSERT_EQ(out(i, c), dense(i, c));
            } else {
                ASSERT_EQ(out(i, c), x1(i, c) + cached(i, c));
            }
        }
    }
    EXPECT_EQ(cache.activations, cached);
}

TEST(RunBlock, SparseContractErrors) {
    Fixture f;
    const Matrix x = oracle::random_matrix(f.rng, 4, kD);
    FfnCache cache;
    const AesMask ones = AesMask::all_ones(4);
    EXPECT_THROW(run_block(x, nullptr, cache, f.w, BlockMode::sparse, f.text), ContractError);
    EXPECT_THROW(run_block(x, &ones, cache, f.w, BlockMode::sparse, f.text), CacheError);
    run_block(x, nullptr, cache, f.w, BlockMode::dense, f.text);
    Matrix cap;
    EXPECT_THROW(run_block(x, &ones, cache, f.w, BlockMode::sparse, f.text, 0, &cap), ContractError);
    const AesMask wrong = AesMask::all_ones(5);
    EXPECT_THROW(run_block(x, &wrong, cache, f.w, BlockMode::sparse, f.text), ShapeError);
    EXPECT_THROW(run_block(x, nullptr, cache, f.w, BlockMode::dense, Matrix(2, kDc + 1)), ShapeError);
}

TEST(RunBlockProperty, ShapePreserved) {
    Rng rng(44);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t heads = 1 + rng.below(4), d = heads * (1 + rng.below(6)), n = 2 + rng.below(20);
        const BlockWeights w = oracle::random_block(rng.next(), d, heads, 3, 2 * d);
        const Matrix x = oracle::random_matrix(rng, n, d), text = oracle::random_matrix(rng, 2, 3);
        FfnCache cache;
        ASSERT_EQ(run_block(x, nullptr, cache, w, BlockMode::dense, text).rows(), n);
        const auto part = oracle::random_partition(rng, n);
        std::vector<unsigned char> bits(n, 0);
        for (std::size_t i : part.focus) bits[i] = 1;
        const AesMask m = AesMask::from_bits(bits);
        const Matrix y = run_block(x, &m, cache, w, BlockMode::sparse, text);
        ASSERT_EQ(y.rows(), n);
        ASSERT_EQ(y.cols(), d);
    }
}

TEST(BlockFlops, FullFocusEqualsDense) {
    BlockDims dims;
    dims.focus = dims.tokens;
    EXPECT_EQ(block_flops(dims, BlockMode::sparse).total(), block_flops(dims, BlockMode::dense).total());
}

TEST(BlockFlops, HalfFocusTermByTerm) {
    BlockDims dims;
    dims.focus = dims.tokens / 2;
    const BlockFlops d = block_flops(dims, BlockMode::dense), s = block_flops(dims, BlockMode::sparse);
    EXPECT_EQ(2 * s.self_attn.scores, d.self_attn.scores);
    EXPECT_EQ(2 * s.self_attn.mix, d.self_attn.mix);
    EXPECT_EQ(2 * s.self_attn.q_proj, d.self_attn.q_proj);
    EXPECT_EQ(s.self_attn.k_proj, d.self_attn.k_proj);
    EXPECT_EQ(s.self_attn.v_proj, d.self_attn.v_proj);
    EXPECT_EQ(2 * s.ffn, d.ffn);
    // hand count for N=64, d=64, M=16, d_c=32, hidden=256
    EXPECT_EQ(d.self_attn.scores, 2ull * 64 * 64 * 64);
    EXPECT_EQ(d.cross_attn.k_proj, 2ull * 16 * 32 * 64);
    EXPECT_EQ(d.ffn, 2ull * 64 * 64 * 256 * 2);
}

TEST(BlockFlops, MonotoneInFocus) {
    BlockDims dims;
    std::uint64_t prev = 0;
    for (std::size_t f = 0; f <= dims.tokens; ++f) {
        dims.focus = f;
        const auto t = block_flops(dims, BlockMode::sparse).total();
        ASSERT_GE(t, prev);
        prev = t;
    }
    dims.focus = dims.tokens + 1;
    EXPECT_THROW(block_flops(dims, BlockMode::sparse), ConfigError);
}
