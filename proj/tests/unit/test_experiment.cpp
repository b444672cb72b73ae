#include <cstdlib>
#include <map>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "accelaes/experiment.hpp"
#include "support/oracles.hpp"

using namespace accelaes;

namespace {

RunConfig quick(const std::string& profile = "lumina-like") {
    RunConfig c = profile_defaults(profile);
    c.model.depth = 2;
    c.model.grid_h = c.model.grid_w = 6;
    c.steps = profile == "lumina-like" ? 14 : 12;
    return c;
}

}  // namespace

TEST(RunConfig, ProfilesResolve) {
    for (const auto& p : profile_names()) EXPECT_NO_THROW(validate(profile_defaults(p))) << p;
    EXPECT_EQ(profile_defaults("lumina-like").steps, 30);
    EXPECT_EQ(profile_defaults("sd3-like").steps, 28);
    EXPECT_FALSE(profile_defaults("sd3-like").spatial_cfg);
    EXPECT_FALSE(profile_defaults("flux-like").sparse);
    EXPECT_THROW(profile_defaults("sdxl"), ConfigError);
}

TEST(RunConfig, LuminaLikeDefaults) {
    const RunConfig c = profile_defaults("lumina-like");
    EXPECT_EQ(c.skip_ratio, 0.5);
    EXPECT_EQ(c.mask_step, 5);
    EXPECT_EQ(c.sim_threshold, 0.6);
    EXPECT_TRUE(c.layers.empty());
    EXPECT_EQ(c.delta, 2);
    EXPECT_EQ(c.warmup, 5);
    EXPECT_EQ(c.steps, 30);
}

TEST(RunConfig, JsonRoundTrip) {
    RunConfig c = quick("sd3-like");
    c.top_r = 3;
    c.layers = {0, 1};
    c.prompt = "a \"quoted\" prompt";
    EXPECT_EQ(nlohmann::json(c).get<RunConfig>(), c);
}

TEST(RunConfig, PartialJsonStartsFromProfile) {
    const auto c = nlohmann::json{{"profile", "flux-like"}, {"delta", 3}}.get<RunConfig>();
    EXPECT_EQ(c.steps, 28);
    EXPECT_EQ(c.delta, 3);
    EXPECT_FALSE(c.sparse);
    const auto g = nlohmann::json{{"cfg_scale", 6.0}}.get<RunConfig>();
    EXPECT_EQ(g.cfg_aes_scale, 6.0);
}

TEST(RunConfig, Rejections) {
    EXPECT_THROW((nlohmann::json{{"skip_ratoi", 0.4}}.get<RunConfig>()), ConfigError);
    EXPECT_THROW((nlohmann::json{{"delta", "two"}}.get<RunConfig>()), ConfigError);
    EXPECT_THROW(nlohmann::json::array().get<RunConfig>(), ConfigError);
    RunConfig c;
    c.skip_ratio = 1.0;
    EXPECT_THROW(validate(c), ConfigError);
    c = RunConfig{};
    c.mask_step = 30;
    EXPECT_THROW(validate(c), ConfigError);
    c = RunConfig{};
    c.cfg_aes_scale = 2.0;
    EXPECT_THROW(validate(c), ConfigError);
    c = RunConfig{};
    c.warmup = 29;
    EXPECT_THROW(validate(c), ConfigError);
}

TEST(RunConfig, SeedOverride) {
    RunConfig c;
    apply_seed_override(c, "42");
    EXPECT_EQ(c.seed, 42u);
    EXPECT_EQ(c.model.seed, 42u);
    EXPECT_EQ(c.embedding_seed, 42u);
    apply_seed_override(c, nullptr);
    EXPECT_EQ(c.seed, 42u);
    EXPECT_THROW(apply_seed_override(c, "4x"), ConfigError);
}

TEST(RunConfig, MissingFiles) {
    EXPECT_THROW(load_run_config("/nonexistent.json"), ConfigError);
    RunConfig c = quick();
    c.anchors = "/nonexistent/anchors.txt";
    EXPECT_THROW(run_experiment(c), ConfigError);
}

TEST(Experiment, DefaultProfileCompletes) {
    const RunReport r = run_experiment(quick());
    EXPECT_GT(r.flops.estimated_speedup, 1.0);
    ASSERT_TRUE(r.mask.is_object());
    EXPECT_EQ(r.mask.at("focus_count"), 18);
    EXPECT_TRUE(r.triggered);
    EXPECT_GE(r.edge_density, 0.0);
    EXPECT_LE(r.edge_density, 1.0);
    EXPECT_EQ(r.config, quick());
}

TEST(Experiment, NoAccelerationIsExactlyOne) {
    RunConfig c = quick();
    c.sparse = false;
    c.spatial_cfg = false;
    c.delta = 1;
    const RunReport r = run_experiment(c);
    EXPECT_EQ(r.flops.estimated_speedup, 1.0);
    EXPECT_EQ(r.flops.actual, r.flops.dense_equivalent);
    EXPECT_TRUE(r.mask.is_null());
}

TEST(Experiment, StepCacheOnlyMatchesSummationOracle) {
    RunConfig c = quick();
    c.sparse = false;
    c.spatial_cfg = false;
    const RunReport r = run_experiment(c);
    const auto text = PromptTokens::from_text(c.prompt).size();
    const std::size_t m = std::min<std::size_t>(text, c.model.max_text_tokens);
    const std::uint64_t elems = c.model.tokens() * c.model.width;
    const std::uint64_t full_step = forward_flops(c.model, BlockMode::dense, 0, m).total() +
                                    forward_flops(c.model, BlockMode::dense, 0, 1).total() + 3 * elems;
    const std::uint64_t skip_step = 3 * elems;
    const int full = r.schedule.at("full_count"), skip = r.schedule.at("skip_count");
    ASSERT_GT(skip, 0);
    const double expect = static_cast<double>(full_step * c.steps) / static_cast<double>(full_step * full + skip_step * skip);
    EXPECT_EQ(r.flops.estimated_speedup, expect);
}

TEST(Experiment, FlopConservationAndDenseInvariance) {
    std::uint64_t dense_eq = 0;
    for (bool sparse : {false, true})
        for (int delta : {1, 2, 3})
            for (double s : {0.3, 0.7}) {
                RunConfig c = quick();
                c.sparse = sparse;
                c.delta = delta;
                c.skip_ratio = s;
                const RunReport r = run_experiment(c);
                ASSERT_EQ(r.flops.component_sum(), r.flops.actual);
                if (dense_eq == 0) dense_eq = r.flops.dense_equivalent;
                ASSERT_EQ(r.flops.dense_equivalent, dense_eq);
                if (sparse || delta > 1) {
        ASSERT_GE(r.flops.estimated_speedup, 1.0);
        }
            }
}

TEST(Experiment, ReportRoundTripIsByteIdentical) {
    RunConfig c = quick();
    c.top_r = 2;
    const RunReport r = run_experiment(c);
    const std::string once = serialize(r);
    const RunReport back = parse_report(once);
    EXPECT_EQ(serialize(back), once);
    EXPECT_EQ(back, r);
    EXPECT_EQ(back.config, c);
    EXPECT_THROW(parse_report("{}"), ParseError);
}

TEST(Experiment, ConfigEchoSurvivesSeedOverride) {
    RunConfig c = quick();
    apply_seed_override(c, "7");
    const RunReport r = run_experiment(c);
    EXPECT_EQ(r.config, c);
    EXPECT_EQ(nlohmann::json(r).at("config"), nlohmann::json(c));
}

TEST(Experiment, SeedsChangeOutput) {
    RunConfig a = quick(), b = quick();
    b.seed = 1;
    EXPECT_NE(run_experiment_full(a).final_latent.values, run_experiment_full(b).final_latent.values);
    EXPECT_EQ(run_experiment_full(a).final_latent.values, run_experiment_full(a).final_latent.values);
}

TEST(Sweep, SkipRatioRowsSortedAndMonotone) {
    const auto rows = sweep(quick(), "skip_ratio", {0.7, 0.3, 0.5, 0.4, 0.6});
    ASSERT_EQ(rows.size(), 5u);
    for (std::size_t i = 1; i < rows.size(); ++i) {
        EXPECT_LT(rows[i - 1].value, rows[i].value);
        EXPECT_LE(rows[i - 1].report.flops.estimated_speedup, rows[i].report.flops.estimated_speedup);
        EXPECT_EQ(rows[i].report.config.seed, rows[0].report.config.seed);
    }
    const std::string csv = sweep_csv("skip_ratio", rows);
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "skip_ratio,estimated_speedup,full_count,skip_count,edge_density");
    std::getline(in, line);
    EXPECT_EQ(line.substr(0, 4), "0.3,");
    int n = 0;
    while (std::getline(in, line)) ++n;
    EXPECT_EQ(n, 4);
}

TEST(Sweep, MaskStepRows) {
    RunConfig c = quick();
    c.steps = 20;
    const auto rows = sweep(c, "mask_step", {3, 5, 7, 10, 15});
    ASSERT_EQ(rows.size(), 5u);
    for (const auto& r : rows) EXPECT_EQ(r.report.mask.at("built_at_step"), static_cast<int>(r.value));
}

TEST(Sweep, Errors) {
    EXPECT_THROW(sweep(quick(), "depth", {1}), ConfigError);
    EXPECT_THROW(sweep(quick(), "delta", {1.5}), ConfigError);
}

TEST(AnchorStats, EmptyInput) {
    const AnchorSet anchors = AnchorSet::defaults();
    const auto st = anchor_stats({}, anchors, synthetic_table(anchors, {}, 16, 0), 0.6);
    const auto j = st.to_json();
    EXPECT_EQ(j.at("total"), 0);
    EXPECT_TRUE(j.at("trigger_rate").is_null());
    EXPECT_TRUE(j.at("top_anchors").empty());
}

TEST(AnchorStats, LiteralAnchorsAlwaysTrigger) {
    std::istringstream in("a cinematic cat\n\nportrait of an elephant\nvivid, stunning sky\n");
    const auto prompts = read_prompts(in);
    ASSERT_EQ(prompts.size(), 3u);
    const AnchorSet anchors = AnchorSet::defaults();
    const auto st = anchor_stats(prompts, anchors, synthetic_table(anchors, prompts, 64, 0), 0.6);
    EXPECT_EQ(st.trigger_rate, 1.0);
    EXPECT_EQ(st.mean_matched_anchors, 4.0 / 3.0);
    EXPECT_EQ(st.top_anchors.size(), 4u);
}

TEST(AnchorStats, CorpusMatchesPerPromptOracle) {
    Rng rng(81);
    const AnchorSet anchors = AnchorSet::defaults();
    const std::vector<std::string> vocab{"cat", "dog", "tree", "city", "night", "cinematic", "portrait", "bokeh",
                                         "vivid", "person", "sharp", "river", "old", "ship"};
    std::vector<PromptTokens> prompts;
    for (int i = 0; i < 100; ++i) {
        PromptTokens p;
        const std::size_t len = 1 + rng.below(6);
        for (std::size_t k = 0; k < len; ++k) p.tokens.push_back(vocab[rng.below(vocab.size())]);
        prompts.push_back(p);
    }
    const EmbeddingTable table = synthetic_table(anchors, prompts, 32, 5);
    const auto st = anchor_stats(prompts, anchors, table, 0.6);

    std::size_t triggered = 0, matched = 0;
    std::map<std::string, std::size_t> freq;
    for (const auto& p : prompts) {
        std::set<std::string> hit;
        for (const auto& tok : p.tokens)
            for (const auto& a : anchors.anchors)
                if (cosine_similarity(*table.find(tok), *table.find(a)) >= 0.6) hit.insert(a);
        if (hit.empty()) continue;
        ++triggered;
        matched += hit.size();
        for (const auto& a : hit) ++freq[a];
    }
    EXPECT_EQ(st.total, 100u);
    EXPECT_EQ(st.triggered, triggered);
    EXPECT_DOUBLE_EQ(*st.trigger_rate, triggered / 100.0);
    EXPECT_DOUBLE_EQ(*st.mean_matched_anchors, static_cast<double>(matched) / static_cast<double>(triggered));
    for (const auto& [a, n] : st.top_anchors) EXPECT_EQ(freq.at(a), n);
    for (std::size_t i = 1; i < st.top_anchors.size(); ++i) EXPECT_GE(st.top_anchors[i - 1].second, st.top_anchors[i].second);
}

TEST(ScheduleReport, PublishedFiguresAttached) {
    const auto a = schedule_report({2, 5, 30});
    EXPECT_EQ(a.at("published_skip_ratio"), 0.467);
    EXPECT_TRUE(a.at("consistent"));
    EXPECT_EQ(schedule_report({2, 5, 28}).at("published_skip_ratio"), 0.464);
    EXPECT_TRUE(schedule_report({3, 5, 28}).at("published_skip_ratio").is_null());
}
