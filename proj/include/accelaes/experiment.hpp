#pragma once

// Experiment driver: run configurations, single runs, parameter sweeps, and
// anchor trigger statistics. Runs report an estimated speedup as a ratio of
// analytic FLOPs (dense-equivalent over actually executed); wall time is
// recorded for information only.

#include <algorithm>
#include <array>
#include <charconv>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "accelaes/aesmask.hpp"
#include "accelaes/errors.hpp"
#include "accelaes/sampler.hpp"
#include "accelaes/stepcache.hpp"
#include "accelaes/text_affinity.hpp"
#include "accelaes/toy_dit.hpp"

namespace accelaes {

struct RunConfig {
    std::string profile = "lumina-like";
    ModelSpec model;
    std::string prompt = "a cinematic portrait of an astronaut, highly detailed, dramatic lighting";
    std::string anchors = "builtin";  // or a file with one anchor per line
    std::string embedding_table;      // empty: synthetic embeddings
    std::uint64_t embedding_seed = 0;
    std::size_t embedding_dim = 64;
    double sim_threshold = kDefaultSimThreshold;
    std::optional<std::size_t> top_r;
    std::vector<int> layers;  // empty: all cross-attention layers
    double skip_ratio = kDefaultSkipRatio;
    int mask_step = kDefaultMaskStep;
    int delta = 2;
    int warmup = 5;
    int steps = 30;
    double cfg_scale = 4.0;
    double cfg_aes_scale = 4.0;
    bool spatial_cfg = true;
    bool sparse = true;
    bool cfg_two_pass = true;
    std::uint64_t seed = 0;  // initial noise
    double edge_threshold = 2.5;  // near the median gradient magnitude of desk-scale latents

    bool operator==(const RunConfig&) const = default;
};

inline const std::vector<std::string>& profile_names() {
    static const std::vector<std::string> names{"lumina-like", "sd3-like", "flux-like", "custom"};
    return names;
}

// Backbone-style presets. lumina-like runs the whole stack; sd3-like keeps the
// step cache and sparse path but uniform guidance; flux-like uses the step
// cache alone. custom starts from the lumina-like values.
inline RunConfig profile_defaults(const std::string& name) {
    RunConfig c;
    c.profile = name;
    if (name == "lumina-like" || name == "custom") return c;
    if (name == "sd3-like") {
        c.steps = 28;
        c.cfg_scale = c.cfg_aes_scale = 7.0;
        c.spatial_cfg = false;
        return c;
    }
    if (name == "flux-like") {
        c.steps = 28;
        c.cfg_scale = c.cfg_aes_scale = 3.5;
        c.spatial_cfg = false;
        c.sparse = false;
        return c;
    }
    throw ConfigError("unknown profile '" + name + "' (expected lumina-like, sd3-like, flux-like or custom)");
}

inline void to_json(nlohmann::json& j, const RunConfig& c) {
    j = nlohmann::json{{"profile", c.profile},
                       {"model", c.model},
                       {"prompt", c.prompt},
                       {"anchors", c.anchors},
                       {"embedding_table", c.embedding_table},
                       {"embedding_seed", c.embedding_seed},
                       {"embedding_dim", c.embedding_dim},
                       {"sim_threshold", c.sim_threshold},
                       {"top_r", c.top_r ? nlohmann::json(*c.top_r) : nlohmann::json(nullptr)},
                       {"layers", c.layers},
                       {"skip_ratio", c.skip_ratio},
                       {"mask_step", c.mask_step},
                       {"delta", c.delta},
                       {"warmup", c.warmup},
                       {"steps", c.steps},
                       {"cfg_scale", c.cfg_scale},
                       {"cfg_aes_scale", c.cfg_aes_scale},
                       {"spatial_cfg", c.spatial_cfg},
                       {"sparse", c.sparse},
                       {"cfg_two_pass", c.cfg_two_pass},
                       {"seed", c.seed},
                       {"edge_threshold", c.edge_threshold}};
}

// Starts from the named profile's defaults and applies every key present.
// Unknown keys are rejected so typos surface as config errors.
inline void from_json(const nlohmann::json& j, RunConfig& c) {
    if (!j.is_object()) throw ConfigError("run config must be a JSON object");
    c = profile_defaults(j.value("profile", std::string("lumina-like")));
    static const std::vector<std::string> known{
        "profile",  "model",     "prompt",     "anchors", "embedding_table", "embedding_seed", "embedding_dim",
        "sim_threshold", "top_r", "layers",    "skip_ratio", "mask_step", "delta", "warmup", "steps",
        "cfg_scale", "cfg_aes_scale", "spatial_cfg", "sparse", "cfg_two_pass", "seed", "edge_threshold"};
    for (const auto& [key, _] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) throw ConfigError("unknown config key '" + key + "'");
    }
    try {
        auto take = [&](const char* key, auto& field) {
            if (j.contains(key)) j.at(key).get_to(field);
        };
        take("model", c.model);
        take("prompt", c.prompt);
        take("anchors", c.anchors);
        take("embedding_table", c.embedding_table);
        take("embedding_seed", c.embedding_seed);
        take("embedding_dim", c.embedding_dim);
        take("sim_threshold", c.sim_threshold);
        if (j.contains("top_r")) {
            c.top_r = j.at("top_r").is_null() ? std::nullopt : std::optional<std::size_t>(j.at("top_r").get<std::size_t>());
        }
        take("layers", c.layers);
        take("skip_ratio", c.skip_ratio);
        take("mask_step", c.mask_step);
        take("delta", c.delta);
        take("warmup", c.warmup);
        take("steps", c.steps);
        take("cfg_scale", c.cfg_scale);
        if (j.contains("cfg_scale") && !j.contains("cfg_aes_scale")) c.cfg_aes_scale = c.cfg_scale;
        take("cfg_aes_scale", c.cfg_aes_scale);
        take("spatial_cfg", c.spatial_cfg);
        take("sparse", c.sparse);
        take("cfg_two_pass", c.cfg_two_pass);
        take("seed", c.seed);
        take("edge_threshold", c.edge_threshold);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("run config: ") + e.what());
    }
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config: " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(path + ": " + e.what());
    }
    return j.get<RunConfig>();
}

// ACCELAES_SEED, when set, replaces the noise, model and embedding seeds.
inline void apply_seed_override(RunConfig& c, const char* value) {
    if (value == nullptr || *value == '\0') return;
    char* end = nullptr;
    const unsigned long long s = std::strtoull(value, &end, 10);
    if (end == value || *end != '\0') throw ConfigError(std::string("ACCELAES_SEED is not an unsigned integer: ") + value);
    c.seed = c.model.seed = c.embedding_seed = s;
}

inline void apply_env_overrides(RunConfig& c) { apply_seed_override(c, std::getenv("ACCELAES_SEED")); }

inline void validate(const RunConfig& c) {
    profile_defaults(c.profile);
    c.model.validate();
    if (!(c.sim_threshold >= -1.0 && c.sim_threshold <= 1.0)) throw ConfigError("sim_threshold must lie in [-1, 1]");
    if (!(c.skip_ratio > 0.0 && c.skip_ratio < 1.0)) throw ConfigError("skip_ratio must lie in (0, 1)");
    if (c.embedding_dim < 2) throw ConfigError("embedding_dim must be >= 2");
    if (!(c.edge_threshold >= 0.0)) throw ConfigError("edge_threshold must be >= 0");
    StepCacheConfig{c.delta, c.warmup, c.steps}.validate();
    GuidanceConfig{c.cfg_scale, c.cfg_aes_scale, c.spatial_cfg}.validate();
    if ((c.sparse || c.spatial_cfg) && (c.mask_step < 0 || c.mask_step >= c.steps)) {
        throw ConfigError("mask_step " + std::to_string(c.mask_step) + " must lie in [0, " + std::to_string(c.steps) + ")");
    }
}

inline AnchorSet load_anchor_set(const std::string& spec) {
    if (spec.empty() || spec == "builtin") return AnchorSet::defaults();
    std::ifstream f(spec);
    if (!f) throw ConfigError("cannot open anchor list: " + spec);
    AnchorSet a;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.front() == '#') continue;
        a.anchors.push_back(line);
    }
    if (a.anchors.empty()) throw FormatError(spec + ": no anchors");
    return a;
}

inline EmbeddingTable resolve_table(const RunConfig& c, const AnchorSet& anchors, const std::vector<PromptTokens>& prompts,
                                    std::vector<std::string>* warnings = nullptr) {
    if (c.embedding_table.empty()) return synthetic_table(anchors, prompts, c.embedding_dim, c.embedding_seed);
    TableLoad load = load_embedding_table(c.embedding_table);
    if (warnings) warnings->insert(warnings->end(), load.warnings.begin(), load.warnings.end());
    return std::move(load.table);
}

struct FlopReport {
    std::uint64_t dense_equivalent = 0;
    std::uint64_t actual = 0;
    double estimated_speedup = 1.0;
    std::uint64_t attention = 0;
    std::uint64_t ffn = 0;
    std::uint64_t io = 0;
    std::uint64_t guidance = 0;
    std::uint64_t skipped_steps = 0;

    std::uint64_t component_sum() const { return attention + ffn + io + guidance + skipped_steps; }
    bool operator==(const FlopReport&) const = default;
};

struct RunReport {
    RunConfig config;
    nlohmann::json schedule;
    FlopReport flops;
    int model_forwards = 0;
    int sparse_forwards = 0;
    int extrapolations = 0;
    nlohmann::json mask;  // null when no mask was built
    bool triggered = false;
    std::vector<std::size_t> aesthetic_tokens;
    std::vector<std::string> matched_anchors;
    std::vector<std::string> warnings;
    double edge_density = 0.0;
    double wall_time_s = 0.0;

    bool operator==(const RunReport&) const = default;
};

inline void to_json(nlohmann::json& j, const FlopReport& f) {
    j = {{"dense_equivalent", f.dense_equivalent},
         {"actual", f.actual},
         {"estimated_speedup", f.estimated_speedup},
         {"components", {{"attention", f.attention}, {"ffn", f.ffn}, {"io", f.io}, {"guidance", f.guidance}, {"skipped_steps", f.skipped_steps}}}};
}

inline void from_json(const nlohmann::json& j, FlopReport& f) {
    j.at("dense_equivalent").get_to(f.dense_equivalent);
    j.at("actual").get_to(f.actual);
    j.at("estimated_speedup").get_to(f.estimated_speedup);
    const auto& c = j.at("components");
    c.at("attention").get_to(f.attention);
    c.at("ffn").get_to(f.ffn);
    c.at("io").get_to(f.io);
    c.at("guidance").get_to(f.guidance);
    c.at("skipped_steps").get_to(f.skipped_steps);
}

inline void to_json(nlohmann::json& j, const RunReport& r) {
    j = {{"config", r.config},
         {"schedule", r.schedule},
         {"flops", r.flops},
         {"counts", {{"model_forwards", r.model_forwards}, {"sparse_forwards", r.sparse_forwards}, {"extrapolations", r.extrapolations}}},
         {"mask", r.mask},
         {"affinity", {{"triggered", r.triggered}, {"aesthetic_tokens", r.aesthetic_tokens}, {"matched_anchors", r.matched_anchors}}},
         {"warnings", r.warnings},
         {"edge_density", r.edge_density},
         {"wall_time_s", r.wall_time_s}};
}

inline void from_json(const nlohmann::json& j, RunReport& r) {
    j.at("config").get_to(r.config);
    r.schedule = j.at("schedule");
    j.at("flops").get_to(r.flops);
    const auto& c = j.at("counts");
    c.at("model_forwards").get_to(r.model_forwards);
    c.at("sparse_forwards").get_to(r.sparse_forwards);
    c.at("extrapolations").get_to(r.extrapolations);
    r.mask = j.at("mask");
    const auto& a = j.at("affinity");
    a.at("triggered").get_to(r.triggered);
    a.at("aesthetic_tokens").get_to(r.aesthetic_tokens);
    a.at("matched_anchors").get_to(r.matched_anchors);
    j.at("warnings").get_to(r.warnings);
    j.at("edge_density").get_to(r.edge_density);
    j.at("wall_time_s").get_to(r.wall_time_s);
}

inline std::string serialize(const RunReport& r) { return nlohmann::json(r).dump(2) + "\n"; }

inline RunReport parse_report(const std::string& text) {
    try {
        return nlohmann::json::parse(text).get<RunReport>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("run report: ") + e.what());
    }
}

inline EngineConfig engine_config(const RunConfig& c, const TokenAffinity& affinity) {
    EngineConfig e;
    e.cache = {c.delta, c.warmup, c.steps};
    e.guidance = {c.cfg_scale, c.cfg_aes_scale, c.spatial_cfg};
    e.cfg_two_pass = c.cfg_two_pass;
    e.sparse = c.sparse;
    e.mask_step = c.mask_step;
    e.mask_inputs = {affinity, c.skip_ratio, LayerSet{c.layers}};
    return e;
}

struct PreparedRun {
    Model model;
    TextCondition cond;
    TextCondition uncond;
    TokenAffinity affinity;
    LatentTokens noise;
    EngineConfig engine;
    std::vector<std::string> warnings;
};

inline PreparedRun prepare_run(const RunConfig& c) {
    validate(c);
    PreparedRun p;
    p.model = build_model(c.model);
    PromptTokens prompt = PromptTokens::from_text(c.prompt);
    if (prompt.tokens.empty()) throw ConfigError("prompt has no tokens");
    if (prompt.size() > c.model.max_text_tokens) {
        p.warnings.push_back("prompt truncated to " + std::to_string(c.model.max_text_tokens) + " tokens");
        prompt.tokens.resize(c.model.max_text_tokens);
    }
    const AnchorSet anchors = load_anchor_set(c.anchors);
    const EmbeddingTable table = resolve_table(c, anchors, {prompt}, &p.warnings);
    p.affinity = score_tokens(prompt, anchors, table, ScoreOptions{c.sim_threshold, c.top_r});
    p.cond = make_text_condition(prompt, c.model.text_width, c.model.max_text_tokens, c.model.seed);
    p.uncond = null_condition(c.model.text_width, c.model.seed);
    p.noise = LatentTokens::noise(c.model, c.seed);
    p.engine = engine_config(c, p.affinity);
    return p;
}

inline RunReport make_report(const RunConfig& c, const PreparedRun& p, const SampleResult& res, double wall) {
    RunReport r;
    r.config = c;
    r.schedule = res.schedule.to_json();
    r.flops.dense_equivalent = res.flops.dense_equivalent;
    r.flops.actual = res.flops.actual();
    r.flops.estimated_speedup = res.flops.speedup();
    r.flops.attention = res.flops.attention;
    r.flops.ffn = res.flops.ffn;
    r.flops.io = res.flops.io;
    r.flops.guidance = res.flops.guidance;
    r.flops.skipped_steps = res.flops.extrapolation;
    r.model_forwards = res.model_forwards;
    r.sparse_forwards = res.sparse_forwards;
    r.extrapolations = res.extrapolations;
    if (res.mask) {
        r.mask = res.mask->to_json();
        r.mask["focus_count"] = res.mask->focus_count();
        r.warnings.insert(r.warnings.end(), res.mask->warnings.begin(), res.mask->warnings.end());
    }
    if (res.affinity && res.affinity->fallback) r.warnings.push_back("no aesthetic token triggered; uniform token weighting used");
    r.triggered = p.affinity.triggered;
    r.aesthetic_tokens = p.affinity.selected;
    r.matched_anchors = p.affinity.matched_anchors;
    r.warnings.insert(r.warnings.begin(), p.warnings.begin(), p.warnings.end());
    r.edge_density = edge_density(res.final_latent, c.edge_threshold);
    r.wall_time_s = wall;
    return r;
}

struct ExperimentOutput {
    RunReport report;
    LatentTokens final_latent;
};

inline ExperimentOutput run_experiment_full(const RunConfig& c) {
    const auto t0 = std::chrono::steady_clock::now();
    PreparedRun p = prepare_run(c);
    DitDenoiser den(p.model);
    SampleResult res = sample(den, p.noise, p.cond, p.uncond, p.engine);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ExperimentOutput out{make_report(c, p, res, wall), std::move(res.final_latent)};
    return out;
}

inline RunReport run_experiment(const RunConfig& c) { return run_experiment_full(c).report; }

inline const std::vector<std::string>& sweep_axes() {
    static const std::vector<std::string> axes{"skip_ratio", "mask_step", "delta", "warmup"};
    return axes;
}

inline RunConfig with_axis_value(RunConfig c, const std::string& axis, double v) {
    auto as_int = [&](double x) {
        if (x != static_cast<double>(static_cast<int>(x))) throw ConfigError("sweep: " + axis + " needs integer values");
        return static_cast<int>(x);
    };
    if (axis == "skip_ratio") {
        c.skip_ratio = v;
    } else if (axis == "mask_step") {
        c.mask_step = as_int(v);
    } else if (axis == "delta") {
        c.delta = as_int(v);
    } else if (axis == "warmup") {
        c.warmup = as_int(v);
    } else {
        throw ConfigError("sweep: unknown axis '" + axis + "' (expected skip_ratio, mask_step, delta or warmup)");
    }
    return c;
}

struct SweepRow {
    double value = 0.0;
    RunReport report;
};

// One run per value with shared seeds; rows are ordered by axis value.
inline std::vector<SweepRow> sweep(const RunConfig& base, const std::string& axis, std::vector<double> values) {
    if (std::find(sweep_axes().begin(), sweep_axes().end(), axis) == sweep_axes().end()) {
        throw ConfigError("sweep: unknown axis '" + axis + "' (expected skip_ratio, mask_step, delta or warmup)");
    }
    std::sort(values.begin(), values.end());
    std::vector<SweepRow> rows;
    for (double v : values) rows.push_back({v, run_experiment(with_axis_value(base, axis, v))});
    return rows;
}

// Shortest text that parses back to the same double.
inline std::string format_number(double v) {
    std::array<char, 32> buf{};
    const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), res.ptr);
}

inline std::string sweep_csv(const std::string& axis, const std::vector<SweepRow>& rows) {
    std::ostringstream out;
    out << axis << ",estimated_speedup,full_count,skip_count,edge_density\n";
    for (const auto& r : rows) {
        out << format_number(r.value) << ',' << format_number(r.report.flops.estimated_speedup) << ','
            << r.report.schedule.at("full_count").get<int>() << ',' << r.report.schedule.at("skip_count").get<int>() << ','
            << format_number(r.report.edge_density) << '\n';
    }
    return out.str();
}

struct AnchorStats {
    std::size_t total = 0;
    std::size_t triggered = 0;
    std::optional<double> trigger_rate;
    std::optional<double> mean_matched_anchors;  // over triggered prompts
    std::vector<std::pair<std::string, std::size_t>> top_anchors;

    nlohmann::json to_json() const {
        nlohmann::json top = nlohmann::json::array();
        for (const auto& [a, n] : top_anchors) top.push_back({{"anchor", a}, {"count", n}});
        return {{"total", total},
                {"triggered", triggered},
                {"trigger_rate", trigger_rate ? nlohmann::json(*trigger_rate) : nlohmann::json(nullptr)},
                {"mean_matched_anchors", mean_matched_anchors ? nlohmann::json(*mean_matched_anchors) : nlohmann::json(nullptr)},
                {"top_anchors", top}};
    }
};

inline std::vector<PromptTokens> read_prompts(std::istream& in) {
    std::vector<PromptTokens> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        PromptTokens p = PromptTokens::from_text(line);
        if (!p.tokens.empty()) out.push_back(std::move(p));
    }
    return out;
}

inline AnchorStats anchor_stats(const std::vector<PromptTokens>& prompts, const AnchorSet& anchors, const EmbeddingTable& table,
                                double sim_threshold) {
    AnchorStats st;
    std::map<std::string, std::size_t> freq;
    std::size_t matched_total = 0;
    for (const auto& p : prompts) {
        const TokenAffinity a = score_tokens(p, anchors, table, ScoreOptions{sim_threshold, std::nullopt});
        ++st.total;
        if (!a.triggered) continue;
        ++st.triggered;
        matched_total += a.matched_anchors.size();
        for (const auto& name : a.matched_anchors) ++freq[name];
    }
    if (st.total > 0) st.trigger_rate = static_cast<double>(st.triggered) / static_cast<double>(st.total);
    if (st.triggered > 0) st.mean_matched_anchors = static_cast<double>(matched_total) / static_cast<double>(st.triggered);
    st.top_anchors.assign(freq.begin(), freq.end());
    std::stable_sort(st.top_anchors.begin(), st.top_anchors.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    if (st.top_anchors.size() > 10) st.top_anchors.resize(10);
    return st;
}

// Published theoretical skip ratios for the (T, T_w, delta) settings the
// method was evaluated with; reported next to the enumerated ratio.
inline std::optional<double> published_skip_ratio(int steps, int warmup, int delta) {
    if (warmup == 5 && delta == 2 && steps == 30) return 0.467;
    if (warmup == 5 && delta == 2 && steps == 28) return 0.464;
    return std::nullopt;
}

inline nlohmann::json schedule_report(const StepCacheConfig& cfg) {
    const StepSchedule s = plan_schedule(cfg);
    nlohmann::json j = s.to_json();
    const auto bad = s.violations();
    j["consistent"] = bad.empty();
    j["violations"] = bad;
    const auto pub = published_skip_ratio(cfg.total_steps, cfg.warmup, cfg.delta);
    j["published_skip_ratio"] = pub ? nlohmann::json(*pub) : nlohmann::json(nullptr);
    return j;
}

}  // namespace accelaes
