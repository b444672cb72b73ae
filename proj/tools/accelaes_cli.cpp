// accelaes: run, sweep, anchors, schedule.
//
// Exit codes: 0 success, 2 configuration or input error, 3 runtime error.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "accelaes/experiment.hpp"

namespace {

using nlohmann::json;
using namespace accelaes;

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

bool parse_switch(const std::string& v) {
    if (v == "on" || v == "true" || v == "1") return true;
    if (v == "off" || v == "false" || v == "0") return false;
    throw ConfigError("expected on|off, got '" + v + "'");
}

// Flags that mirror RunConfig fields. Only flags given on the command line
// are applied on top of --config.
struct RunFlags {
    std::optional<std::string> config_path;
    std::optional<std::string> profile, prompt, anchors, embedding_table, model_path;
    std::optional<std::uint64_t> embedding_seed, seed;
    std::optional<std::size_t> embedding_dim, top_r;
    std::optional<double> sim_threshold, skip_ratio, cfg_scale, cfg_aes_scale, edge_threshold;
    std::optional<int> mask_step, delta, warmup, steps;
    std::optional<std::string> spatial_cfg, sparse, cfg_two_pass;
    std::vector<int> layers;

    void attach(CLI::App* app) {
        app->add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
        app->add_option("--profile", profile, "lumina-like | sd3-like | flux-like | custom");
        app->add_option("--prompt", prompt);
        app->add_option("--anchors", anchors, "anchor list file, or 'builtin'");
        app->add_option("--embedding-table", embedding_table, "token<TAB>vector file; synthetic when omitted");
        app->add_option("--embedding-seed", embedding_seed);
        app->add_option("--embedding-dim", embedding_dim);
        app->add_option("--sim-threshold", sim_threshold);
        app->add_option("--top-r", top_r);
        app->add_option("--layers", layers, "cross-attention layers to aggregate (default all)")->delimiter(',');
        app->add_option("--skip-ratio", skip_ratio);
        app->add_option("--mask-step", mask_step);
        app->add_option("--delta", delta);
        app->add_option("--warmup", warmup);
        app->add_option("--steps", steps, "T");
        app->add_option("--cfg-scale", cfg_scale, "g_bg");
        app->add_option("--cfg-aes-scale", cfg_aes_scale, "g_aes");
        app->add_option("--spatial-cfg", spatial_cfg, "on|off");
        app->add_option("--sparse", sparse, "on|off");
        app->add_option("--cfg-two-pass", cfg_two_pass, "on|off");
        app->add_option("--seed", seed, "initial noise seed");
        app->add_option("--edge-threshold", edge_threshold);
        app->add_option("--model", model_path, "JSON model spec");
    }

    RunConfig resolve() const {
        json j = json::object();
        if (config_path) {
            std::ifstream f(*config_path);
            try {
                j = json::parse(f);
            } catch (const json::parse_error& e) {
                throw ParseError(*config_path + ": " + e.what());
            }
            if (!j.is_object()) throw ConfigError(*config_path + ": run config must be a JSON object");
        }
        auto set = [&](const char* key, const auto& v) {
            if (v) j[key] = *v;
        };
        set("profile", profile);
        set("prompt", prompt);
        set("anchors", anchors);
        set("embedding_table", embedding_table);
        set("embedding_seed", embedding_seed);
        set("embedding_dim", embedding_dim);
        set("sim_threshold", sim_threshold);
        set("top_r", top_r);
        if (!layers.empty()) j["layers"] = layers;
        set("skip_ratio", skip_ratio);
        set("mask_step", mask_step);
        set("delta", delta);
        set("warmup", warmup);
        set("steps", steps);
        set("cfg_scale", cfg_scale);
        set("cfg_aes_scale", cfg_aes_scale);
        if (spatial_cfg) j["spatial_cfg"] = parse_switch(*spatial_cfg);
        if (sparse) j["sparse"] = parse_switch(*sparse);
        if (cfg_two_pass) j["cfg_two_pass"] = parse_switch(*cfg_two_pass);
        set("seed", seed);
        set("edge_threshold", edge_threshold);
        if (model_path) {
            std::ifstream f(*model_path);
            if (!f) throw ConfigError("cannot open model spec: " + *model_path);
            try {
                j["model"] = json::parse(f);
            } catch (const json::parse_error& e) {
                throw ParseError(*model_path + ": " + e.what());
            }
        }
        RunConfig c = j.get<RunConfig>();
        apply_env_overrides(c);
        validate(c);
        return c;
    }
};

void write_output(const std::optional<std::string>& path, const std::string& text) {
    if (!path) {
        std::cout << text;
        return;
    }
    std::ofstream f(*path);
    if (!f) throw ConfigError("cannot write " + *path);
    f << text;
}

std::vector<double> parse_values(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != item.size()) throw ConfigError("sweep: bad value '" + item + "'");
        out.push_back(v);
    }
    if (out.empty()) throw ConfigError("sweep: no values");
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Aesthetic-region sparse sampling with step caching on a desk-scale diffusion transformer"};
    app.require_subcommand(1);

    RunFlags run_flags;
    std::optional<std::string> run_out, latent_out;
    auto* run = app.add_subcommand("run", "one sampling run, JSON report");
    run_flags.attach(run);
    run->add_option("-o,--output", run_out, "report path (default stdout)");
    run->add_option("--dump-latent", latent_out, "write the final latent (binary)");

    RunFlags sweep_flags;
    std::string axis, values;
    std::optional<std::string> sweep_out;
    auto* sw = app.add_subcommand("sweep", "one run per axis value, CSV table");
    sweep_flags.attach(sw);
    sw->add_option("--axis", axis, "skip_ratio | mask_step | delta | warmup")->required();
    sw->add_option("--values", values, "comma-separated values")->required();
    sw->add_option("-o,--output", sweep_out, "CSV path (default stdout)");

    std::string prompts_path;
    std::string anchors_spec = "builtin";
    std::optional<std::string> anchors_table;
    std::uint64_t anchors_seed = 0;
    std::size_t anchors_dim = 64;
    double anchors_threshold = kDefaultSimThreshold;
    auto* an = app.add_subcommand("anchors", "anchor trigger statistics over a prompt file");
    an->add_option("--prompts", prompts_path, "one prompt per line")->required();
    an->add_option("--anchors", anchors_spec, "anchor list file, or 'builtin'");
    an->add_option("--embedding-table", anchors_table);
    an->add_option("--embedding-seed", anchors_seed);
    an->add_option("--embedding-dim", anchors_dim);
    an->add_option("--sim-threshold", anchors_threshold);

    std::optional<std::string> sched_profile;
    std::optional<int> sched_steps, sched_warmup, sched_delta;
    auto* sc = app.add_subcommand("schedule", "print the FULL/SKIP schedule without sampling");
    sc->add_option("--profile", sched_profile);
    sc->add_option("--steps", sched_steps, "T");
    sc->add_option("--warmup", sched_warmup);
    sc->add_option("--delta", sched_delta);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }

    try {
        if (*run) {
            const RunConfig cfg = run_flags.resolve();
            ExperimentOutput out = run_experiment_full(cfg);
            if (latent_out) save_latent(*latent_out, out.final_latent);
            write_output(run_out, serialize(out.report));
        } else if (*sw) {
            const RunConfig base = sweep_flags.resolve();
            const auto rows = sweep(base, axis, parse_values(values));
            write_output(sweep_out, sweep_csv(axis, rows));
        } else if (*an) {
            std::ifstream f(prompts_path);
            if (!f) throw ConfigError("cannot open prompts: " + prompts_path);
            RunConfig c;
            c.anchors = anchors_spec;
            c.embedding_table = anchors_table.value_or("");
            c.embedding_seed = anchors_seed;
            c.embedding_dim = anchors_dim;
            apply_env_overrides(c);
            const auto prompts = read_prompts(f);
            const AnchorSet anchors = load_anchor_set(c.anchors);
            std::vector<std::string> warnings;
            const EmbeddingTable table = resolve_table(c, anchors, prompts, &warnings);
            for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
            std::cout << anchor_stats(prompts, anchors, table, anchors_threshold).to_json().dump(2) << '\n';
        } else if (*sc) {
            RunConfig c = profile_defaults(sched_profile.value_or("lumina-like"));
            StepCacheConfig cfg{sched_delta.value_or(c.delta), sched_warmup.value_or(c.warmup), sched_steps.value_or(c.steps)};
            std::cout << schedule_report(cfg).dump(2) << '\n';
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const ParseError& e) {
        std::cerr << "parse error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return 0;
}
