#pragma once

// Step-level prediction cache.
//
// Iterations 0..warmup-1 always run the full model. After that a full forward
// runs every `delta` iterations and the iterations in between reuse the two
// most recent endpoints by linear extrapolation:
//   pred(t) = E_near + lambda * (E_near - E_far),  lambda = (t - tau) / delta
// where tau is the latest full iteration (E_near) and E_far is the full
// prediction from iteration tau - delta. Iteration indices increase along the
// sampling trajectory.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "accelaes/core_math.hpp"
#include "accelaes/errors.hpp"

namespace accelaes {

struct StepCacheConfig {
    int delta = 2;
    int warmup = 5;
    int total_steps = 30;

    bool caching_enabled() const { return delta > 1; }

    void validate() const {
        if (total_steps < 1) throw ConfigError("stepcache: total_steps must be >= 1");
        if (delta < 1) throw ConfigError("stepcache: delta must be >= 1");
        if (warmup < 0) throw ConfigError("stepcache: warmup must be >= 0");
        if (caching_enabled() && warmup + 2 > total_steps) {
            throw ConfigError("stepcache: warmup + 2 must not exceed total_steps when caching is enabled");
        }
    }
};

enum class StepKind { full, skip };

struct StepSchedule {
    std::vector<StepKind> labels;
    int full_count = 0;
    int skip_count = 0;
    int warmup = 0;
    int delta = 1;

    int total() const { return static_cast<int>(labels.size()); }
    double skip_ratio() const { return labels.empty() ? 0.0 : static_cast<double>(skip_count) / total(); }
    bool is_full(int step) const { return labels.at(static_cast<std::size_t>(step)) == StepKind::full; }

    // Latest full iteration strictly before `step`, or -1.
    int previous_full(int step) const {
        for (int s = step - 1; s >= 0; --s)
            if (is_full(s)) return s;
        return -1;
    }

    int next_full(int step) const {
        for (int s = step + 1; s < total(); ++s)
            if (is_full(s)) return s;
        return -1;
    }

    // Self-consistency: counts add up, warmup is all full, every skip has a
    // full iteration after it within delta, and its extrapolation endpoints
    // (tau, tau - delta) are both full with lambda in (0, 1).
    std::vector<std::string> violations() const {
        std::vector<std::string> bad;
        int full = 0, skip = 0;
        for (int s = 0; s < total(); ++s) {
            if (is_full(s)) {
                ++full;
                continue;
            }
            ++skip;
            const std::string at = "step " + std::to_string(s);
            if (s < warmup) bad.push_back(at + ": skip inside warmup");
            const int near = previous_full(s);
            const int after = next_full(s);
            if (near < 0 || after < 0) {
                bad.push_back(at + ": not bracketed by full steps");
                continue;
            }
            if (after - near > delta) bad.push_back(at + ": bracketing full steps more than delta apart");
            if (near - delta < 0 || !is_full(near - delta)) bad.push_back(at + ": far endpoint missing");
            if (s - near >= delta) bad.push_back(at + ": lambda outside (0, 1)");
        }
        if (full != full_count || skip != skip_count) bad.push_back("full/skip counts disagree with labels");
        if (full_count + skip_count != total()) bad.push_back("full + skip != T");
        return bad;
    }

    nlohmann::json to_json() const {
        std::vector<std::string> names;
        names.reserve(labels.size());
        for (auto k : labels) names.emplace_back(k == StepKind::full ? "FULL" : "SKIP");
        return {{"T", total()},       {"T_w", warmup},         {"delta", delta},
                {"labels", names},    {"full_count", full_count}, {"skip_count", skip_count},
                {"skip_ratio", skip_ratio()}};
    }
};

// `forced_full` lists iterations that must run the full model regardless of
// the stride (the sampler forces the mask-construction iteration).
inline StepSchedule plan_schedule(const StepCacheConfig& cfg, std::span<const int> forced_full = {}) {
    cfg.validate();
    const int t_total = cfg.total_steps;
    StepSchedule sch;
    sch.warmup = cfg.warmup;
    sch.delta = cfg.delta;
    sch.labels.assign(static_cast<std::size_t>(t_total), StepKind::full);

    auto forced = [&](int s) { return std::find(forced_full.begin(), forced_full.end(), s) != forced_full.end(); };

    // Forward pass: a step may be skipped only when it is off-stride and both
    // extrapolation endpoints (near, near - delta) already exist.
    int near = -1;
    for (int s = 0; s < t_total; ++s) {
        bool full = s < cfg.warmup || forced(s) || !cfg.caching_enabled();
        if (!full) {
            full = (s - cfg.warmup) % cfg.delta == 0;
            if (!full) {
                const int far = near - cfg.delta;
                const bool endpoints = near >= 0 && far >= 0 && sch.labels[static_cast<std::size_t>(far)] == StepKind::full &&
                                       s - near < cfg.delta;
                full = !endpoints;
            }
        }
        sch.labels[static_cast<std::size_t>(s)] = full ? StepKind::full : StepKind::skip;
        if (full) near = s;
    }
    // Trailing skips would have no full step after them; forcing the last
    // iteration full brackets them (they all lie within delta of it).
    if (t_total > 0 && sch.labels.back() == StepKind::skip) sch.labels.back() = StepKind::full;

    for (auto k : sch.labels) (k == StepKind::full ? sch.full_count : sch.skip_count)++;
    return sch;
}

struct StepCacheState {
    Matrix e_near;
    Matrix e_far;
    int tau = -1;      // iteration of e_near
    int tau_far = -1;  // iteration of e_far
    bool valid = false;
};

inline Matrix extrapolate(const StepCacheState& state, int t, const StepCacheConfig& cfg) {
    if (!state.valid) throw CacheError("extrapolate: cache endpoints not populated");
    if (!state.e_near.same_shape(state.e_far)) throw CacheError("extrapolate: endpoint shapes differ");
    if (!(t > state.tau && t < state.tau + cfg.delta)) {
        throw ScheduleError("extrapolate: step " + std::to_string(t) + " outside (" + std::to_string(state.tau) + ", " +
                            std::to_string(state.tau + cfg.delta) + ")");
    }
    const double lambda = static_cast<double>(t - state.tau) / static_cast<double>(cfg.delta);
    Matrix out(state.e_near.rows(), state.e_near.cols());
    const auto& a = state.e_near.data();
    const auto& b = state.e_far.data();
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = a[i] + lambda * (a[i] - b[i]);
    return out;
}

// Per-element cost of one extrapolation (subtract, multiply, add).
inline constexpr std::uint64_t kExtrapolateFlopsPerElement = 3;

// Drives one sampling run's cache: remembers recent full predictions so the
// endpoint delta iterations back is available when a skip needs it.
class StepCache {
public:
    StepCache(StepCacheConfig cfg, StepSchedule schedule) : cfg_(cfg), schedule_(std::move(schedule)) {}

    explicit StepCache(const StepCacheConfig& cfg) : StepCache(cfg, plan_schedule(cfg)) {}

    const StepCacheConfig& config() const { return cfg_; }
    const StepSchedule& schedule() const { return schedule_; }
    const StepCacheState& state() const { return state_; }
    int full_calls() const { return full_calls_; }
    int extrapolations() const { return extrapolations_; }

    template <class FullForward>
    Matrix step_or_skip(int step, FullForward&& full_forward) {
        if (step < 0 || step >= schedule_.total()) throw ScheduleError("step " + std::to_string(step) + " outside schedule");
        if (schedule_.is_full(step)) {
            Matrix pred = full_forward();
            ++full_calls_;
            record_full(step, pred);
            return pred;
        }
        ++extrapolations_;
        return extrapolate(state_, step, cfg_);
    }

private:
    void record_full(int step, const Matrix& pred) {
        history_.emplace_back(step, pred);
        while (!history_.empty() && history_.front().first < step - cfg_.delta) history_.pop_front();
        state_.e_near = pred;
        state_.tau = step;
        state_.valid = false;
        state_.tau_far = -1;
        for (const auto& [s, p] : history_) {
            if (s == step - cfg_.delta) {
                state_.e_far = p;
                state_.tau_far = s;
                state_.valid = true;
            }
        }
    }

    StepCacheConfig cfg_;
    StepSchedule schedule_;
    StepCacheState state_;
    std::deque<std::pair<int, Matrix>> history_;
    int full_calls_ = 0;
    int extrapolations_ = 0;
};

}  // namespace accelaes
