#pragma once

// Scale-schedule arithmetic: token counts, scale grouping, the default
// budget rule, the analytic KV memory model, and a tensor-free walk of the
// adaptive caching policy used for closed-form cross-checks.

#include <algorithm>
#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "amskv/decision.hpp"
#include "amskv/error.hpp"

namespace amskv {

// -------------------------------------------------------------------------
// ScaleSchedule: ordered square spatial sides, coarse to fine.

class ScaleSchedule {
  public:
    ScaleSchedule() = default;

    explicit ScaleSchedule(std::vector<int> sides) : sides_(std::move(sides)) {
        if (sides_.size() < 2) throw ConfigError("schedule needs at least 2 scales");
        int prev = 0;
        for (int s : sides_) {
            if (s <= 0) throw ConfigError("schedule sides must be strictly positive");
            if (s < prev) throw ConfigError("schedule sides must be non-decreasing");
            prev = s;
        }
    }

    // The shipped default. Endpoints are fixed at 1 and 16; the interior is a
    // configurable choice, not a constant of the method.
    static ScaleSchedule default_schedule() {
        return ScaleSchedule({1, 2, 3, 4, 5, 6, 8, 10, 13, 16});
    }

    int num_scales() const { return static_cast<int>(sides_.size()); }
    const std::vector<int>& sides() const { return sides_; }

    int side(int scale) const {  // scale is 1-based throughout
        check_scale(scale);
        return sides_[scale - 1];
    }

    long long tokens(int scale) const {
        const long long s = side(scale);
        return s * s;
    }

    // Sum of token counts of the first `count` scales.
    long long prefix_tokens(int count) const {
        long long total = 0;
        for (int i = 1; i <= std::min<int>(count, num_scales()); ++i) total += tokens(i);
        return total;
    }

    long long total_tokens() const { return prefix_tokens(num_scales()); }

  private:
    void check_scale(int scale) const {
        if (scale < 1 || scale > num_scales()) {
            throw ConfigError("scale index " + std::to_string(scale) + " out of range 1.." +
                              std::to_string(num_scales()));
        }
    }

    std::vector<int> sides_;
};

inline long long total_tokens(const ScaleSchedule& schedule) { return schedule.total_tokens(); }

// -------------------------------------------------------------------------
// Scale grouping relative to a current scale: condensed (pinned firsts),
// local (most recent predecessors), intermediate (the evictable middle).

struct ScaleGroups {
    std::vector<int> condensed;
    std::vector<int> local;
    std::vector<int> intermediate;
};

// Partitions {1 .. current-1}. On tiny schedules an index claimed by both the
// condensed prefix and the local window counts as condensed, because pinning
// wins over recency.
inline ScaleGroups scale_groups(const ScaleSchedule& schedule, int current, int c_cds_count,
                                int n_local) {
    if (current < 1 || current > schedule.num_scales()) {
        throw ConfigError("scale_groups: current scale out of range");
    }
    ScaleGroups g;
    const int last_prev = current - 1;
    const int condensed_end = std::min(c_cds_count, last_prev);
    for (int i = 1; i <= condensed_end; ++i) g.condensed.push_back(i);
    const int local_begin = std::max(condensed_end + 1, last_prev - n_local + 1);
    for (int i = local_begin; i <= last_prev; ++i) g.local.push_back(i);
    for (int i = condensed_end + 1; i < local_begin; ++i) g.intermediate.push_back(i);
    return g;
}

// -------------------------------------------------------------------------
// Budgets.

struct ThetaMode {
    enum class Kind { Absolute, Quantile };
    Kind kind = Kind::Quantile;
    // Absolute: the similarity threshold theta. Quantile: the fraction rho of
    // layers classified as cache-demanding (lowest scores first).
    double value = 1.0 / 6.0;

    static ThetaMode absolute(double theta) { return {Kind::Absolute, theta}; }
    static ThetaMode quantile(double rho) { return {Kind::Quantile, rho}; }
};

struct BudgetSpec {
    long long c_min = 0;   // reserved capacity of cache-efficient layers, in tokens
    long long c_max = 0;   // expanded capacity of cache-demanding layers, in tokens
    int c_cds_count = 2;   // number of condensed (pinned) leading scales
    ThetaMode theta;

    // Requires condensed tokens strictly below C_min and C_min <= C_max.
    void validate(const ScaleSchedule& schedule) const {
        if (c_cds_count < 0 || c_cds_count > schedule.num_scales()) {
            throw ConfigError("budget: c_cds_count out of range");
        }
        const long long cds_total = schedule.prefix_tokens(c_cds_count);
        if (!(cds_total < c_min && c_min <= c_max)) {
            throw ConfigError(
                "budget invariant violated: need condensed tokens C_cds < C_min <= C_max, got "
                "C_cds=" + std::to_string(cds_total) + " C_min=" + std::to_string(c_min) +
                " C_max=" + std::to_string(c_max));
        }
        if (theta.kind == ThetaMode::Kind::Quantile && (theta.value < 0.0 || theta.value > 1.0)) {
            throw ConfigError("budget: quantile rho must be in [0, 1]");
        }
    }

    long long condensed_tokens(const ScaleSchedule& schedule) const {
        return schedule.prefix_tokens(c_cds_count);
    }
};

// Default configuration rule: two condensed scales; C_min holds the
// penultimate scale plus condensed; C_max additionally holds the final scale.
inline BudgetSpec derive_budgets(const ScaleSchedule& schedule) {
    const int k = schedule.num_scales();
    if (k < 4) {
        throw ConfigError("default budget rule needs K >= 4 scales, got K=" + std::to_string(k));
    }
    BudgetSpec spec;
    spec.c_cds_count = 2;
    const long long cds = schedule.prefix_tokens(2);
    spec.c_min = schedule.tokens(k - 1) + cds;
    spec.c_max = schedule.tokens(k - 1) + schedule.tokens(k) + cds;
    spec.validate(schedule);
    return spec;
}

inline BudgetSpec derive_budgets(const ScaleSchedule& schedule, const BudgetSpec& explicit_spec) {
    explicit_spec.validate(schedule);
    return explicit_spec;
}

// -------------------------------------------------------------------------
// Analytic memory model. Counts cached tokens only; the current scale's
// transient K/V is accounted separately as the working set.

struct MemoryModel {
    int n_layers = 0;
    int n_heads = 0;
    int head_dim = 0;
    int bytes_per_element = 2;

    void validate() const {
        if (n_layers <= 0 || n_heads <= 0 || head_dim <= 0 || bytes_per_element <= 0) {
            throw ConfigError("memory model fields must be positive");
        }
    }
};

// Bytes to hold `tokens` cached tokens in every layer; factor 2 = keys and values.
inline unsigned long long kv_bytes(long long tokens, const MemoryModel& model) {
    model.validate();
    if (tokens < 0) throw ConfigError("kv_bytes: negative token count");
    return 2ull * model.n_layers * model.n_heads * model.head_dim *
           static_cast<unsigned long long>(tokens) * model.bytes_per_element;
}

// Same accounting for a token total already summed across layers.
inline unsigned long long kv_bytes_fleet(long long tokens_across_layers,
                                         const MemoryModel& model) {
    model.validate();
    if (tokens_across_layers < 0) throw ConfigError("kv_bytes_fleet: negative token count");
    return 2ull * model.n_heads * model.head_dim *
           static_cast<unsigned long long>(tokens_across_layers) * model.bytes_per_element;
}

// -------------------------------------------------------------------------
// Analytic timeline: the size bookkeeping of the adaptive policy, walked with
// plain integers. Deliberately independent of the block-level cache engine so
// the two can cross-check each other.

enum class LayerClass { Efficient, Demanding };

struct AnalyticStep {
    int scale = 0;
    long long context_tokens = 0;  // cached before this step + current scale
    long long cached_after = 0;
    long long budget_after = 0;
    DecisionKind decision = DecisionKind::Cached;
};

struct AnalyticLayerTimeline {
    LayerClass cls = LayerClass::Efficient;
    std::vector<AnalyticStep> steps;
    long long peak_cached = 0;
    long long final_cached = 0;
    int first_overflow_scale = 0;  // 0 = never overflowed C_min
};

struct AnalyticTimeline {
    std::vector<AnalyticLayerTimeline> layers;
    long long full_cache_tokens = 0;
    long long total_final_tokens = 0;  // summed across layers

    double mean_final_tokens() const {
        return static_cast<double>(total_final_tokens) / static_cast<double>(layers.size());
    }
    // Fleet-average reduction in cached tokens vs. keeping the full history.
    double reduction_vs_full() const {
        return 1.0 - mean_final_tokens() / static_cast<double>(full_cache_tokens);
    }
};

inline AnalyticTimeline analytic_timeline(const ScaleSchedule& schedule, const BudgetSpec& spec,
                                          const std::vector<LayerClass>& classification) {
    spec.validate(schedule);
    if (classification.empty()) throw ConfigError("analytic_timeline: classification empty");

    AnalyticTimeline tl;
    tl.full_cache_tokens = schedule.total_tokens();
    const int k = schedule.num_scales();

    for (const LayerClass cls : classification) {
        AnalyticLayerTimeline lt;
        lt.cls = cls;
        long long budget = spec.c_min;
        long long cached = 0;
        std::deque<std::pair<int, long long>> blocks;  // (scale, tokens), insertion order

        for (int i = 1; i <= k; ++i) {
            const long long ti = schedule.tokens(i);
            AnalyticStep step;
            step.scale = i;
            step.context_tokens = cached + ti;

            if (ti > spec.c_max) {
                step.decision = DecisionKind::SkippedExceedsCmax;
            } else {
                blocks.emplace_back(i, ti);
                cached += ti;
                if (cached > budget) {
                    if (lt.first_overflow_scale == 0) lt.first_overflow_scale = i;
                    bool expanded = false;
                    // The similarity guard needs a predecessor scale, so no
                    // expansion can trigger at scale 1.
                    if (budget == spec.c_min && spec.c_min < spec.c_max &&
                        cls == LayerClass::Demanding && i >= 2) {
                        budget = spec.c_max;
                        expanded = true;
                    }
                    if (ti > budget) {
                        blocks.pop_back();
                        cached -= ti;
                        step.decision = DecisionKind::SkippedExceedsBudget;
                    } else {
                        bool evicted_any = false;
                        auto it = blocks.begin();
                        while (cached > budget) {
                            while (it != blocks.end() && it->first <= spec.c_cds_count) ++it;
                            if (it == blocks.end()) {
                                throw InvariantError(
                                    "analytic_timeline: condensed scales exceed budget");
                            }
                            cached -= it->second;
                            it = blocks.erase(it);
                            evicted_any = true;
                        }
                        step.decision = expanded ? DecisionKind::ExpandedThenCached
                                       : evicted_any ? DecisionKind::CachedWithEviction
                                                     : DecisionKind::Cached;
                    }
                } else {
                    step.decision = DecisionKind::Cached;
                }
            }
            step.cached_after = cached;
            step.budget_after = budget;
            lt.peak_cached = std::max(lt.peak_cached, cached);
            lt.steps.push_back(step);
        }
        lt.final_cached = cached;
        tl.total_final_tokens += cached;
        tl.layers.push_back(std::move(lt));
    }
    return tl;
}

}  // namespace amskv
