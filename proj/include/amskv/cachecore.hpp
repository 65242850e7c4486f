#pragma once

// Cache policies over whole-scale KV blocks: the adaptive per-layer state
// machine, CLRU eviction with pinned condensed scales, similarity-driven
// layer classification, and the baseline/ablation policies.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <numeric>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "amskv/decision.hpp"
#include "amskv/error.hpp"
#include "amskv/numkernel.hpp"
#include "amskv/schedule.hpp"

namespace amskv {

// -------------------------------------------------------------------------
// KVBlock: one scale's keys/values in one layer, split per head.

struct KVBlock {
    int scale_index = 0;  // 1-based
    int side = 0;
    std::vector<Matrix> keys;    // per head: (side*side) x head_dim
    std::vector<Matrix> values;  // same shapes as keys

    long long tokens() const { return static_cast<long long>(side) * side; }

    void validate() const {
        if (scale_index < 1 || side < 1) throw ShapeError("KVBlock: bad scale index or side");
        if (keys.empty() || keys.size() != values.size()) {
            throw ShapeError("KVBlock: keys/values head counts differ");
        }
        for (size_t h = 0; h < keys.size(); ++h) {
            if (!keys[h].same_shape(values[h]) || keys[h].rows != tokens()) {
                throw ShapeError("KVBlock: key/value shape mismatch at head " +
                                 std::to_string(h));
            }
        }
    }
};

struct CacheDecision {
    DecisionKind kind = DecisionKind::Cached;
    std::vector<int> evicted;  // scale indices, in eviction order
    std::optional<double> sim_score;
};

// -------------------------------------------------------------------------
// LayerCache: one layer's cache under the adaptive policy. Also serves the
// degenerate fixed-budget cases (full cache, static allocation) by setting
// C_min == C_max.

class LayerCache {
  public:
    LayerCache(int layer_id, BudgetSpec spec) : layer_id_(layer_id), spec_(spec) {
        budget_ = spec_.c_min;
    }

    // Feeds the next scale block. Scales must arrive in order 1, 2, 3, ...
    // `similarity` is the similarity score S(k_i, upsampled k_{i-1}); it is
    // required whenever the expansion guard is reachable (overflow while the
    // budget sits at C_min < C_max, scale >= 2) unless `demanding_override`
    // supplies the guard verdict directly (quantile classification).
    CacheDecision amskv_step(KVBlock block, std::optional<double> similarity,
                             std::optional<bool> demanding_override = std::nullopt) {
        block.validate();
        if (block.scale_index != next_scale_) {
            throw ProtocolError("amskv_step: expected scale " + std::to_string(next_scale_) +
                                ", got " + std::to_string(block.scale_index));
        }
        ++next_scale_;

        CacheDecision decision;
        decision.sim_score = similarity;
        const long long block_tokens = block.tokens();

        if (block_tokens > spec_.c_max) {
            decision.kind = DecisionKind::SkippedExceedsCmax;
            return decision;
        }

        blocks_.push_back(std::move(block));
        cached_tokens_ += block_tokens;

        if (cached_tokens_ > budget_) {
            bool expanded = false;
            if (budget_ == spec_.c_min && spec_.c_min < spec_.c_max &&
                blocks_.back().scale_index >= 2) {
                bool guard;
                if (demanding_override.has_value()) {
                    guard = *demanding_override;
                } else if (similarity.has_value()) {
                    if (spec_.theta.kind != ThetaMode::Kind::Absolute) {
                        throw ProtocolError(
                            "amskv_step: quantile theta mode needs a demanding_override");
                    }
                    guard = *similarity < spec_.theta.value;
                } else {
                    throw ProtocolError(
                        "amskv_step: similarity required at overflow for scale " +
                        std::to_string(blocks_.back().scale_index));
                }
                if (guard) {
                    budget_ = spec_.c_max;
                    demanding_ = true;
                    expanded = true;
                }
            }
            if (block_tokens > budget_) {
                cached_tokens_ -= block_tokens;
                blocks_.pop_back();
                decision.kind = DecisionKind::SkippedExceedsBudget;
                return decision;
            }
            decision.evicted = clru_evict(budget_);
            decision.kind = expanded                  ? DecisionKind::ExpandedThenCached
                            : !decision.evicted.empty() ? DecisionKind::CachedWithEviction
                                                        : DecisionKind::Cached;
        } else {
            decision.kind = DecisionKind::Cached;
        }
        return decision;
    }

    // Appends unconditionally (full-cache behaviour).
    CacheDecision append(KVBlock block) {
        block.validate();
        if (block.scale_index != next_scale_) {
            throw ProtocolError("append: out-of-order scale");
        }
        ++next_scale_;
        cached_tokens_ += block.tokens();
        blocks_.push_back(std::move(block));
        return {DecisionKind::Cached, {}, std::nullopt};
    }

    // Condensed-LRU: removes the oldest non-condensed blocks until the cache
    // fits `budget`. Condensed blocks (scale <= C_cds count) are never removed.
    std::vector<int> clru_evict(long long budget) {
        std::vector<int> evicted;
        auto it = blocks_.begin();
        while (cached_tokens_ > budget) {
            while (it != blocks_.end() && it->scale_index <= spec_.c_cds_count) ++it;
            if (it == blocks_.end()) {
                throw InvariantError("clru_evict: condensed scales alone exceed budget " +
                                     std::to_string(budget));
            }
            cached_tokens_ -= it->tokens();
            evicted.push_back(it->scale_index);
            it = blocks_.erase(it);
        }
        return evicted;
    }

    const std::deque<KVBlock>& blocks() const { return blocks_; }
    long long cached_tokens() const { return cached_tokens_; }
    long long budget() const { return budget_; }
    bool demanding() const { return demanding_; }
    int layer_id() const { return layer_id_; }
    const BudgetSpec& spec() const { return spec_; }
    int next_scale() const { return next_scale_; }

  private:
    int layer_id_;
    BudgetSpec spec_;
    long long budget_ = 0;
    long long cached_tokens_ = 0;
    int next_scale_ = 1;
    bool demanding_ = false;
    std::deque<KVBlock> blocks_;
};

// Ordered attention context for the scale being generated: cached blocks in
// insertion order, then the current block. The current scale always attends
// to itself even when the policy declined to cache it.
inline std::vector<const KVBlock*> context_view(const LayerCache& cache,
                                                const KVBlock& current_block) {
    std::vector<const KVBlock*> ctx;
    ctx.reserve(cache.blocks().size() + 1);
    for (const KVBlock& b : cache.blocks()) ctx.push_back(&b);
    ctx.push_back(&current_block);
    return ctx;
}

// -------------------------------------------------------------------------
// Layer classification.

inline bool classify_layer_absolute(double sim_score, double theta) {
    return sim_score < theta;  // true = cache-demanding
}

// How many layers the lowest-rho fraction selects. Rounded to nearest so
// rho = 1/6 of 6 layers picks exactly one.
inline int quantile_count(double rho, int n_layers) {
    const int n = static_cast<int>(std::lround(rho * n_layers));
    return std::clamp(n, 0, n_layers);
}

// Demanding set under quantile classification: the `quantile_count` layers
// with the lowest scores. Ties break toward the lower layer index.
inline std::vector<bool> quantile_demanding_set(const std::vector<double>& fleet_scores,
                                                double rho) {
    const int n = static_cast<int>(fleet_scores.size());
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (fleet_scores[a] != fleet_scores[b]) return fleet_scores[a] < fleet_scores[b];
        return a < b;
    });
    std::vector<bool> demanding(n, false);
    for (int i = 0; i < quantile_count(rho, n); ++i) demanding[order[i]] = true;
    return demanding;
}

// Spec-level entry point: absolute mode compares against theta; quantile mode
// ranks the layer's score within the fleet at the same trigger scale.
inline bool classify_layer(double sim_score, const BudgetSpec& spec,
                           const std::optional<std::vector<double>>& fleet_scores = std::nullopt,
                           int layer_index = 0) {
    if (spec.theta.kind == ThetaMode::Kind::Absolute) {
        return classify_layer_absolute(sim_score, spec.theta.value);
    }
    if (!fleet_scores.has_value()) {
        throw ConfigError("classify_layer: quantile mode requires fleet scores");
    }
    if (layer_index < 0 || layer_index >= static_cast<int>(fleet_scores->size())) {
        throw ConfigError("classify_layer: layer index outside fleet");
    }
    return quantile_demanding_set(*fleet_scores, spec.theta.value)[layer_index];
}

// -------------------------------------------------------------------------
// Policies.

struct AmsKvPolicy {};
struct FullCachePolicy {};
struct SlidingWindowPolicy {
    long long window_tokens = 0;
};
struct SinkWindowPolicy {
    long long sink_tokens = 0;
    long long window_tokens = 0;
};
enum class AllocStrategy { S1Uniform, S2Similarity };
struct StaticAllocPolicy {
    AllocStrategy strategy = AllocStrategy::S1Uniform;
    double large_fraction = 1.0 / 6.0;
};
enum class ScaleGroup { Condensed, Local, Intermediate };
struct AblationPolicy {
    ScaleGroup drop = ScaleGroup::Intermediate;
    int n_local = 2;
};

using PolicyKind = std::variant<AmsKvPolicy, FullCachePolicy, SlidingWindowPolicy,
                                SinkWindowPolicy, StaticAllocPolicy, AblationPolicy>;

inline std::string policy_kind_name(const PolicyKind& kind) {
    struct Visitor {
        std::string operator()(const AmsKvPolicy&) const { return "ams_kv"; }
        std::string operator()(const FullCachePolicy&) const { return "full_cache"; }
        std::string operator()(const SlidingWindowPolicy&) const { return "sliding_window"; }
        std::string operator()(const SinkWindowPolicy&) const { return "sink_window"; }
        std::string operator()(const StaticAllocPolicy&) const { return "static_alloc"; }
        std::string operator()(const AblationPolicy&) const { return "ablation"; }
    };
    return std::visit(Visitor{}, kind);
}

inline std::string to_string(ScaleGroup g) {
    switch (g) {
        case ScaleGroup::Condensed: return "condensed";
        case ScaleGroup::Local: return "local";
        case ScaleGroup::Intermediate: return "intermediate";
    }
    throw InvariantError("unknown ScaleGroup");
}

// -------------------------------------------------------------------------
// PolicyEngine: one per (policy, layer). Uniform step/context interface over
// the adaptive cache, the window baselines, and the read-time ablations.
//
// Window budgets are honoured at whole-scale granularity: a block whose
// suffix cannot fit is simply not retained. Realized (not nominal) budgets
// are what reports compare.

class PolicyEngine {
  public:
    PolicyEngine(const PolicyKind& kind, int layer_id, const ScaleSchedule& schedule,
                 const BudgetSpec& spec, bool large_alloc = false)
        : kind_(kind), layer_id_(layer_id), schedule_(schedule), spec_(spec) {
        if (std::holds_alternative<AmsKvPolicy>(kind_)) {
            cache_.emplace(layer_id, spec_);
        } else if (std::holds_alternative<StaticAllocPolicy>(kind_)) {
            BudgetSpec fixed = spec_;
            const long long b = large_alloc ? spec_.c_max : spec_.c_min;
            fixed.c_min = fixed.c_max = b;
            cache_.emplace(layer_id, fixed);
        } else if (std::holds_alternative<FullCachePolicy>(kind_) ||
                   std::holds_alternative<AblationPolicy>(kind_)) {
            BudgetSpec full = spec_;
            full.c_min = full.c_max = schedule.total_tokens();
            full.c_cds_count = std::min(full.c_cds_count, schedule.num_scales());
            cache_.emplace(layer_id, full);
        } else if (const auto* sink = std::get_if<SinkWindowPolicy>(&kind_)) {
            // Pinned prefix: the longest run of leading scales within the sink.
            long long acc = 0;
            for (int i = 1; i <= schedule.num_scales(); ++i) {
                acc += schedule.tokens(i);
                if (acc > sink->sink_tokens) break;
                pinned_prefix_ = i;
            }
        }
    }

    CacheDecision step(KVBlock block, std::optional<double> similarity,
                       std::optional<bool> demanding_override = std::nullopt) {
        block.validate();
        CacheDecision decision;
        if (const auto* win = std::get_if<SlidingWindowPolicy>(&kind_)) {
            decision = window_step(std::move(block), 0, win->window_tokens);
        } else if (const auto* sink = std::get_if<SinkWindowPolicy>(&kind_)) {
            decision = window_step(std::move(block), pinned_prefix_, sink->window_tokens);
        } else if (std::holds_alternative<FullCachePolicy>(kind_) ||
                   std::holds_alternative<AblationPolicy>(kind_)) {
            decision = cache_->append(std::move(block));
        } else {
            decision = cache_->amskv_step(std::move(block), similarity, demanding_override);
        }
        peak_cached_ = std::max(peak_cached_, cached_tokens());
        return decision;
    }

    // The context this layer's attention sees while generating `current`.
    std::vector<const KVBlock*> context(const KVBlock& current) const {
        if (const auto* abl = std::get_if<AblationPolicy>(&kind_)) {
            const ScaleGroups groups = scale_groups(schedule_, current.scale_index,
                                                    spec_.c_cds_count, abl->n_local);
            const std::vector<int>& dropped = abl->drop == ScaleGroup::Condensed ? groups.condensed
                                              : abl->drop == ScaleGroup::Local   ? groups.local
                                                                                 : groups.intermediate;
            std::vector<const KVBlock*> ctx;
            for (const KVBlock& b : cache_->blocks()) {
                if (!std::binary_search(dropped.begin(), dropped.end(), b.scale_index)) {
                    ctx.push_back(&b);
                }
            }
            ctx.push_back(&current);
            return ctx;
        }
        if (cache_.has_value()) return context_view(*cache_, current);
        std::vector<const KVBlock*> ctx;
        for (const KVBlock& b : window_blocks_) ctx.push_back(&b);
        ctx.push_back(&current);
        return ctx;
    }

    long long cached_tokens() const {
        if (cache_.has_value()) return cache_->cached_tokens();
        long long total = 0;
        for (const KVBlock& b : window_blocks_) total += b.tokens();
        return total;
    }

    long long context_tokens(const KVBlock& current) const {
        long long total = 0;
        for (const KVBlock* b : context(current)) total += b->tokens();
        return total;
    }

    long long budget() const { return cache_.has_value() ? cache_->budget() : window_budget(); }
    long long peak_cached() const { return peak_cached_; }
    bool demanding() const { return cache_.has_value() && cache_->demanding(); }
    const PolicyKind& kind() const { return kind_; }
    const LayerCache* layer_cache() const { return cache_.has_value() ? &*cache_ : nullptr; }

  private:
    long long window_budget() const {
        if (const auto* win = std::get_if<SlidingWindowPolicy>(&kind_)) return win->window_tokens;
        if (const auto* sink = std::get_if<SinkWindowPolicy>(&kind_)) {
            return schedule_.prefix_tokens(pinned_prefix_) + sink->window_tokens;
        }
        return 0;
    }

    // FIFO over whole scales; the first `pinned_prefix` scales are exempt.
    // If even the new block alone does not fit the window, it is dropped.
    CacheDecision window_step(KVBlock block, int pinned_prefix, long long window) {
        if (block.scale_index != next_scale_) throw ProtocolError("window step: out-of-order scale");
        ++next_scale_;
        CacheDecision decision;

        const bool pinned = block.scale_index <= pinned_prefix;
        if (!pinned && block.tokens() > window) {
            // Evict the whole unpinned tail: nothing recent enough fits.
            auto it = window_blocks_.begin();
            while (it != window_blocks_.end()) {
                if (it->scale_index <= pinned_prefix) {
                    ++it;
                } else {
                    decision.evicted.push_back(it->scale_index);
                    it = window_blocks_.erase(it);
                }
            }
            decision.kind = DecisionKind::SkippedExceedsBudget;
            return decision;
        }

        window_blocks_.push_back(std::move(block));
        long long unpinned = 0;
        for (const KVBlock& b : window_blocks_) {
            if (b.scale_index > pinned_prefix) unpinned += b.tokens();
        }
        auto it = window_blocks_.begin();
        while (unpinned > window) {
            while (it != window_blocks_.end() && it->scale_index <= pinned_prefix) ++it;
            if (it == window_blocks_.end()) {
                throw InvariantError("window_step: pinned scales exceed window");
            }
            unpinned -= it->tokens();
            decision.evicted.push_back(it->scale_index);
            it = window_blocks_.erase(it);
        }
        decision.kind = decision.evicted.empty() ? DecisionKind::Cached
                                                 : DecisionKind::CachedWithEviction;
        return decision;
    }

    PolicyKind kind_;
    int layer_id_;
    ScaleSchedule schedule_;
    BudgetSpec spec_;
    std::optional<LayerCache> cache_;
    std::deque<KVBlock> window_blocks_;
    int pinned_prefix_ = 0;
    int next_scale_ = 1;
    long long peak_cached_ = 0;
};

// Evenly spaced layer picks for the uniform static allocation (S1).
inline std::vector<bool> uniform_large_layers(int n_layers, int n_large) {
    std::vector<bool> large(n_layers, false);
    for (int j = 0; j < std::min(n_large, n_layers); ++j) {
        large[static_cast<int>(static_cast<long long>(j) * n_layers / n_large)] = true;
    }
    return large;
}

}  // namespace amskv
