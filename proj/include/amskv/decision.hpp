#pragma once

#include <string>

#include "amskv/error.hpp"

namespace amskv {

// Outcome of feeding one scale block to a layer cache. `ExpandedThenCached`
// marks the single step at which a layer's budget grew from C_min to C_max.
enum class DecisionKind {
    Cached,
    CachedWithEviction,
    SkippedExceedsCmax,
    SkippedExceedsBudget,
    ExpandedThenCached,
};

inline std::string to_string(DecisionKind k) {
    switch (k) {
        case DecisionKind::Cached: return "cached";
        case DecisionKind::CachedWithEviction: return "cached_with_eviction";
        case DecisionKind::SkippedExceedsCmax: return "skipped_exceeds_cmax";
        case DecisionKind::SkippedExceedsBudget: return "skipped_exceeds_budget";
        case DecisionKind::ExpandedThenCached: return "expanded_then_cached";
    }
    throw InvariantError("unknown DecisionKind");
}

inline DecisionKind decision_from_string(const std::string& s) {
    if (s == "cached") return DecisionKind::Cached;
    if (s == "cached_with_eviction") return DecisionKind::CachedWithEviction;
    if (s == "skipped_exceeds_cmax") return DecisionKind::SkippedExceedsCmax;
    if (s == "skipped_exceeds_budget") return DecisionKind::SkippedExceedsBudget;
    if (s == "expanded_then_cached") return DecisionKind::ExpandedThenCached;
    throw ConfigError("unknown decision kind: " + s);
}

inline bool decision_caches_block(DecisionKind k) {
    return k == DecisionKind::Cached || k == DecisionKind::CachedWithEviction ||
           k == DecisionKind::ExpandedThenCached;
}

}  // namespace amskv
