#pragma once

// JSON (de)serialization shared by the trace format, the experiment config,
// and the reports. Uses alphabetically-ordered keys throughout, which makes
// every dump canonical and byte-stable.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "amskv/cachecore.hpp"
#include "amskv/error.hpp"
#include "amskv/schedule.hpp"

namespace amskv {

using Json = nlohmann::json;

inline Json theta_to_json(const ThetaMode& theta) {
    return Json{{"mode", theta.kind == ThetaMode::Kind::Absolute ? "absolute" : "quantile"},
                {"value", theta.value}};
}

inline ThetaMode theta_from_json(const Json& j) {
    const std::string mode = j.at("mode").get<std::string>();
    const double value = j.at("value").get<double>();
    if (mode == "absolute") return ThetaMode::absolute(value);
    if (mode == "quantile") return ThetaMode::quantile(value);
    throw ConfigError("theta mode must be 'absolute' or 'quantile', got '" + mode + "'");
}

inline Json budget_to_json(const BudgetSpec& spec) {
    return Json{{"c_cds_count", spec.c_cds_count},
                {"c_max", spec.c_max},
                {"c_min", spec.c_min},
                {"theta", theta_to_json(spec.theta)}};
}

inline BudgetSpec budget_from_json(const Json& j) {
    BudgetSpec spec;
    spec.c_min = j.at("c_min").get<long long>();
    spec.c_max = j.at("c_max").get<long long>();
    spec.c_cds_count = j.at("c_cds_count").get<int>();
    if (j.contains("theta")) spec.theta = theta_from_json(j.at("theta"));
    return spec;
}

inline Json policy_to_json(const PolicyKind& kind) {
    struct Visitor {
        Json operator()(const AmsKvPolicy&) const { return Json{{"kind", "ams_kv"}}; }
        Json operator()(const FullCachePolicy&) const { return Json{{"kind", "full_cache"}}; }
        Json operator()(const SlidingWindowPolicy& p) const {
            return Json{{"kind", "sliding_window"}, {"window_tokens", p.window_tokens}};
        }
        Json operator()(const SinkWindowPolicy& p) const {
            return Json{{"kind", "sink_window"},
                        {"sink_tokens", p.sink_tokens},
                        {"window_tokens", p.window_tokens}};
        }
        Json operator()(const StaticAllocPolicy& p) const {
            return Json{{"kind", "static_alloc"},
                        {"large_fraction", p.large_fraction},
                        {"strategy",
                         p.strategy == AllocStrategy::S1Uniform ? "s1_uniform" : "s2_similarity"}};
        }
        Json operator()(const AblationPolicy& p) const {
            return Json{{"drop", to_string(p.drop)}, {"kind", "ablation"}, {"n_local", p.n_local}};
        }
    };
    return std::visit(Visitor{}, kind);
}

inline PolicyKind policy_from_json(const Json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "ams_kv") return AmsKvPolicy{};
    if (kind == "full_cache") return FullCachePolicy{};
    if (kind == "sliding_window") {
        SlidingWindowPolicy p;
        p.window_tokens = j.at("window_tokens").get<long long>();
        if (p.window_tokens <= 0) throw ConfigError("sliding_window: window_tokens must be positive");
        return p;
    }
    if (kind == "sink_window") {
        SinkWindowPolicy p;
        p.sink_tokens = j.at("sink_tokens").get<long long>();
        p.window_tokens = j.at("window_tokens").get<long long>();
        if (p.sink_tokens <= 0 || p.window_tokens <= 0) {
            throw ConfigError("sink_window: sink/window token counts must be positive");
        }
        return p;
    }
    if (kind == "static_alloc") {
        StaticAllocPolicy p;
        const std::string strategy = j.at("strategy").get<std::string>();
        if (strategy == "s1_uniform") {
            p.strategy = AllocStrategy::S1Uniform;
        } else if (strategy == "s2_similarity") {
            p.strategy = AllocStrategy::S2Similarity;
        } else {
            throw ConfigError("static_alloc: unknown strategy '" + strategy + "'");
        }
        p.large_fraction = j.at("large_fraction").get<double>();
        if (p.large_fraction < 0.0 || p.large_fraction > 1.0) {
            throw ConfigError("static_alloc: large_fraction must be in [0, 1]");
        }
        return p;
    }
    if (kind == "ablation") {
        AblationPolicy p;
        const std::string drop = j.at("drop").get<std::string>();
        if (drop == "condensed") {
            p.drop = ScaleGroup::Condensed;
        } else if (drop == "local") {
            p.drop = ScaleGroup::Local;
        } else if (drop == "intermediate") {
            p.drop = ScaleGroup::Intermediate;
        } else {
            throw ConfigError("ablation: unknown group '" + drop + "'");
        }
        if (j.contains("n_local")) p.n_local = j.at("n_local").get<int>();
        if (p.n_local < 0) throw ConfigError("ablation: n_local must be >= 0");
        return p;
    }
    throw ConfigError("unknown policy kind: '" + kind + "'");
}

// FNV-1a 64-bit over a canonical JSON dump; stable across runs and platforms.
inline std::string fnv1a_hex(const std::string& text) {
    uint64_t hash = 0xCBF29CE484222325ull;
    for (unsigned char c : text) {
        hash ^= c;
        hash *= 0x100000001B3ull;
    }
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[i] = digits[hash & 0xF];
        hash >>= 4;
    }
    return out;
}

}  // namespace amskv
