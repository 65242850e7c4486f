#pragma once

// A deterministic, seeded, tiny decoder-only next-scale transformer. It
// embeds a small code vocabulary, conditions every scale on the bilinearly
// upsampled embeddings of the previous scale's chosen codes, and decodes
// greedily, exercising each cache policy with real attention arithmetic.
//
// The architecture is intentionally minimal: per layer a single residual
// attention block (q/k/v/out projections, no FFN, no norms), a shared code
// embedding, and a linear output head. Position enters through a
// parameter-free 2-D sinusoidal encoding over normalized grid coordinates,
// so spatially aligned tokens at adjacent scales receive nearby encodings.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "amskv/attn.hpp"
#include "amskv/cachecore.hpp"
#include "amskv/error.hpp"
#include "amskv/numkernel.hpp"
#include "amskv/schedule.hpp"

namespace amskv {

struct ToyModelConfig {
    int n_layers = 2;
    int n_heads = 2;
    int head_dim = 8;
    int vocab_size = 32;
    ScaleSchedule schedule = ScaleSchedule::default_schedule();
    uint64_t seed = 1;

    int d_model() const { return n_heads * head_dim; }

    void validate() const {
        if (n_layers < 2) throw ConfigError("toy model needs n_layers >= 2");
        if (vocab_size < 2) throw ConfigError("toy model needs vocab_size >= 2");
        if (n_heads < 1 || head_dim < 1) throw ConfigError("toy model head dims must be >= 1");
    }

    MemoryModel memory_model(int bytes_per_element) const {
        return MemoryModel{n_layers, n_heads, head_dim, bytes_per_element};
    }
};

struct LayerWeights {
    Matrix wq, wk, wv, wo;  // d_model x d_model
};

struct ToyModel {
    ToyModelConfig config;
    Matrix embedding;    // vocab x d_model; row 0 doubles as the start embedding
    std::vector<LayerWeights> layers;
    Matrix output_head;  // d_model x vocab
};

// All weights come from one SplitMix64 stream seeded with config.seed, drawn
// in a fixed order: embedding, then q/k/v/out per layer, then the head.
// Projections are scaled by 1/sqrt(d_model).
inline ToyModel init_model(const ToyModelConfig& config) {
    config.validate();
    ToyModel model;
    model.config = config;
    const int d = config.d_model();
    const double proj_scale = 1.0 / std::sqrt(static_cast<double>(d));
    Rng rng(config.seed);

    const auto draw = [&](int rows, int cols, double scale) {
        Matrix m(rows, cols);
        for (auto& v : m.data) v = rng.next_gaussian() * scale;
        return m;
    };

    model.embedding = draw(config.vocab_size, d, 1.0);
    for (int l = 0; l < config.n_layers; ++l) {
        LayerWeights w;
        w.wq = draw(d, d, proj_scale);
        w.wk = draw(d, d, proj_scale);
        w.wv = draw(d, d, proj_scale);
        w.wo = draw(d, d, proj_scale);
        model.layers.push_back(std::move(w));
    }
    model.output_head = draw(d, config.vocab_size, proj_scale);
    return model;
}

// Fixed 2-D sinusoidal positional encoding on normalized coordinates
// (r+0.5)/side, (c+0.5)/side. Channel ch uses the row axis when ch%4 < 2 and
// the column axis otherwise, sine on even channels, cosine on odd, with
// frequency pi * 2^(ch/4).
inline Matrix positional_encoding(int side, int d_model) {
    Matrix pe(side * side, d_model);
    for (int r = 0; r < side; ++r) {
        for (int c = 0; c < side; ++c) {
            const int row = r * side + c;
            for (int ch = 0; ch < d_model; ++ch) {
                const double coord = ((ch % 4) < 2 ? r : c) + 0.5;
                const double freq = std::numbers::pi * std::pow(2.0, ch / 4);
                const double angle = coord / side * freq;
                pe.at(row, ch) = (ch % 2 == 0) ? std::sin(angle) : std::cos(angle);
            }
        }
    }
    return pe;
}

inline std::vector<Matrix> split_heads(const Matrix& m, int n_heads) {
    if (m.cols % n_heads != 0) throw ShapeError("split_heads: cols not divisible by heads");
    const int hd = m.cols / n_heads;
    std::vector<Matrix> heads;
    heads.reserve(n_heads);
    for (int h = 0; h < n_heads; ++h) {
        Matrix head(m.rows, hd);
        for (int r = 0; r < m.rows; ++r)
            for (int c = 0; c < hd; ++c) head.at(r, c) = m.at(r, h * hd + c);
        heads.push_back(std::move(head));
    }
    return heads;
}

inline Matrix merge_heads(const std::vector<Matrix>& heads) {
    const int hd = heads[0].cols;
    Matrix m(heads[0].rows, hd * static_cast<int>(heads.size()));
    for (size_t h = 0; h < heads.size(); ++h)
        for (int r = 0; r < m.rows; ++r)
            for (int c = 0; c < hd; ++c) m.at(r, h * hd + c) = heads[h].at(r, c);
    return m;
}

// -------------------------------------------------------------------------
// Generation trace.

struct StepRecord {
    int scale = 0;
    int layer = 0;
    DecisionKind decision = DecisionKind::Cached;
    std::vector<int> evicted;
    long long cached_after = 0;
    long long budget_after = 0;
    long long context_tokens = 0;
    std::optional<double> similarity;       // joint score fed to the guard
    std::optional<bool> guard_demanding;    // resolved guard verdict, when evaluated
};

struct GenerationTrace {
    std::vector<std::vector<int>> tokens;       // [scale] -> row-major grid
    std::vector<StepRecord> steps;              // scale-major, layer-minor
    std::vector<std::vector<double>> sim_joint; // [layer][scale-2], scales 2..K
    std::vector<std::vector<double>> sim_rms;
    std::vector<FidelityEntry> fidelity;        // per scale, when oracle enabled
    std::vector<long long> peak_cached;         // per layer
    std::vector<long long> final_cached;
    std::vector<long long> budget_final;
    std::vector<bool> demanding;                // per layer, final classification
    std::vector<bool> large_alloc;              // static allocation assignment
    std::vector<unsigned long long> flops_per_scale;
    unsigned long long attn_flops = 0;
    int d_model = 0;
};

namespace detail {

inline Matrix embed_tokens(const ToyModel& model, const std::vector<int>& tokens) {
    Matrix out(static_cast<int>(tokens.size()), model.config.d_model());
    for (size_t t = 0; t < tokens.size(); ++t) {
        for (int c = 0; c < out.cols; ++c) out.at(static_cast<int>(t), c) =
            model.embedding.at(tokens[t], c);
    }
    return out;
}

// Input hidden state for a scale: the start embedding at scale 1, otherwise
// the upsampled embeddings of the previous scale's codes; plus positions.
inline Matrix scale_input(const ToyModel& model, int scale,
                          const std::vector<std::vector<int>>& tokens_so_far) {
    const int side = model.config.schedule.side(scale);
    const int d = model.config.d_model();
    Matrix x(side * side, d);
    if (scale == 1) {
        for (int r = 0; r < x.rows; ++r)
            for (int c = 0; c < d; ++c) x.at(r, c) = model.embedding.at(0, c);
    } else {
        const int prev_side = model.config.schedule.side(scale - 1);
        const Matrix prev_emb = embed_tokens(model, tokens_so_far[scale - 2]);
        const SpatialMap up =
            bilinear_resize(spatial_from_matrix(prev_emb, prev_side), side, side);
        x = matrix_from_spatial(up);
    }
    const Matrix pe = positional_encoding(side, d);
    for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += pe.data[i];
    return x;
}

inline KVBlock project_block(const ToyModel& model, const LayerWeights& w, const Matrix& h,
                             int scale, int side) {
    KVBlock block;
    block.scale_index = scale;
    block.side = side;
    block.keys = split_heads(matmul(h, w.wk), model.config.n_heads);
    block.values = split_heads(matmul(h, w.wv), model.config.n_heads);
    return block;
}

inline std::vector<int> greedy_tokens(const Matrix& logits) {
    std::vector<int> tokens(logits.rows);
    for (int r = 0; r < logits.rows; ++r) {
        int best = 0;
        for (int c = 1; c < logits.cols; ++c) {
            if (logits.at(r, c) > logits.at(r, best)) best = c;
        }
        tokens[r] = best;
    }
    return tokens;
}

}  // namespace detail

// Forward declaration: the S2 allocation calibrates on a full-cache pass.
inline GenerationTrace generate(const ToyModel& model, const PolicyKind& policy,
                                const BudgetSpec& spec, bool compare_oracle);

// Per-layer mean inter-scale key similarity from a full-cache pass; the
// ranking signal for similarity-aware static allocation.
inline std::vector<double> calibrate_layer_similarity(const ToyModel& model,
                                                      const BudgetSpec& spec) {
    const GenerationTrace trace = generate(model, FullCachePolicy{}, spec, false);
    std::vector<double> mean(model.config.n_layers, 0.0);
    for (int l = 0; l < model.config.n_layers; ++l) {
        for (double s : trace.sim_joint[l]) mean[l] += s;
        mean[l] /= static_cast<double>(trace.sim_joint[l].size());
    }
    return mean;
}

inline GenerationTrace generate(const ToyModel& model, const PolicyKind& policy,
                                const BudgetSpec& spec, bool compare_oracle) {
    model.config.validate();
    spec.validate(model.config.schedule);
    const ScaleSchedule& schedule = model.config.schedule;
    const int n_layers = model.config.n_layers;
    const int n_heads = model.config.n_heads;
    const int k = schedule.num_scales();

    // Static allocation: resolve which layers get the large budget.
    std::vector<bool> large(n_layers, false);
    if (const auto* alloc = std::get_if<StaticAllocPolicy>(&policy)) {
        const int n_large = quantile_count(alloc->large_fraction, n_layers);
        if (alloc->strategy == AllocStrategy::S1Uniform) {
            large = uniform_large_layers(n_layers, n_large);
        } else {
            large = quantile_demanding_set(calibrate_layer_similarity(model, spec),
                                           static_cast<double>(n_large) / n_layers);
        }
    }

    std::vector<PolicyEngine> engines;
    engines.reserve(n_layers);
    for (int l = 0; l < n_layers; ++l) engines.emplace_back(policy, l, schedule, spec, large[l]);

    const bool is_amskv = std::holds_alternative<AmsKvPolicy>(policy);
    const bool quantile_theta = spec.theta.kind == ThetaMode::Kind::Quantile;

    GenerationTrace trace;
    trace.d_model = model.config.d_model();
    trace.large_alloc = std::holds_alternative<StaticAllocPolicy>(policy)
                            ? large
                            : std::vector<bool>{};
    trace.sim_joint.resize(n_layers);
    trace.sim_rms.resize(n_layers);

    // Oracle pass state (teacher-forced on the policy pass's tokens).
    std::vector<std::vector<KVBlock>> oracle_blocks(n_layers);

    // One-step transient: previous scale's keys per layer, for the guard.
    std::vector<std::vector<Matrix>> prev_keys(n_layers);
    int prev_side = 0;

    for (int scale = 1; scale <= k; ++scale) {
        const int side = schedule.side(scale);
        const long long ti = schedule.tokens(scale);
        Matrix hidden = detail::scale_input(model, scale, trace.tokens);
        const Matrix scale_input_copy = hidden;  // oracle pass reuses it

        // Policy pass over all layers; cache updates are deferred to the end
        // of the scale so quantile classification can gather every layer's
        // similarity first.
        std::vector<KVBlock> fresh_blocks;
        std::vector<std::optional<double>> sims(n_layers);
        std::vector<long long> ctx_tokens(n_layers);
        unsigned long long scale_flops = 0;

        for (int l = 0; l < n_layers; ++l) {
            const LayerWeights& w = model.layers[l];
            KVBlock block = detail::project_block(model, w, hidden, scale, side);
            if (scale >= 2) {
                const SimilarityScore s =
                    inter_scale_similarity(block.keys, side, prev_keys[l], prev_side);
                sims[l] = s.joint;
                trace.sim_joint[l].push_back(s.joint);
                trace.sim_rms[l].push_back(s.rms);
            }
            const std::vector<Matrix> q_heads =
                split_heads(matmul(hidden, w.wq), n_heads);
            const auto ctx = engines[l].context(block);
            ctx_tokens[l] = 0;
            for (const KVBlock* b : ctx) ctx_tokens[l] += b->tokens();
            scale_flops += 2ull * ctx_tokens[l] * ti * model.config.head_dim * n_heads;

            const AttentionOutput att = block_attention(q_heads, ctx);
            const Matrix merged = merge_heads(att.outputs);
            const Matrix projected = matmul(merged, w.wo);
            for (size_t idx = 0; idx < hidden.data.size(); ++idx) {
                hidden.data[idx] += projected.data[idx];
            }
            prev_keys[l] = block.keys;
            fresh_blocks.push_back(std::move(block));
        }

        // Resolve the quantile guard fleet-wide at this scale, if any layer
        // could reach it.
        std::vector<std::optional<bool>> overrides(n_layers);
        if (is_amskv && quantile_theta && scale >= 2) {
            bool any_guard_reachable = false;
            for (const PolicyEngine& e : engines) {
                if (e.budget() == spec.c_min && spec.c_min < spec.c_max &&
                    e.cached_tokens() + ti > spec.c_min && ti <= spec.c_max) {
                    any_guard_reachable = true;
                    break;
                }
            }
            if (any_guard_reachable) {
                std::vector<double> fleet(n_layers);
                for (int l = 0; l < n_layers; ++l) fleet[l] = *sims[l];
                const std::vector<bool> demanding =
                    quantile_demanding_set(fleet, spec.theta.value);
                for (int l = 0; l < n_layers; ++l) overrides[l] = demanding[l];
            }
        }

        for (int l = 0; l < n_layers; ++l) {
            const CacheDecision decision =
                engines[l].step(std::move(fresh_blocks[l]), sims[l], overrides[l]);
            StepRecord rec;
            rec.scale = scale;
            rec.layer = l;
            rec.decision = decision.kind;
            rec.evicted = decision.evicted;
            rec.cached_after = engines[l].cached_tokens();
            rec.budget_after = engines[l].budget();
            rec.context_tokens = ctx_tokens[l];
            rec.similarity = sims[l];
            if (overrides[l].has_value()) {
                rec.guard_demanding = overrides[l];
            } else if (sims[l].has_value() &&
                       spec.theta.kind == ThetaMode::Kind::Absolute) {
                rec.guard_demanding = *sims[l] < spec.theta.value;
            }
            trace.steps.push_back(std::move(rec));
        }

        const Matrix logits = matmul(hidden, model.output_head);
        trace.tokens.push_back(detail::greedy_tokens(logits));
        trace.flops_per_scale.push_back(scale_flops);
        trace.attn_flops += scale_flops;

        if (compare_oracle) {
            Matrix oracle_hidden = scale_input_copy;
            for (int l = 0; l < n_layers; ++l) {
                const LayerWeights& w = model.layers[l];
                KVBlock block = detail::project_block(model, w, oracle_hidden, scale, side);
                const std::vector<Matrix> q_heads =
                    split_heads(matmul(oracle_hidden, w.wq), n_heads);
                std::vector<const KVBlock*> ctx;
                for (const KVBlock& b : oracle_blocks[l]) ctx.push_back(&b);
                ctx.push_back(&block);
                const AttentionOutput att = block_attention(q_heads, ctx);
                const Matrix merged = merge_heads(att.outputs);
                const Matrix projected = matmul(merged, w.wo);
                for (size_t idx = 0; idx < oracle_hidden.data.size(); ++idx) {
                    oracle_hidden.data[idx] += projected.data[idx];
                }
                oracle_blocks[l].push_back(std::move(block));
            }
            FidelityEntry f;
            f.scale = scale;
            f.rel_l2 = relative_l2(hidden, oracle_hidden);
            f.cosine = cosine_similarity(hidden, oracle_hidden);
            trace.fidelity.push_back(f);
        }

        prev_side = side;
    }

    for (int l = 0; l < n_layers; ++l) {
        trace.peak_cached.push_back(engines[l].peak_cached());
        trace.final_cached.push_back(engines[l].cached_tokens());
        trace.budget_final.push_back(engines[l].budget());
        trace.demanding.push_back(engines[l].demanding());
    }
    return trace;
}

// Similarity score a layer would feed the guard at a given scale, recomputed
// from the transient keys recorded during generation.
inline double similarity_stream(const GenerationTrace& trace, int layer, int scale) {
    if (scale < 2 || scale - 2 >= static_cast<int>(trace.sim_joint[layer].size())) {
        throw ProtocolError("similarity_stream: no transient keys for scale " +
                            std::to_string(scale));
    }
    return trace.sim_joint[layer][scale - 2];
}

}  // namespace amskv
