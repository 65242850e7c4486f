#pragma once

// Block-scale attention with a full-context oracle, the attention-density
// analyzer, and the inter-scale key similarity metric.

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "amskv/cachecore.hpp"
#include "amskv/error.hpp"
#include "amskv/numkernel.hpp"

namespace amskv {

struct AttentionOutput {
    std::vector<Matrix> outputs;  // per head: T_q x head_dim
    // slices[head][context block]: T_q x T_block normalized attention weights.
    // Populated only when requested.
    std::vector<std::vector<Matrix>> slices;
};

// Scaled dot-product attention of `queries` over an ordered KV context.
// Softmax normalization is shared across all context blocks, so the result is
// identical (up to rounding) to attention over the concatenated context.
// Attention over the provided context is unmasked: within the current scale
// it is fully bidirectional, and cross-scale causality is what the cache
// itself enforces by only ever holding past scales.
//
// The generation path streams block by block with an online softmax and never
// materializes the T_q x T_ctx weight matrix; slice materialization switches
// to a two-pass computation.
inline AttentionOutput block_attention(const std::vector<Matrix>& queries,
                                       std::span<const KVBlock* const> context,
                                       bool materialize_slices = false) {
    if (context.empty()) throw ShapeError("block_attention: empty context");
    const int n_heads = static_cast<int>(queries.size());
    if (n_heads == 0) throw ShapeError("block_attention: no query heads");
    const int head_dim = queries[0].cols;
    for (const KVBlock* b : context) {
        if (static_cast<int>(b->keys.size()) != n_heads) {
            throw ShapeError("block_attention: context head count mismatch");
        }
        for (int h = 0; h < n_heads; ++h) {
            if (b->keys[h].cols != head_dim || queries[h].cols != head_dim) {
                throw ShapeError("block_attention: head_dim mismatch");
            }
        }
    }

    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(head_dim));
    AttentionOutput result;
    result.outputs.reserve(n_heads);
    if (materialize_slices) result.slices.resize(n_heads);

    for (int h = 0; h < n_heads; ++h) {
        const Matrix& q = queries[h];
        Matrix out(q.rows, head_dim);

        if (!materialize_slices) {
            std::vector<double> acc(head_dim);
            for (int p = 0; p < q.rows; ++p) {
                double row_max = -std::numeric_limits<double>::infinity();
                double denom = 0.0;
                std::fill(acc.begin(), acc.end(), 0.0);
                for (const KVBlock* b : context) {
                    const Matrix& k = b->keys[h];
                    const Matrix& v = b->values[h];
                    for (int t = 0; t < k.rows; ++t) {
                        const double s = dot_row(q, p, k, t) * inv_sqrt_d;
                        if (s <= row_max) {
                            const double w = std::exp(s - row_max);
                            denom += w;
                            for (int j = 0; j < head_dim; ++j) acc[j] += w * v.at(t, j);
                        } else {
                            const double r = std::exp(row_max - s);
                            denom = denom * r + 1.0;
                            for (int j = 0; j < head_dim; ++j) acc[j] = acc[j] * r + v.at(t, j);
                            row_max = s;
                        }
                    }
                }
                for (int j = 0; j < head_dim; ++j) out.at(p, j) = acc[j] / denom;
            }
        } else {
            // Pass 1: per-row max and denominator over the whole context.
            std::vector<double> row_max(q.rows, -std::numeric_limits<double>::infinity());
            std::vector<double> denom(q.rows, 0.0);
            for (const KVBlock* b : context) {
                const Matrix& k = b->keys[h];
                for (int p = 0; p < q.rows; ++p) {
                    for (int t = 0; t < k.rows; ++t) {
                        row_max[p] = std::max(row_max[p], dot_row(q, p, k, t) * inv_sqrt_d);
                    }
                }
            }
            for (const KVBlock* b : context) {
                const Matrix& k = b->keys[h];
                for (int p = 0; p < q.rows; ++p) {
                    for (int t = 0; t < k.rows; ++t) {
                        denom[p] += std::exp(dot_row(q, p, k, t) * inv_sqrt_d - row_max[p]);
                    }
                }
            }
            // Pass 2: normalized slices plus the weighted value sum.
            for (const KVBlock* b : context) {
                const Matrix& k = b->keys[h];
                const Matrix& v = b->values[h];
                Matrix slice(q.rows, k.rows);
                for (int p = 0; p < q.rows; ++p) {
                    for (int t = 0; t < k.rows; ++t) {
                        const double w =
                            std::exp(dot_row(q, p, k, t) * inv_sqrt_d - row_max[p]) / denom[p];
                        slice.at(p, t) = w;
                        for (int j = 0; j < head_dim; ++j) out.at(p, j) += w * v.at(t, j);
                    }
                }
                result.slices[h].push_back(std::move(slice));
            }
        }
        result.outputs.push_back(std::move(out));
    }
    return result;
}

// The reference every fidelity report is measured against: attention over the
// complete history. Same code path as block_attention on purpose.
inline AttentionOutput full_context_oracle(std::span<const KVBlock* const> all_blocks,
                                           const std::vector<Matrix>& queries,
                                           bool materialize_slices = false) {
    return block_attention(queries, all_blocks, materialize_slices);
}

// -------------------------------------------------------------------------
// Attention density: total attention mass flowing from the generating scale j
// onto each context scale i, normalized by T_i. Densities over a full context
// conserve mass: sum_i T_i * d_i == T_j per head.

struct DensityTable {
    int generating_scale = 0;
    long long generating_tokens = 0;
    std::vector<int> context_scales;          // 1..j inclusive
    std::vector<long long> context_tokens;    // T_i per entry
    std::vector<std::vector<double>> density; // [head][context index]

    int n_heads() const { return static_cast<int>(density.size()); }

    double conservation(int head) const {
        double total = 0.0;
        for (size_t i = 0; i < context_tokens.size(); ++i) {
            total += static_cast<double>(context_tokens[i]) * density[head][i];
        }
        return total;
    }
};

// `slices[head][idx]` must cover every context scale 1..j, in order, as
// produced by block_attention over a full context.
inline DensityTable attention_density(const std::vector<std::vector<Matrix>>& slices,
                                      const std::vector<int>& context_scales,
                                      int generating_scale) {
    if (slices.empty()) throw ShapeError("attention_density: no heads");
    if (static_cast<int>(context_scales.size()) != generating_scale) {
        throw ShapeError("attention_density: slices must cover every scale 1.." +
                         std::to_string(generating_scale));
    }
    for (size_t i = 0; i < context_scales.size(); ++i) {
        if (context_scales[i] != static_cast<int>(i) + 1) {
            throw ShapeError("attention_density: context scales must be 1..j in order");
        }
    }
    DensityTable table;
    table.generating_scale = generating_scale;
    table.context_scales = context_scales;
    table.generating_tokens = slices[0].empty() ? 0 : slices[0][0].rows;

    for (const auto& head_slices : slices) {
        if (head_slices.size() != context_scales.size()) {
            throw ShapeError("attention_density: missing slice for a context scale");
        }
        std::vector<double> row;
        row.reserve(head_slices.size());
        for (const Matrix& slice : head_slices) {
            if (slice.rows != table.generating_tokens) {
                throw ShapeError("attention_density: slice row count mismatch");
            }
            double mass = 0.0;
            for (double v : slice.data) mass += v;
            row.push_back(mass / slice.cols);
        }
        table.density.push_back(std::move(row));
    }
    table.context_tokens.reserve(slices[0].size());
    for (const Matrix& slice : slices[0]) table.context_tokens.push_back(slice.cols);
    return table;
}

// -------------------------------------------------------------------------
// Inter-scale key similarity: negative l2 distance between the current
// scale's keys and the previous scale's keys after 2-D bilinear upsampling
// to the current resolution. Keys only; values are never interpolated.

struct SimilarityScore {
    double joint = 0.0;                // -l2 over all heads jointly
    double rms = 0.0;                  // element-count-normalized variant
    std::vector<double> per_head;      // -l2 per head, for reporting
};

inline SimilarityScore inter_scale_similarity(const std::vector<Matrix>& k_curr, int side_curr,
                                              const std::vector<Matrix>& k_prev, int side_prev) {
    if (k_curr.empty() || k_curr.size() != k_prev.size()) {
        throw ShapeError("inter_scale_similarity: head count mismatch");
    }
    SimilarityScore score;
    double total_sq = 0.0;
    size_t total_elems = 0;
    for (size_t h = 0; h < k_curr.size(); ++h) {
        if (k_curr[h].cols != k_prev[h].cols) {
            throw ShapeError("inter_scale_similarity: head_dim mismatch");
        }
        if (k_curr[h].rows != side_curr * side_curr || k_prev[h].rows != side_prev * side_prev) {
            throw ShapeError("inter_scale_similarity: token count does not match spatial side");
        }
        const SpatialMap prev_map = spatial_from_matrix(k_prev[h], side_prev);
        const Matrix upsampled = matrix_from_spatial(bilinear_resize(prev_map, side_curr, side_curr));
        double head_sq = 0.0;
        for (size_t idx = 0; idx < k_curr[h].data.size(); ++idx) {
            const double diff = k_curr[h].data[idx] - upsampled.data[idx];
            head_sq += diff * diff;
        }
        score.per_head.push_back(-std::sqrt(head_sq));
        total_sq += head_sq;
        total_elems += k_curr[h].data.size();
    }
    score.joint = -std::sqrt(total_sq);
    score.rms = -std::sqrt(total_sq / static_cast<double>(total_elems));
    return score;
}

// -------------------------------------------------------------------------
// Fidelity metrics: deviation of policy-constrained outputs from the oracle.

struct FidelityEntry {
    int scale = 0;
    double rel_l2 = 0.0;
    double cosine = 1.0;
};

inline double relative_l2(const Matrix& a, const Matrix& ref) {
    if (!a.same_shape(ref)) throw ShapeError("relative_l2: shape mismatch");
    double diff_sq = 0.0, ref_sq = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - ref.data[i];
        diff_sq += d * d;
        ref_sq += ref.data[i] * ref.data[i];
    }
    if (ref_sq == 0.0) {
        return diff_sq == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    }
    return std::sqrt(diff_sq) / std::sqrt(ref_sq);
}

// Identical inputs give exactly 1: the denominator is sqrt(dot*dot), and
// IEEE sqrt of a rounded square returns the original dot product.
inline double cosine_similarity(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw ShapeError("cosine_similarity: shape mismatch");
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        ab += a.data[i] * b.data[i];
        aa += a.data[i] * a.data[i];
        bb += b.data[i] * b.data[i];
    }
    if (aa == 0.0 || bb == 0.0) return (aa == 0.0 && bb == 0.0) ? 1.0 : 0.0;
    return ab / std::sqrt(aa * bb);
}

}  // namespace amskv
