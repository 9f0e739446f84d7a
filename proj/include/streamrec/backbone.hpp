#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "streamrec/csa.hpp"
#include "streamrec/optim.hpp"
#include "streamrec/tensor.hpp"

namespace streamrec {

enum class AttentionHeadKind { ReferenceSelfAttention, ContinualSequentialAttention };

enum class PositionalMode { Auto, On, Off };

struct ModelConfig {
    int layers = 2;
    int heads = 2;
    int dim = 64;
    int ffn_dim = 64;
    real dropout = real(0.2);
    int max_seq_len = 50;
    AttentionHeadKind head_kind = AttentionHeadKind::ContinualSequentialAttention;
    // Learnable positional embeddings: the self-attention baseline needs
    // them; the recurrent CSA memory is order-sensitive on its own, so Auto
    // enables them only for the reference head.
    PositionalMode positional = PositionalMode::Auto;

    int head_dim() const { return dim / heads; }
    bool use_positional() const {
        if (positional == PositionalMode::On) return true;
        if (positional == PositionalMode::Off) return false;
        return head_kind == AttentionHeadKind::ReferenceSelfAttention;
    }
    void validate() const;
};

struct LayerParams {
    std::vector<Tensor> wq, wk, wv; // per head, dim x head_dim
    Tensor wo;                      // dim x dim
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;
};

struct ModelParameters {
    ModelConfig cfg;
    Tensor item_emb; // |items| x dim, grow-only
    Tensor pos_emb;  // max_seq_len x dim, valid iff positional enabled
    std::vector<LayerParams> layers;

    static ModelParameters init(const ModelConfig& cfg, std::size_t n_items, Rng& rng);
    /// Append freshly initialized rows for items first seen in the new
    /// block; existing rows (and their optimizer moments) carry over.
    void grow_items(std::size_t n_items, Rng& rng);
    std::size_t n_items() const { return item_emb.rows(); }

    std::vector<Tensor> parameters() const;
    std::map<std::string, Tensor> named_parameters() const;
    void load_values(const std::map<std::string, Tensor>& named);
};

/// Per-sequence attention bases for the CSA head, slot-indexed by
/// layer * heads + head. Invalid tensors mean zero; valid ones may carry
/// gradients (interest-enrichment deltas are composed into them upstream).
struct AttentionContext {
    std::vector<Tensor> s_base, z_base;
    bool csn = true;
};

struct EncodeOptions {
    bool training = false;
    Rng* rng = nullptr; // dropout source; required when training with dropout > 0
    const AttentionContext* ctx = nullptr;
    std::vector<MemoryPair>* current_out = nullptr; // per-slot within-sequence memories
};

/// H0: stacked item embeddings (+ positional embeddings when enabled).
Tensor embed(const ModelParameters& params, const std::vector<std::int64_t>& items);

/// Multi-head causal self-attention of the quadratic baseline, including the
/// output projection. Scores are scaled by 1/sqrt(dim).
Tensor reference_self_attention(const Tensor& hidden, const LayerParams& layer,
                                const ModelConfig& cfg);

/// One post-norm transformer layer: LayerNorm(H + Dropout(MH(H))) then
/// LayerNorm(G + Dropout(FFN(G))).
Tensor transformer_layer(const ModelParameters& params, int layer_index,
                         const Tensor& hidden, const EncodeOptions& opts);

/// Full encoder: embeddings through all layers; returns final hidden states.
Tensor encode(const ModelParameters& params, const std::vector<std::int64_t>& items,
              const EncodeOptions& opts);

/// Summed BCE over one sequence's positions: hidden row j scores target j
/// against its negatives. sigma outputs are clamped to [1e-7, 1 - 1e-7]
/// before the log.
Tensor bce_loss(const Tensor& hidden, const std::vector<std::int64_t>& targets,
                const std::vector<std::vector<std::int64_t>>& negatives,
                const Tensor& item_emb);

struct RankedItem {
    std::int64_t id;
    real score; // sigma(e_i . h)
};

struct RankResult {
    std::vector<RankedItem> items; // score desc, ties by ascending id
    bool truncated = false;        // k exceeded the candidate count
};

/// Top-k over candidate items by sigma(e_i . h_last); eval-path, no tape.
RankResult rank_items(const std::vector<real>& h_last, const Tensor& item_emb,
                      const std::vector<std::int64_t>& candidates, std::size_t k);

/// 1-based rank of `target` among candidates under (score desc, id asc);
/// cheaper than materializing the full ranking.
std::size_t rank_of_target(const std::vector<real>& h_last, const Tensor& item_emb,
                           const std::vector<std::int64_t>& candidates,
                           std::int64_t target);

} // namespace streamrec
