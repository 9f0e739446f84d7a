#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "streamrec/backbone.hpp"

namespace streamrec {

struct PoolConfig {
    int n_h = 4; // historical pool: number of interests
    int l_h = 4; // historical pool: pattern length
    int n_c = 8; // current pool: number of interests
    int l_c = 8; // current pool: pattern length
};

/// A set of learnable (key, pattern) pairs. Keys (n x d) are matched against
/// user contexts by cosine distance; each pattern (l x d) encodes one
/// interest and is shared across layers and heads.
struct InterestPool {
    Tensor keys;
    std::vector<Tensor> patterns;

    int size() const { return static_cast<int>(patterns.size()); }
    static InterestPool init(int n, int l, int dim, Rng& rng);
};

struct Pools {
    InterestPool historical;
    InterestPool current;

    static Pools init(const PoolConfig& cfg, int dim, Rng& rng);
    std::vector<Tensor> parameters() const;
    std::map<std::string, Tensor> named_parameters() const;
    void load_values(const std::map<std::string, Tensor>& named);
};

real cosine_distance(std::span<const real> a, std::span<const real> b);

/// Best-matching pool index for a context: argmin of 1 - cos(c, key_i),
/// ties broken by the lowest index.
int match(std::span<const real> context, const InterestPool& pool);

/// Per-user best-match indices, cached between refreshes and reused at
/// inference.
struct CieIndices {
    int historical = -1; // -1: not matched (pool disabled)
    int current = -1;
};

/// Enrichment terms derived from one pattern through a head's projections:
/// delta_s = sum_l phi(P[l]W_K) (P[l]W_V)^T and delta_z = sum_l phi(P[l]W_K).
/// Built from tape ops, so gradients reach the pattern and the projections.
struct Deltas {
    Tensor s; // dh x dh
    Tensor z; // 1 x dh
};
Deltas compute_deltas(const Tensor& pattern, const Tensor& wk, const Tensor& wv);

/// gamma(c, key_index) as a tape scalar; the context is a constant
/// (stop-gradient), so only the selected key receives gradient.
Tensor matching_term(std::span<const real> context, const InterestPool& pool, int index);

struct ContextPair {
    std::vector<real> historical; // from combined memories
    std::vector<real> current;    // from within-block memories only
};

/// Final-layer last hidden state with the given historical memories as
/// attention bases (pass nullptr for none). Eval mode, CSA head, no
/// enrichment deltas.
std::vector<real> context_from_memories(const ModelParameters& model,
                                        const std::vector<std::int64_t>& items,
                                        const UserMemory* historical, bool csn);

ContextPair extract_contexts(const ModelParameters& model,
                             const std::vector<std::int64_t>& items,
                             const UserMemory* historical, bool csn);

} // namespace streamrec
