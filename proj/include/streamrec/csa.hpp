#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "streamrec/checkpoint.hpp"
#include "streamrec/tensor.hpp"

namespace streamrec {

/// Kernel feature map phi(x) = ELU(x) + 1; strictly positive for finite x,
/// which keeps normalizer memories positive and attention denominators
/// well-defined.
Tensor kernel_feature(const Tensor& x);

/// Attention memory s (dh x dh, keys x values) and normalizer memory z (dh).
struct MemoryPair {
    std::vector<real> s;
    std::vector<real> z;

    static MemoryPair zeros(int dh) {
        MemoryPair p;
        p.s.assign(static_cast<std::size_t>(dh) * dh, real(0));
        p.z.assign(static_cast<std::size_t>(dh), real(0));
        return p;
    }
    void add(const MemoryPair& other) {
        for (std::size_t i = 0; i < s.size(); ++i) s[i] += other.s[i];
        for (std::size_t i = 0; i < z.size(); ++i) z[i] += other.z[i];
    }
    void scale_add(real w, const MemoryPair& other) {
        for (std::size_t i = 0; i < s.size(); ++i) s[i] += w * other.s[i];
        for (std::size_t i = 0; i < z.size(); ++i) z[i] += w * other.z[i];
    }
};

/// Per-user memory state: one MemoryPair per (layer, head) slot.
struct UserMemory {
    int block_stamp = 0; // knowledge up to and including this block
    bool pseudo = false; // synthesized for a new user, not yet genuine
    std::vector<MemoryPair> slots;
};

/// Historical memories for all users. Frozen during training on a block;
/// mutated only at block boundaries (update) or at refresh points (pseudo
/// assignment for new users).
class UserMemoryStore {
public:
    UserMemoryStore() = default;
    UserMemoryStore(int layers, int heads, int dh)
        : layers_(layers), heads_(heads), dh_(dh) {}

    int layers() const { return layers_; }
    int heads() const { return heads_; }
    int dh() const { return dh_; }
    std::size_t slot_count() const {
        return static_cast<std::size_t>(layers_) * static_cast<std::size_t>(heads_);
    }
    std::size_t slot_index(int layer, int head) const {
        return static_cast<std::size_t>(layer) * static_cast<std::size_t>(heads_) +
               static_cast<std::size_t>(head);
    }

    bool has(std::int64_t user) const { return entries_.count(user) > 0; }
    const UserMemory* find(std::int64_t user) const;
    std::size_t size() const { return entries_.size(); }

    void assign_pseudo(std::int64_t user, std::vector<MemoryPair> slots, int block_stamp);
    void update_historical(std::int64_t user, const std::vector<MemoryPair>& current,
                           int block_index);

    const std::map<std::int64_t, UserMemory>& entries() const { return entries_; }

    void save(BinaryWriter& w) const;
    static UserMemoryStore load(BinaryReader& r);

private:
    int layers_ = 0, heads_ = 0, dh_ = 0;
    std::map<std::int64_t, UserMemory> entries_;
};

/// Optional per-scan instrumentation (installed thread-locally): gathers the
/// per-position output norms under both normalizations plus the max output
/// magnitude actually produced.
struct ScanStats {
    std::vector<real> norm_plain;
    std::vector<real> norm_csn;
    real max_abs_output = 0;
};

void set_scan_stats(ScanStats* stats);

class ScanStatsScope {
public:
    explicit ScanStatsScope(ScanStats* stats);
    ~ScanStatsScope();

private:
    ScanStats* prev_;
};

/// Causal linear attention over one sequence, computed recurrently in O(N):
/// running memories start from (s_base, z_base) and absorb phi(k_j) v_j^T /
/// phi(k_j) position by position; the output row at position i is
///   plain: (q'_i s_i) / (q'_i . z_i)
///   csn:   (q'_i s_i) / (max ||q'_i|| ||z_i||)   -- Cauchy-Schwarz bound
/// q_feat/k_feat are the feature-mapped queries/keys (N x dh), values is
/// N x dh; s_base (dh x dh) and z_base (1 x dh) may be invalid for zero.
/// Gradients flow into all valid requires-grad inputs including the bases.
/// If current_out is given it receives the within-sequence memories at the
/// last position, accumulated separately from the bases.
Tensor csa_scan(const Tensor& q_feat, const Tensor& k_feat, const Tensor& values,
                const Tensor& s_base, const Tensor& z_base, bool csn,
                MemoryPair* current_out = nullptr);

/// Single-position attention outputs from explicit memories; these mirror
/// the scan's math and exist for diagnostics and tests.
std::vector<real> attention_output_plain(std::span<const real> q_feat,
                                         const MemoryPair& memory);
std::vector<real> csn_output(std::span<const real> q_feat, const MemoryPair& memory);
real cos_theta_qz(std::span<const real> q_feat, const MemoryPair& memory);

} // namespace streamrec
