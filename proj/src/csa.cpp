#include "streamrec/csa.hpp"

#include <cmath>

namespace streamrec {

namespace {

thread_local ScanStats* tls_scan_stats = nullptr;

constexpr std::uint64_t kMemoryStoreMagic = 0x53524D454D303031ull; // "SRMEM001"

real dot(const real* a, const real* b, std::size_t n) {
    real acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

real norm2(const real* a, std::size_t n) { return std::sqrt(dot(a, a, n)); }

} // namespace

void set_scan_stats(ScanStats* stats) { tls_scan_stats = stats; }

ScanStatsScope::ScanStatsScope(ScanStats* stats) : prev_(tls_scan_stats) {
    tls_scan_stats = stats;
}
ScanStatsScope::~ScanStatsScope() { tls_scan_stats = prev_; }

Tensor kernel_feature(const Tensor& x) { return add_scalar(elu(x), real(1)); }

// ---- memory store ---------------------------------------------------------

const UserMemory* UserMemoryStore::find(std::int64_t user) const {
    auto it = entries_.find(user);
    return it == entries_.end() ? nullptr : &it->second;
}

void UserMemoryStore::assign_pseudo(std::int64_t user, std::vector<MemoryPair> slots,
                                    int block_stamp) {
    if (slots.size() != slot_count())
        raise(ErrorCode::Dimension, "assign_pseudo: wrong slot count");
    UserMemory& entry = entries_[user];
    entry.block_stamp = block_stamp;
    entry.pseudo = true;
    entry.slots = std::move(slots);
}

void UserMemoryStore::update_historical(std::int64_t user,
                                        const std::vector<MemoryPair>& current,
                                        int block_index) {
    if (current.size() != slot_count())
        raise(ErrorCode::Dimension, "update_historical: wrong slot count");
    auto it = entries_.find(user);
    if (it == entries_.end()) {
        UserMemory entry;
        entry.slots.reserve(slot_count());
        for (std::size_t i = 0; i < slot_count(); ++i)
            entry.slots.push_back(MemoryPair::zeros(dh_));
        it = entries_.emplace(user, std::move(entry)).first;
    } else if (it->second.block_stamp >= block_index && !it->second.pseudo) {
        raise(ErrorCode::Usage, "update_historical: user " + std::to_string(user) +
                                    " already updated for block " +
                                    std::to_string(block_index));
    }
    UserMemory& entry = it->second;
    for (std::size_t i = 0; i < slot_count(); ++i) entry.slots[i].add(current[i]);
    entry.block_stamp = block_index;
    entry.pseudo = false;
}

void UserMemoryStore::save(BinaryWriter& w) const {
    w.u64(kMemoryStoreMagic);
    w.u32(static_cast<std::uint32_t>(layers_));
    w.u32(static_cast<std::uint32_t>(heads_));
    w.u32(static_cast<std::uint32_t>(dh_));
    w.u64(entries_.size());
    for (const auto& [user, entry] : entries_) {
        w.i64(user);
        w.u32(static_cast<std::uint32_t>(entry.block_stamp));
        w.u32(entry.pseudo ? 1u : 0u);
        for (const MemoryPair& pair : entry.slots) {
            w.f64_array(pair.s);
            w.f64_array(pair.z);
        }
    }
}

UserMemoryStore UserMemoryStore::load(BinaryReader& r) {
    if (r.u64() != kMemoryStoreMagic)
        raise(ErrorCode::Version, "memory store: bad magic (version mismatch?)");
    const int layers = static_cast<int>(r.u32());
    const int heads = static_cast<int>(r.u32());
    const int dh = static_cast<int>(r.u32());
    UserMemoryStore store(layers, heads, dh);
    const std::uint64_t count = r.u64();
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::int64_t user = r.i64();
        UserMemory entry;
        entry.block_stamp = static_cast<int>(r.u32());
        entry.pseudo = r.u32() != 0;
        entry.slots.resize(store.slot_count());
        for (MemoryPair& pair : entry.slots) {
            pair.s = r.f64_array();
            pair.z = r.f64_array();
        }
        store.entries_.emplace(user, std::move(entry));
    }
    return store;
}

// ---- fused causal scan ------------------------------------------------------

Tensor csa_scan(const Tensor& q_feat, const Tensor& k_feat, const Tensor& values,
                const Tensor& s_base, const Tensor& z_base, bool csn,
                MemoryPair* current_out) {
    const std::size_t n = q_feat.rows();
    const std::size_t dh = q_feat.cols();
    if (k_feat.rows() != n || k_feat.cols() != dh || values.rows() != n ||
        values.cols() != dh)
        raise(ErrorCode::Dimension, "csa_scan: q/k/v shape mismatch");
    if (s_base.valid() && (s_base.rows() != dh || s_base.cols() != dh))
        raise(ErrorCode::Dimension, "csa_scan: s_base must be dh x dh");
    if (z_base.valid() && z_base.size() != dh)
        raise(ErrorCode::Dimension, "csa_scan: z_base must have dh entries");
    if (n == 0) raise(ErrorCode::Degenerate, "csa_scan: empty sequence");

    bool rec = grad_enabled() &&
               (q_feat.requires_grad() || k_feat.requires_grad() ||
                values.requires_grad() || (s_base.valid() && s_base.requires_grad()) ||
                (z_base.valid() && z_base.requires_grad()));
    Tensor out = make_op_output({n, dh}, rec);

    std::vector<real> s_run(dh * dh, real(0));
    std::vector<real> z_run(dh, real(0));
    if (s_base.valid()) s_run = s_base.data();
    if (z_base.valid()) z_run = z_base.data();

    if (current_out) {
        current_out->s.assign(dh * dh, real(0));
        current_out->z.assign(dh, real(0));
    }

    // Per-position denominators (and norms in csn mode), kept for backward.
    auto denom = std::make_shared<std::vector<real>>(n);
    auto qnorm = std::make_shared<std::vector<real>>(csn ? n : 0);
    auto znorm = std::make_shared<std::vector<real>>(csn ? n : 0);

    const real* qp = q_feat.data().data();
    const real* kp = k_feat.data().data();
    const real* vp = values.data().data();
    real* op = out.data().data();

    for (std::size_t i = 0; i < n; ++i) {
        const real* krow = kp + i * dh;
        const real* vrow = vp + i * dh;
        for (std::size_t a = 0; a < dh; ++a) {
            const real ka = krow[a];
            real* srow = s_run.data() + a * dh;
            for (std::size_t b = 0; b < dh; ++b) srow[b] += ka * vrow[b];
            z_run[a] += ka;
        }
        if (current_out) {
            for (std::size_t a = 0; a < dh; ++a) {
                const real ka = krow[a];
                real* srow = current_out->s.data() + a * dh;
                for (std::size_t b = 0; b < dh; ++b) srow[b] += ka * vrow[b];
                current_out->z[a] += ka;
            }
        }
        const real* qrow = qp + i * dh;
        real* orow = op + i * dh;
        for (std::size_t b = 0; b < dh; ++b) orow[b] = real(0);
        for (std::size_t a = 0; a < dh; ++a) {
            const real qa = qrow[a];
            if (qa == real(0)) continue;
            const real* srow = s_run.data() + a * dh;
            for (std::size_t b = 0; b < dh; ++b) orow[b] += qa * srow[b];
        }
        real d;
        real d_plain = 0, d_csn = 0;
        if (csn || tls_scan_stats) {
            const real qn = norm2(qrow, dh);
            const real zn = norm2(z_run.data(), dh);
            d_csn = qn * zn;
            if (csn) {
                (*qnorm)[i] = qn;
                (*znorm)[i] = zn;
            }
        }
        if (!csn || tls_scan_stats) d_plain = dot(qrow, z_run.data(), dh);
        d = csn ? d_csn : d_plain;
        if (!(d > real(0)))
            raise(ErrorCode::Degenerate,
                  "csa_scan: non-positive attention denominator (empty memory?)");
        (*denom)[i] = d;
        if (tls_scan_stats) {
            const real nn = norm2(orow, dh);
            tls_scan_stats->norm_plain.push_back(d_plain > 0 ? nn / d_plain : real(0));
            tls_scan_stats->norm_csn.push_back(d_csn > 0 ? nn / d_csn : real(0));
        }
        for (std::size_t b = 0; b < dh; ++b) orow[b] /= d;
        if (tls_scan_stats)
            for (std::size_t b = 0; b < dh; ++b)
                tls_scan_stats->max_abs_output =
                    std::max(tls_scan_stats->max_abs_output, std::abs(orow[b]));
    }

    if (rec) {
        auto qi = q_feat.impl();
        auto ki = k_feat.impl();
        auto vi = values.impl();
        auto si = s_base.valid() ? s_base.impl() : nullptr;
        auto zi = z_base.valid() ? z_base.impl() : nullptr;
        auto oi = out.impl();
        auto s_final = std::make_shared<std::vector<real>>(s_run);
        auto z_final = std::make_shared<std::vector<real>>(z_run);
        current_tape()->record(
            [qi, ki, vi, si, zi, oi, denom, qnorm, znorm, s_final, z_final, n, dh,
             csn]() {
                auto ensure = [](TensorImpl& t) {
                    if (t.grad.size() != t.data.size())
                        t.grad.assign(t.data.size(), real(0));
                };
                if (qi->requires_grad) ensure(*qi);
                if (ki->requires_grad) ensure(*ki);
                if (vi->requires_grad) ensure(*vi);
                if (si && si->requires_grad) ensure(*si);
                if (zi && zi->requires_grad) ensure(*zi);

                std::vector<real> s_cur = *s_final; // s_i, walked downward
                std::vector<real> z_cur = *z_final;
                std::vector<real> G(dh * dh, real(0)); // suffix sum of ds_i
                std::vector<real> g(dh, real(0));      // suffix sum of dz_i
                std::vector<real> dn(dh);

                const real* qp = qi->data.data();
                const real* kp = ki->data.data();
                const real* vp = vi->data.data();

                for (std::size_t ii = n; ii-- > 0;) {
                    const real* qrow = qp + ii * dh;
                    const real* krow = kp + ii * dh;
                    const real* vrow = vp + ii * dh;
                    const real* dA = oi->grad.data() + ii * dh;
                    const real* A = oi->data.data() + ii * dh;
                    const real d = (*denom)[ii];

                    real dAdotA = 0;
                    for (std::size_t b = 0; b < dh; ++b) {
                        dn[b] = dA[b] / d;
                        dAdotA += dA[b] * A[b];
                    }
                    const real ddenom = -dAdotA / d;

                    // ds_i = outer(q'_i, dn_i), folded into the suffix sum.
                    for (std::size_t a = 0; a < dh; ++a) {
                        const real qa = qrow[a];
                        if (qa != real(0)) {
                            real* Grow = G.data() + a * dh;
                            for (std::size_t b = 0; b < dh; ++b) Grow[b] += qa * dn[b];
                        }
                    }
                    if (qi->requires_grad) {
                        real* dq = qi->grad.data() + ii * dh;
                        for (std::size_t a = 0; a < dh; ++a)
                            dq[a] += dot(s_cur.data() + a * dh, dn.data(), dh);
                        if (csn) {
                            const real qn = (*qnorm)[ii];
                            const real zn = (*znorm)[ii];
                            const real c = ddenom * zn / qn;
                            for (std::size_t a = 0; a < dh; ++a) dq[a] += c * qrow[a];
                        } else {
                            for (std::size_t a = 0; a < dh; ++a)
                                dq[a] += ddenom * z_cur[a];
                        }
                    }
                    // dz_i folded into its suffix sum.
                    if (csn) {
                        const real qn = (*qnorm)[ii];
                        const real zn = (*znorm)[ii];
                        const real c = ddenom * qn / zn;
                        for (std::size_t a = 0; a < dh; ++a) g[a] += c * z_cur[a];
                    } else {
                        for (std::size_t a = 0; a < dh; ++a) g[a] += ddenom * qrow[a];
                    }

                    if (ki->requires_grad) {
                        real* dk = ki->grad.data() + ii * dh;
                        for (std::size_t a = 0; a < dh; ++a)
                            dk[a] += dot(G.data() + a * dh, vrow, dh) + g[a];
                    }
                    if (vi->requires_grad) {
                        real* dv = vi->grad.data() + ii * dh;
                        for (std::size_t a = 0; a < dh; ++a) {
                            const real ka = krow[a];
                            if (ka == real(0)) continue;
                            const real* Grow = G.data() + a * dh;
                            for (std::size_t b = 0; b < dh; ++b) dv[b] += ka * Grow[b];
                        }
                    }
                    // Walk the memories down to position ii-1.
                    for (std::size_t a = 0; a < dh; ++a) {
                        const real ka = krow[a];
                        real* srow = s_cur.data() + a * dh;
                        for (std::size_t b = 0; b < dh; ++b) srow[b] -= ka * vrow[b];
                        z_cur[a] -= ka;
                    }
                }
                if (si && si->requires_grad)
                    for (std::size_t i = 0; i < dh * dh; ++i) si->grad[i] += G[i];
                if (zi && zi->requires_grad)
                    for (std::size_t a = 0; a < dh; ++a) zi->grad[a] += g[a];
            },
            out);
    }
    return out;
}

// ---- single-position helpers ---------------------------------------------------

std::vector<real> attention_output_plain(std::span<const real> q_feat,
                                         const MemoryPair& memory) {
    const std::size_t dh = q_feat.size();
    if (memory.z.size() != dh)
        raise(ErrorCode::Dimension, "attention_output_plain: dimension mismatch");
    bool any = false;
    for (real v : memory.z)
        if (v != real(0)) any = true;
    if (!any)
        raise(ErrorCode::Degenerate, "attention_output_plain: empty memory (no keys absorbed)");
    const real d = dot(q_feat.data(), memory.z.data(), dh);
    if (!(d > real(0)))
        raise(ErrorCode::Degenerate, "attention_output_plain: non-positive denominator");
    std::vector<real> out(dh, real(0));
    for (std::size_t a = 0; a < dh; ++a) {
        const real qa = q_feat[a];
        for (std::size_t b = 0; b < dh; ++b) out[b] += qa * memory.s[a * dh + b];
    }
    for (real& v : out) v /= d;
    return out;
}

std::vector<real> csn_output(std::span<const real> q_feat, const MemoryPair& memory) {
    const std::size_t dh = q_feat.size();
    if (memory.z.size() != dh)
        raise(ErrorCode::Dimension, "csn_output: dimension mismatch");
    const real qn = norm2(q_feat.data(), dh);
    const real zn = norm2(memory.z.data(), dh);
    if (qn == real(0) || zn == real(0))
        raise(ErrorCode::Degenerate, "csn_output: zero-norm query or normalizer");
    std::vector<real> out(dh, real(0));
    for (std::size_t a = 0; a < dh; ++a) {
        const real qa = q_feat[a];
        for (std::size_t b = 0; b < dh; ++b) out[b] += qa * memory.s[a * dh + b];
    }
    const real d = qn * zn;
    for (real& v : out) v /= d;
    return out;
}

real cos_theta_qz(std::span<const real> q_feat, const MemoryPair& memory) {
    const std::size_t dh = q_feat.size();
    const real qn = norm2(q_feat.data(), dh);
    const real zn = norm2(memory.z.data(), dh);
    if (qn == real(0) || zn == real(0))
        raise(ErrorCode::Degenerate, "cos_theta_qz: zero-norm input");
    return dot(q_feat.data(), memory.z.data(), dh) / (qn * zn);
}

} // namespace streamrec
