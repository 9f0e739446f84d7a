#include "streamrec/cie.hpp"

#include <cmath>

namespace streamrec {

namespace {
constexpr real kPoolInitStd = real(0.02);
}

InterestPool InterestPool::init(int n, int l, int dim, Rng& rng) {
    if (n < 1 || l < 1) raise(ErrorCode::Config, "interest pool: sizes must be positive");
    InterestPool pool;
    pool.keys = Tensor::randn({static_cast<std::size_t>(n), static_cast<std::size_t>(dim)},
                              rng, kPoolInitStd, true);
    for (int i = 0; i < n; ++i)
        pool.patterns.push_back(Tensor::randn(
            {static_cast<std::size_t>(l), static_cast<std::size_t>(dim)}, rng,
            kPoolInitStd, true));
    return pool;
}

Pools Pools::init(const PoolConfig& cfg, int dim, Rng& rng) {
    Pools pools;
    pools.historical = InterestPool::init(cfg.n_h, cfg.l_h, dim, rng);
    pools.current = InterestPool::init(cfg.n_c, cfg.l_c, dim, rng);
    return pools;
}

std::vector<Tensor> Pools::parameters() const {
    std::vector<Tensor> out;
    out.push_back(historical.keys);
    for (const Tensor& p : historical.patterns) out.push_back(p);
    out.push_back(current.keys);
    for (const Tensor& p : current.patterns) out.push_back(p);
    return out;
}

std::map<std::string, Tensor> Pools::named_parameters() const {
    std::map<std::string, Tensor> out;
    out.emplace("pool_h.keys", historical.keys);
    for (std::size_t i = 0; i < historical.patterns.size(); ++i)
        out.emplace("pool_h.pattern" + std::to_string(i), historical.patterns[i]);
    out.emplace("pool_c.keys", current.keys);
    for (std::size_t i = 0; i < current.patterns.size(); ++i)
        out.emplace("pool_c.pattern" + std::to_string(i), current.patterns[i]);
    return out;
}

void Pools::load_values(const std::map<std::string, Tensor>& named) {
    auto mine = named_parameters();
    for (auto& [name, tensor] : mine) {
        auto it = named.find(name);
        if (it == named.end())
            raise(ErrorCode::Version, "checkpoint missing pool tensor " + name);
        if (tensor.shape() != it->second.shape())
            raise(ErrorCode::Version, "checkpoint shape mismatch for " + name);
        tensor.impl()->data = it->second.data();
        if (tensor.requires_grad()) tensor.zero_grad();
    }
}

real cosine_distance(std::span<const real> a, std::span<const real> b) {
    if (a.size() != b.size())
        raise(ErrorCode::Dimension, "cosine_distance: length mismatch");
    real dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == real(0) || nb == real(0))
        raise(ErrorCode::Matching, "cosine_distance: zero-norm vector");
    return real(1) - dot / (std::sqrt(na) * std::sqrt(nb));
}

int match(std::span<const real> context, const InterestPool& pool) {
    real cn = 0;
    for (real v : context) cn += v * v;
    if (cn == real(0)) raise(ErrorCode::Matching, "match: zero context vector");
    const std::size_t d = context.size();
    int best = 0;
    real best_dist = 0;
    for (int i = 0; i < pool.size(); ++i) {
        const real* key = pool.keys.data().data() + static_cast<std::size_t>(i) * d;
        real dot = 0, nk = 0;
        for (std::size_t j = 0; j < d; ++j) {
            dot += context[j] * key[j];
            nk += key[j] * key[j];
        }
        // A zero key cannot be matched by angle; treat it as orthogonal.
        const real dist = nk == real(0)
                              ? real(1)
                              : real(1) - dot / (std::sqrt(cn) * std::sqrt(nk));
        if (i == 0 || dist < best_dist) {
            best = i;
            best_dist = dist;
        }
    }
    return best;
}

Deltas compute_deltas(const Tensor& pattern, const Tensor& wk, const Tensor& wv) {
    Tensor pk = kernel_feature(matmul(pattern, wk)); // l x dh
    Tensor pv = matmul(pattern, wv);                 // l x dh
    Deltas d;
    d.s = matmul(transpose(pk), pv); // dh x dh
    d.z = col_sums(pk);              // 1 x dh
    return d;
}

Tensor matching_term(std::span<const real> context, const InterestPool& pool, int index) {
    if (index < 0 || index >= pool.size())
        raise(ErrorCode::Usage, "matching_term: index out of range");
    real cn = 0;
    for (real v : context) cn += v * v;
    cn = std::sqrt(cn);
    if (cn == real(0)) raise(ErrorCode::Matching, "matching_term: zero context vector");
    Tensor c = Tensor::from(std::vector<real>(context.begin(), context.end()),
                            {1, context.size()});
    Tensor key = slice_rows(pool.keys, static_cast<std::size_t>(index), 1);
    Tensor dot = sum_all(mul(c, key));
    Tensor denom = scale(l2norm(key), cn);
    return add_scalar(scale(scalar_div(dot, denom), real(-1)), real(1));
}

std::vector<real> context_from_memories(const ModelParameters& model,
                                        const std::vector<std::int64_t>& items,
                                        const UserMemory* historical, bool csn) {
    if (items.empty())
        raise(ErrorCode::Degenerate, "context extraction: empty sequence");
    NoGradGuard eval;
    AttentionContext ctx;
    ctx.csn = csn;
    if (historical) {
        const std::size_t dh = static_cast<std::size_t>(model.cfg.head_dim());
        for (const MemoryPair& pair : historical->slots) {
            ctx.s_base.push_back(Tensor::from(pair.s, {dh, dh}));
            ctx.z_base.push_back(Tensor::from(pair.z, {1, dh}));
        }
    }
    EncodeOptions opts;
    opts.ctx = &ctx;
    Tensor h = encode(model, items, opts);
    const std::size_t d = h.cols();
    const real* last = h.data().data() + (h.rows() - 1) * d;
    return std::vector<real>(last, last + d);
}

ContextPair extract_contexts(const ModelParameters& model,
                             const std::vector<std::int64_t>& items,
                             const UserMemory* historical, bool csn) {
    ContextPair pair;
    pair.current = context_from_memories(model, items, nullptr, csn);
    pair.historical = context_from_memories(model, items, historical, csn);
    return pair;
}

} // namespace streamrec
