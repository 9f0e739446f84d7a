#include "streamrec/backbone.hpp"

#include <algorithm>
#include <cmath>

namespace streamrec {

void ModelConfig::validate() const {
    if (layers < 1 || heads < 1 || dim < 1 || ffn_dim < 1 || max_seq_len < 1)
        raise(ErrorCode::Config, "model config: counts must be positive");
    if (dim % heads != 0)
        raise(ErrorCode::Config, "model config: dim must be divisible by heads");
    if (dropout < real(0) || dropout >= real(1))
        raise(ErrorCode::Config, "model config: dropout must be in [0, 1)");
}

namespace {

constexpr real kInitStd = real(0.02);
constexpr real kBceEps = real(1e-7);

Tensor param_randn(std::size_t r, std::size_t c, Rng& rng) {
    return Tensor::randn({r, c}, rng, kInitStd, true);
}

} // namespace

ModelParameters ModelParameters::init(const ModelConfig& cfg, std::size_t n_items,
                                      Rng& rng) {
    cfg.validate();
    ModelParameters p;
    p.cfg = cfg;
    p.item_emb = param_randn(n_items, static_cast<std::size_t>(cfg.dim), rng);
    if (cfg.use_positional())
        p.pos_emb = param_randn(static_cast<std::size_t>(cfg.max_seq_len),
                                static_cast<std::size_t>(cfg.dim), rng);
    const auto d = static_cast<std::size_t>(cfg.dim);
    const auto dh = static_cast<std::size_t>(cfg.head_dim());
    const auto dff = static_cast<std::size_t>(cfg.ffn_dim);
    for (int l = 0; l < cfg.layers; ++l) {
        LayerParams layer;
        for (int h = 0; h < cfg.heads; ++h) {
            layer.wq.push_back(param_randn(d, dh, rng));
            layer.wk.push_back(param_randn(d, dh, rng));
            layer.wv.push_back(param_randn(d, dh, rng));
        }
        layer.wo = param_randn(d, d, rng);
        layer.ffn_w1 = param_randn(d, dff, rng);
        layer.ffn_b1 = Tensor::zeros({1, dff}, true);
        layer.ffn_w2 = param_randn(dff, d, rng);
        layer.ffn_b2 = Tensor::zeros({1, d}, true);
        layer.ln1_gain = Tensor::full({1, d}, real(1), true);
        layer.ln1_bias = Tensor::zeros({1, d}, true);
        layer.ln2_gain = Tensor::full({1, d}, real(1), true);
        layer.ln2_bias = Tensor::zeros({1, d}, true);
        p.layers.push_back(std::move(layer));
    }
    return p;
}

void ModelParameters::grow_items(std::size_t n_items, Rng& rng) {
    const std::size_t old_rows = item_emb.rows();
    if (n_items < old_rows)
        raise(ErrorCode::Usage, "grow_items: item count may only grow");
    if (n_items == old_rows) return;
    // Grow in place so optimizer slots keep pointing at the same buffer.
    TensorImpl& impl = *item_emb.impl();
    const auto d = static_cast<std::size_t>(cfg.dim);
    impl.data.resize(n_items * d);
    for (std::size_t i = old_rows * d; i < n_items * d; ++i)
        impl.data[i] = static_cast<real>(rng.normal(0.0, kInitStd));
    impl.shape[0] = n_items;
    if (impl.requires_grad) impl.grad.assign(impl.data.size(), real(0));
}

std::vector<Tensor> ModelParameters::parameters() const {
    std::vector<Tensor> out;
    out.push_back(item_emb);
    if (pos_emb.valid()) out.push_back(pos_emb);
    for (const LayerParams& l : layers) {
        for (const Tensor& t : l.wq) out.push_back(t);
        for (const Tensor& t : l.wk) out.push_back(t);
        for (const Tensor& t : l.wv) out.push_back(t);
        out.push_back(l.wo);
        out.push_back(l.ffn_w1);
        out.push_back(l.ffn_b1);
        out.push_back(l.ffn_w2);
        out.push_back(l.ffn_b2);
        out.push_back(l.ln1_gain);
        out.push_back(l.ln1_bias);
        out.push_back(l.ln2_gain);
        out.push_back(l.ln2_bias);
    }
    return out;
}

std::map<std::string, Tensor> ModelParameters::named_parameters() const {
    std::map<std::string, Tensor> out;
    out.emplace("item_emb", item_emb);
    if (pos_emb.valid()) out.emplace("pos_emb", pos_emb);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const LayerParams& layer = layers[l];
        const std::string p = "layer" + std::to_string(l) + ".";
        for (std::size_t h = 0; h < layer.wq.size(); ++h) {
            const std::string hp = p + "head" + std::to_string(h) + ".";
            out.emplace(hp + "wq", layer.wq[h]);
            out.emplace(hp + "wk", layer.wk[h]);
            out.emplace(hp + "wv", layer.wv[h]);
        }
        out.emplace(p + "wo", layer.wo);
        out.emplace(p + "ffn_w1", layer.ffn_w1);
        out.emplace(p + "ffn_b1", layer.ffn_b1);
        out.emplace(p + "ffn_w2", layer.ffn_w2);
        out.emplace(p + "ffn_b2", layer.ffn_b2);
        out.emplace(p + "ln1_gain", layer.ln1_gain);
        out.emplace(p + "ln1_bias", layer.ln1_bias);
        out.emplace(p + "ln2_gain", layer.ln2_gain);
        out.emplace(p + "ln2_bias", layer.ln2_bias);
    }
    return out;
}

void ModelParameters::load_values(const std::map<std::string, Tensor>& named) {
    auto mine = named_parameters();
    for (auto& [name, tensor] : mine) {
        auto it = named.find(name);
        if (it == named.end())
            raise(ErrorCode::Version, "checkpoint missing parameter " + name);
        TensorImpl& impl = *tensor.impl();
        if (impl.shape != it->second.shape()) {
            // The embedding table may have grown after this model was
            // created; adopt the stored shape.
            if (name != "item_emb")
                raise(ErrorCode::Version, "checkpoint shape mismatch for " + name);
            impl.shape = it->second.shape();
        }
        impl.data = it->second.data();
        if (impl.requires_grad) impl.grad.assign(impl.data.size(), real(0));
    }
}

Tensor embed(const ModelParameters& params, const std::vector<std::int64_t>& items) {
    if (items.empty()) raise(ErrorCode::Degenerate, "embed: empty sequence");
    if (static_cast<int>(items.size()) > params.cfg.max_seq_len)
        raise(ErrorCode::Usage, "embed: sequence longer than max_seq_len");
    Tensor h = embedding_rows(params.item_emb, items);
    if (params.pos_emb.valid())
        h = add(h, slice_rows(params.pos_emb, 0, items.size()));
    return h;
}

namespace {

Tensor causal_mask(std::size_t n) {
    Tensor mask = Tensor::zeros({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            mask.data()[i * n + j] = real(-1e30);
    return mask;
}

} // namespace

Tensor reference_self_attention(const Tensor& hidden, const LayerParams& layer,
                                const ModelConfig& cfg) {
    const std::size_t n = hidden.rows();
    const real inv_sqrt_d = real(1) / std::sqrt(static_cast<real>(cfg.dim));
    Tensor mask = causal_mask(n);
    std::vector<Tensor> heads;
    for (int h = 0; h < cfg.heads; ++h) {
        Tensor q = matmul(hidden, layer.wq[static_cast<std::size_t>(h)]);
        Tensor k = matmul(hidden, layer.wk[static_cast<std::size_t>(h)]);
        Tensor v = matmul(hidden, layer.wv[static_cast<std::size_t>(h)]);
        Tensor scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
        Tensor probs = softmax_rows(add(scores, mask));
        heads.push_back(matmul(probs, v));
    }
    return matmul(concat_cols(heads), layer.wo);
}

namespace {

Tensor csa_multi_head(const ModelParameters& params, int layer_index,
                      const Tensor& hidden, const EncodeOptions& opts) {
    const ModelConfig& cfg = params.cfg;
    const LayerParams& layer = params.layers[static_cast<std::size_t>(layer_index)];
    const bool csn = opts.ctx ? opts.ctx->csn : true;
    std::vector<Tensor> heads;
    for (int h = 0; h < cfg.heads; ++h) {
        const std::size_t slot =
            static_cast<std::size_t>(layer_index) * static_cast<std::size_t>(cfg.heads) +
            static_cast<std::size_t>(h);
        Tensor q = matmul(hidden, layer.wq[static_cast<std::size_t>(h)]);
        Tensor k = matmul(hidden, layer.wk[static_cast<std::size_t>(h)]);
        Tensor v = matmul(hidden, layer.wv[static_cast<std::size_t>(h)]);
        Tensor qf = kernel_feature(q);
        Tensor kf = kernel_feature(k);
        Tensor s_base, z_base;
        if (opts.ctx && !opts.ctx->s_base.empty()) {
            s_base = opts.ctx->s_base[slot];
            z_base = opts.ctx->z_base[slot];
        }
        MemoryPair* cur = nullptr;
        if (opts.current_out) cur = &(*opts.current_out)[slot];
        heads.push_back(csa_scan(qf, kf, v, s_base, z_base, csn, cur));
    }
    return matmul(concat_cols(heads), layer.wo);
}

} // namespace

Tensor transformer_layer(const ModelParameters& params, int layer_index,
                         const Tensor& hidden, const EncodeOptions& opts) {
    const ModelConfig& cfg = params.cfg;
    const LayerParams& layer = params.layers[static_cast<std::size_t>(layer_index)];
    const bool drop = opts.training && cfg.dropout > real(0);
    if (drop && !opts.rng)
        raise(ErrorCode::Usage, "transformer_layer: training dropout needs an rng");

    Tensor mh = cfg.head_kind == AttentionHeadKind::ReferenceSelfAttention
                    ? reference_self_attention(hidden, layer, cfg)
                    : csa_multi_head(params, layer_index, hidden, opts);
    if (drop) mh = dropout(mh, cfg.dropout, *opts.rng);
    Tensor g = layer_norm(add(hidden, mh), layer.ln1_gain, layer.ln1_bias);

    Tensor f = add_row_broadcast(matmul(g, layer.ffn_w1), layer.ffn_b1);
    f = add_row_broadcast(matmul(relu(f), layer.ffn_w2), layer.ffn_b2);
    if (drop) f = dropout(f, cfg.dropout, *opts.rng);
    return layer_norm(add(g, f), layer.ln2_gain, layer.ln2_bias);
}

Tensor encode(const ModelParameters& params, const std::vector<std::int64_t>& items,
              const EncodeOptions& opts) {
    if (opts.current_out)
        opts.current_out->assign(
            static_cast<std::size_t>(params.cfg.layers) *
                static_cast<std::size_t>(params.cfg.heads),
            MemoryPair::zeros(params.cfg.head_dim()));
    Tensor h = embed(params, items);
    for (int l = 0; l < params.cfg.layers; ++l)
        h = transformer_layer(params, l, h, opts);
    return h;
}

Tensor bce_loss(const Tensor& hidden, const std::vector<std::int64_t>& targets,
                const std::vector<std::vector<std::int64_t>>& negatives,
                const Tensor& item_emb) {
    if (targets.size() != hidden.rows() || negatives.size() != targets.size())
        raise(ErrorCode::Dimension, "bce_loss: positions misaligned");
    Tensor et = embedding_rows(item_emb, targets);
    Tensor pos_p = clamp(sigmoid(row_sums(mul(hidden, et))), kBceEps, real(1) - kBceEps);
    Tensor loss = scale(sum_all(vlog(pos_p)), real(-1));
    const std::size_t n_neg = negatives[0].size();
    for (std::size_t k = 0; k < n_neg; ++k) {
        std::vector<std::int64_t> ids(targets.size());
        for (std::size_t j = 0; j < negatives.size(); ++j) {
            if (negatives[j].size() != n_neg)
                raise(ErrorCode::Dimension, "bce_loss: ragged negatives");
            ids[j] = negatives[j][k];
        }
        Tensor en = embedding_rows(item_emb, ids);
        Tensor neg_p =
            clamp(sigmoid(row_sums(mul(hidden, en))), kBceEps, real(1) - kBceEps);
        Tensor one_minus = add_scalar(scale(neg_p, real(-1)), real(1));
        loss = sub(loss, sum_all(vlog(one_minus)));
    }
    return loss;
}

namespace {

real item_logit(const std::vector<real>& h, const Tensor& item_emb, std::int64_t id) {
    const std::size_t d = item_emb.cols();
    const real* row = item_emb.data().data() + static_cast<std::size_t>(id) * d;
    real acc = 0;
    for (std::size_t j = 0; j < d; ++j) acc += row[j] * h[j];
    return acc;
}

real stable_sigmoid(real x) {
    if (x >= real(0)) return real(1) / (real(1) + std::exp(-x));
    const real e = std::exp(x);
    return e / (real(1) + e);
}

} // namespace

RankResult rank_items(const std::vector<real>& h_last, const Tensor& item_emb,
                      const std::vector<std::int64_t>& candidates, std::size_t k) {
    if (candidates.empty()) raise(ErrorCode::Usage, "rank_items: no candidates");
    RankResult result;
    std::vector<std::pair<real, std::int64_t>> scored(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i)
        scored[i] = {item_logit(h_last, item_emb, candidates[i]), candidates[i]};
    std::size_t take = k;
    if (k > candidates.size()) {
        take = candidates.size();
        result.truncated = true;
    }
    auto cmp = [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    };
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take),
                      scored.end(), cmp);
    result.items.reserve(take);
    for (std::size_t i = 0; i < take; ++i)
        result.items.push_back({scored[i].second, stable_sigmoid(scored[i].first)});
    return result;
}

std::size_t rank_of_target(const std::vector<real>& h_last, const Tensor& item_emb,
                           const std::vector<std::int64_t>& candidates,
                           std::int64_t target) {
    const real target_logit = item_logit(h_last, item_emb, target);
    std::size_t rank = 1;
    for (std::int64_t id : candidates) {
        if (id == target) continue;
        const real logit = item_logit(h_last, item_emb, id);
        if (logit > target_logit || (logit == target_logit && id < target)) ++rank;
    }
    return rank;
}

} // namespace streamrec
