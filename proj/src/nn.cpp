#include "dvfa/nn.hpp"

#include <cmath>

namespace dvfa::nn {

using namespace dvfa::ag;

TensorPtr ParamStore::add(const std::string& name, std::vector<std::int64_t> shape,
                          const std::vector<real>& values) {
    if (params.count(name)) throw ModelError("duplicate parameter name '" + name + "'");
    auto t = make_tensor(std::move(shape), values, true);
    t->name = name;
    params[name] = t;
    return t;
}

TensorPtr ParamStore::add_xavier(const std::string& name, std::int64_t fan_in,
                                 std::int64_t fan_out, Rng& rng) {
    const real limit = std::sqrt(real(6) / static_cast<real>(fan_in + fan_out));
    std::uniform_real_distribution<real> dist(-limit, limit);
    std::vector<real> vals(static_cast<std::size_t>(fan_in * fan_out));
    for (auto& v : vals) v = dist(rng);
    return add(name, {fan_in, fan_out}, vals);
}

TensorPtr ParamStore::add_zeros(const std::string& name, std::vector<std::int64_t> shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return add(name, std::move(shape), std::vector<real>(static_cast<std::size_t>(n), real(0)));
}

TensorPtr ParamStore::add_ones(const std::string& name, std::vector<std::int64_t> shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return add(name, std::move(shape), std::vector<real>(static_cast<std::size_t>(n), real(1)));
}

TensorPtr ParamStore::get(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw ModelError("unknown parameter '" + name + "'");
    return it->second;
}

AttentionMask AttentionMask::full(std::int64_t q, std::int64_t k) {
    AttentionMask m;
    m.n_queries = q;
    m.n_keys = k;
    m.allow.assign(static_cast<std::size_t>(q * k), 1);
    return m;
}

void AttentionMask::validate() const {
    for (std::int64_t q = 0; q < n_queries; ++q) {
        bool any = false;
        for (std::int64_t k = 0; k < n_keys && !any; ++k) any = allowed(q, k);
        if (!any)
            throw ShapeError("attention mask: query row " + std::to_string(q) +
                             " has no allowed keys");
    }
}

void BlockConfig::validate() const {
    if (d_model % n_heads != 0)
        throw ModelError("block config: d_model " + std::to_string(d_model) +
                         " not divisible by " + std::to_string(n_heads) + " heads");
    if (conv_kernel % 2 == 0)
        throw ModelError("block config: conv kernel width must be odd");
}

void Linear::build(ParamStore& store, const std::string& prefix, std::int64_t in,
                   std::int64_t out, Rng& rng) {
    weight = store.add_xavier(prefix + ".weight", in, out, rng);
    bias = store.add_zeros(prefix + ".bias", {1, out});
}

TensorPtr Linear::operator()(const TensorPtr& x) const { return add(matmul(x, weight), bias); }

void LayerNorm::build(ParamStore& store, const std::string& prefix, std::int64_t d) {
    gain = store.add_ones(prefix + ".gain", {1, d});
    bias = store.add_zeros(prefix + ".bias", {1, d});
}

TensorPtr LayerNorm::operator()(const TensorPtr& x) const {
    return layer_norm(x, gain, bias);
}

void MultiHeadAttention::build(ParamStore& store, const std::string& prefix,
                               const BlockConfig& cfg, Rng& rng) {
    cfg.validate();
    n_heads = cfg.n_heads;
    d_model = cfg.d_model;
    q.build(store, prefix + ".q", d_model, d_model, rng);
    k.build(store, prefix + ".k", d_model, d_model, rng);
    v.build(store, prefix + ".v", d_model, d_model, rng);
    out.build(store, prefix + ".out", d_model, d_model, rng);
}

TensorPtr MultiHeadAttention::operator()(const TensorPtr& queries, const TensorPtr& keys,
                                         const TensorPtr& values,
                                         const AttentionMask& mask) const {
    if (queries->cols() != d_model || keys->cols() != d_model || values->cols() != d_model)
        throw ShapeError("attention: operand width must equal d_model " +
                         std::to_string(d_model));
    if (mask.n_queries != queries->rows() || mask.n_keys != keys->rows())
        throw ShapeError("attention: mask dimensions do not match sequence lengths");
    mask.validate();

    const std::int64_t lq = queries->rows(), lk = keys->rows();
    const std::int64_t dh = d_model / n_heads;
    // Additive bias: -1e30 underflows to exactly zero weight after softmax.
    std::vector<real> bias_vals(static_cast<std::size_t>(lq * lk), real(0));
    for (std::int64_t a = 0; a < lq; ++a)
        for (std::int64_t b = 0; b < lk; ++b)
            if (!mask.allowed(a, b)) bias_vals[static_cast<std::size_t>(a * lk + b)] = real(-1e30);
    auto mask_bias = constant({lq, lk}, bias_vals);

    auto Q = q(queries);
    auto K = k(keys);
    auto V = v(values);
    const real inv_sqrt = real(1) / std::sqrt(static_cast<real>(dh));
    std::vector<TensorPtr> heads;
    heads.reserve(static_cast<std::size_t>(n_heads));
    for (std::int64_t h = 0; h < n_heads; ++h) {
        auto Qh = slice(Q, 1, h * dh, dh);
        auto Kh = slice(K, 1, h * dh, dh);
        auto Vh = slice(V, 1, h * dh, dh);
        auto scores = add(scale(matmul(Qh, transpose(Kh)), inv_sqrt), mask_bias);
        auto weights = softmax(scores);
        heads.push_back(matmul(weights, Vh));
    }
    return out(concat(heads, 1));
}

void FeedForward::build(ParamStore& store, const std::string& prefix, const BlockConfig& cfg,
                        Rng& rng) {
    norm.build(store, prefix + ".norm", cfg.d_model);
    up.build(store, prefix + ".up", cfg.d_model, cfg.d_model * cfg.ff_mult, rng);
    down.build(store, prefix + ".down", cfg.d_model * cfg.ff_mult, cfg.d_model, rng);
}

TensorPtr FeedForward::operator()(const TensorPtr& x) const { return down(swish(up(norm(x)))); }

void ConformerLayer::build(ParamStore& store, const std::string& prefix, const BlockConfig& cfg,
                           Rng& rng) {
    cfg.validate();
    kernel_width = cfg.conv_kernel;
    ff1.build(store, prefix + ".ff1", cfg, rng);
    attn_norm.build(store, prefix + ".attn_norm", cfg.d_model);
    attn.build(store, prefix + ".attn", cfg, rng);
    conv_norm.build(store, prefix + ".conv_norm", cfg.d_model);
    conv_in.build(store, prefix + ".conv_in", cfg.d_model, cfg.d_model * 2, rng);
    {
        const real limit = std::sqrt(real(6) / static_cast<real>(cfg.conv_kernel + 1));
        std::uniform_real_distribution<real> dist(-limit, limit);
        std::vector<real> kv(static_cast<std::size_t>(cfg.conv_kernel * cfg.d_model));
        for (auto& v : kv) v = dist(rng);
        conv_kernel = store.add(prefix + ".conv_kernel", {cfg.conv_kernel, cfg.d_model}, kv);
        conv_bias = store.add_zeros(prefix + ".conv_bias", {1, cfg.d_model});
    }
    mid_norm.build(store, prefix + ".mid_norm", cfg.d_model);
    conv_out.build(store, prefix + ".conv_out", cfg.d_model, cfg.d_model, rng);
    ff2.build(store, prefix + ".ff2", cfg, rng);
    final_norm.build(store, prefix + ".final_norm", cfg.d_model);
}

TensorPtr ConformerLayer::operator()(const TensorPtr& x, std::int64_t valid_len,
                                     const AttentionMask& mask) const {
    if (x->rows() < 1) throw ShapeError("conformer: empty input");
    auto h = add(x, scale(ff1(x), real(0.5)));
    {
        auto n = attn_norm(h);
        h = add(h, attn(n, n, n, mask));
    }
    {
        // Convolution module: norm, pointwise gate, depthwise conv, norm,
        // swish, pointwise projection.
        auto n = conv_norm(h);
        auto g = conv_in(n);
        const std::int64_t d = conv_kernel->cols();
        auto a = slice(g, 1, 0, d);
        auto b = slice(g, 1, d, d);
        auto gated = mul(a, sigmoid(b));
        auto c = depthwise_conv1d(gated, conv_kernel, conv_bias, valid_len);
        h = add(h, conv_out(swish(mid_norm(c))));
    }
    h = add(h, scale(ff2(h), real(0.5)));
    return final_norm(h);
}

void TransformerLayer::build(ParamStore& store, const std::string& prefix, const BlockConfig& cfg,
                             Rng& rng) {
    attn_norm.build(store, prefix + ".attn_norm", cfg.d_model);
    attn.build(store, prefix + ".attn", cfg, rng);
    ff.build(store, prefix + ".ff", cfg, rng);
}

TensorPtr TransformerLayer::operator()(const TensorPtr& x, const AttentionMask& mask) const {
    auto n = attn_norm(x);
    auto h = add(x, attn(n, n, n, mask));
    return add(h, ff(h));
}

void PositionalModalityEmbedding::build(ParamStore& store, const std::string& prefix,
                                        std::int64_t max_visual, std::int64_t max_text,
                                        std::int64_t d, Rng& rng) {
    std::normal_distribution<real> dist(real(0), real(0.02));
    auto init = [&](const std::string& name, std::int64_t rows) {
        std::vector<real> v(static_cast<std::size_t>(rows * d));
        for (auto& x : v) x = dist(rng);
        return store.add(name, {rows, d}, v);
    };
    pos_visual = init(prefix + ".pos_visual", max_visual);
    pos_text = init(prefix + ".pos_text", max_text);
    modality = init(prefix + ".modality", 2);
}

TensorPtr PositionalModalityEmbedding::operator()(std::int64_t length, Modality mod) const {
    const auto& table = mod == Modality::Visual ? pos_visual : pos_text;
    if (length < 1) throw ShapeError("positional embedding: length must be >= 1");
    if (length > table->rows())
        throw DataError("positional embedding: length " + std::to_string(length) +
                         " exceeds configured maximum " + std::to_string(table->rows()));
    auto pos = slice(table, 0, 0, length);
    auto mrow = slice(modality, 0, static_cast<std::int64_t>(mod), 1);
    return add(pos, mrow);
}

AttentionMask padding_mask(std::int64_t total, std::int64_t valid) {
    if (valid < 1 || valid > total)
        throw ShapeError("padding_mask: valid length outside [1, total]");
    AttentionMask m;
    m.n_queries = total;
    m.n_keys = total;
    m.allow.assign(static_cast<std::size_t>(total * total), 0);
    for (std::int64_t q = 0; q < total; ++q)
        for (std::int64_t k = 0; k < valid; ++k) m.set(q, k, true);
    return m;
}

}  // namespace dvfa::nn
