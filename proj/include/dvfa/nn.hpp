#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dvfa/tensor.hpp"

namespace dvfa::nn {

using ag::TensorPtr;

// Ordered name -> parameter map; iteration order is the checkpoint order.
struct ParamStore {
    std::map<std::string, TensorPtr> params;

    TensorPtr add(const std::string& name, std::vector<std::int64_t> shape,
                  const std::vector<real>& values);
    // Uniform(-limit, limit) init with limit = sqrt(6 / (fan_in + fan_out)).
    TensorPtr add_xavier(const std::string& name, std::int64_t fan_in, std::int64_t fan_out,
                         Rng& rng);
    TensorPtr add_zeros(const std::string& name, std::vector<std::int64_t> shape);
    TensorPtr add_ones(const std::string& name, std::vector<std::int64_t> shape);
    TensorPtr get(const std::string& name) const;
};

// Boolean queries x keys attention mask; true = attention allowed.
struct AttentionMask {
    std::int64_t n_queries = 0;
    std::int64_t n_keys = 0;
    std::vector<std::uint8_t> allow;  // row-major

    static AttentionMask full(std::int64_t q, std::int64_t k);
    bool allowed(std::int64_t q, std::int64_t k) const {
        return allow[static_cast<std::size_t>(q * n_keys + k)] != 0;
    }
    void set(std::int64_t q, std::int64_t k, bool v) {
        allow[static_cast<std::size_t>(q * n_keys + k)] = v ? 1 : 0;
    }
    // Every query row must keep at least one allowed key.
    void validate() const;
};

struct BlockConfig {
    std::int64_t d_model = 64;
    std::int64_t n_heads = 4;
    std::int64_t conv_kernel = 7;
    std::int64_t ff_mult = 4;
    real dropout = 0;

    void validate() const;
};

struct Linear {
    TensorPtr weight;  // in x out
    TensorPtr bias;    // 1 x out

    void build(ParamStore& store, const std::string& prefix, std::int64_t in, std::int64_t out,
               Rng& rng);
    TensorPtr operator()(const TensorPtr& x) const;
};

struct LayerNorm {
    TensorPtr gain;
    TensorPtr bias;

    void build(ParamStore& store, const std::string& prefix, std::int64_t d);
    TensorPtr operator()(const TensorPtr& x) const;
};

struct MultiHeadAttention {
    Linear q, k, v, out;
    std::int64_t n_heads = 0;
    std::int64_t d_model = 0;

    void build(ParamStore& store, const std::string& prefix, const BlockConfig& cfg, Rng& rng);
    TensorPtr operator()(const TensorPtr& queries, const TensorPtr& keys, const TensorPtr& values,
                         const AttentionMask& mask) const;
};

struct FeedForward {
    LayerNorm norm;
    Linear up, down;

    void build(ParamStore& store, const std::string& prefix, const BlockConfig& cfg, Rng& rng);
    TensorPtr operator()(const TensorPtr& x) const;
};

// Macaron conformer layer: half-FFN, self-attention, depthwise conv module,
// half-FFN, final normalization.
struct ConformerLayer {
    FeedForward ff1, ff2;
    LayerNorm attn_norm, conv_norm, mid_norm, final_norm;
    MultiHeadAttention attn;
    Linear conv_in;   // d -> 2d, gated
    TensorPtr conv_kernel, conv_bias;
    Linear conv_out;
    std::int64_t kernel_width = 7;

    void build(ParamStore& store, const std::string& prefix, const BlockConfig& cfg, Rng& rng);
    TensorPtr operator()(const TensorPtr& x, std::int64_t valid_len,
                         const AttentionMask& mask) const;
};

// Pre-norm transformer encoder layer (self-attention + FFN).
struct TransformerLayer {
    LayerNorm attn_norm;
    MultiHeadAttention attn;
    FeedForward ff;

    void build(ParamStore& store, const std::string& prefix, const BlockConfig& cfg, Rng& rng);
    TensorPtr operator()(const TensorPtr& x, const AttentionMask& mask) const;
};

enum class Modality { Visual = 0, Text = 1 };

// Learned absolute positional table per modality plus a learned
// modality-type row added to every token.
struct PositionalModalityEmbedding {
    TensorPtr pos_visual;  // max_len x d
    TensorPtr pos_text;
    TensorPtr modality;  // 2 x d

    void build(ParamStore& store, const std::string& prefix, std::int64_t max_visual,
               std::int64_t max_text, std::int64_t d, Rng& rng);
    TensorPtr operator()(std::int64_t length, Modality mod) const;
};

// Mask helper: sequence of `valid` real positions padded to `total`.
AttentionMask padding_mask(std::int64_t total, std::int64_t valid);

}  // namespace dvfa::nn
