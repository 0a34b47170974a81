#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dvfa/codec.hpp"
#include "dvfa/nn.hpp"
#include "dvfa/text.hpp"

namespace dvfa::model {

enum class TargetMode { Position, Word };

struct ModelConfig {
    std::int64_t d_model = 64;
    std::int64_t d_in = 16;
    std::int64_t n_heads = 4;
    std::int64_t conv_kernel = 7;
    std::int64_t ff_mult = 4;
    std::int64_t visual_layers = 2;
    std::int64_t text_layers = 2;
    std::int64_t fusion_layers = 3;
    std::int64_t pool_after_layer = 1;  // text layers at token granularity
    std::int64_t s_max = 16;            // max word positions
    std::int64_t t_max = 512;           // max video frames
    std::int64_t token_max = 128;       // max subword tokens
    TargetMode target_mode = TargetMode::Position;
    text::TokenMode token_mode = text::TokenMode::Word;
    std::int64_t text_vocab = 0;  // token embedding rows, set from the tokenizer
    real dropout = 0;
    // Word-target mode classifies over this dictionary instead of positions.
    std::vector<std::string> word_dictionary;

    // N: position mode s_max+2, word mode |dictionary|+2.
    std::int64_t n_classes() const;
    void validate() const;
    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);

    static ModelConfig desk();
    static ModelConfig paper();
};

struct FusedOutput {
    ag::TensorPtr o_m;  // (T+S) x D
    std::int64_t n_frames = 0;
    std::int64_t n_words = 0;
};

// Visual/text encoders, multi-modal attentive encoder, and the TAP/TPP
// heads, trained with the summed alignment + presence loss.
class DvfaModel {
  public:
    ModelConfig cfg;
    nn::ParamStore store;
    bool training = false;
    Rng* dropout_rng = nullptr;

    explicit DvfaModel(ModelConfig config, std::uint64_t init_seed = 1);

    // features: t_valid x d_in valid frames inside t_total rows (padding
    // rows ignored). Default t_total == t_valid.
    ag::TensorPtr encode_visual(const std::vector<real>& features, std::int64_t t_valid,
                                std::int64_t t_total = -1) const;
    ag::TensorPtr encode_text(const text::Transcript& transcript) const;
    FusedOutput fuse(const ag::TensorPtr& f_v, const ag::TensorPtr& f_t,
                     const nn::AttentionMask* mask = nullptr) const;
    // Per-frame class log-distributions; in position mode, classes beyond
    // the sentence's S are masked out of the softmax.
    ag::TensorPtr predict_tap(const FusedOutput& fused, std::int64_t n_words) const;
    ag::TensorPtr predict_tpp(const FusedOutput& fused) const;

    struct LossParts {
        ag::TensorPtr total;
        real tap = 0;
        real tpp = 0;
    };
    // words: the (perturbed) transcript words, used for word-mode targets.
    LossParts total_loss(const ag::TensorPtr& tap_log_probs, const ag::TensorPtr& tpp_probs,
                         const codec::AlignmentTarget& target,
                         const codec::PresenceTarget& presence,
                         const std::vector<std::string>& words) const;

    // Convenience full forward for one utterance.
    struct Forward {
        ag::TensorPtr tap_log_probs;
        ag::TensorPtr tpp_probs;
        FusedOutput fused;
    };
    Forward forward(const std::vector<real>& features, std::int64_t n_frames,
                    const text::Transcript& transcript) const;

    // Map a codec frame label (0 silence, 1..S positions, S+1 deletion)
    // into this model's class space.
    std::int64_t target_class(int codec_label, const std::vector<std::string>& words) const;
    // Posterior matrix (exp of TAP output) collapsed to the per-sentence
    // layout decode_alignment expects; identity in position mode.
    std::vector<real> position_posteriors(const std::vector<real>& tap_probs,
                                          std::int64_t n_frames,
                                          const std::vector<std::string>& words) const;

  private:
    nn::Linear visual_in_;
    ag::TensorPtr visual_conv_kernel_, visual_conv_bias_;
    nn::Linear visual_proj_;
    ag::TensorPtr token_embedding_;
    nn::PositionalModalityEmbedding pos_;
    std::vector<nn::ConformerLayer> visual_stack_;
    std::vector<nn::ConformerLayer> text_stack_;
    std::vector<nn::TransformerLayer> fusion_stack_;
    nn::Linear tap_head_;
    nn::Linear tpp_head_;
};

}  // namespace dvfa::model
