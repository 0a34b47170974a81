#include "dvfa/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>

namespace dvfa::model {

using namespace dvfa::ag;
using nlohmann::json;

std::int64_t ModelConfig::n_classes() const {
    return target_mode == TargetMode::Position
               ? s_max + 2
               : static_cast<std::int64_t>(word_dictionary.size()) + 2;
}

void ModelConfig::validate() const {
    if (d_model % n_heads != 0) throw ModelError("model config: d_model not divisible by heads");
    if (conv_kernel % 2 == 0) throw ModelError("model config: conv kernel must be odd");
    if (s_max < 1 || t_max < 1 || token_max < 1)
        throw ModelError("model config: limits must be >= 1");
    if (pool_after_layer < 0 || pool_after_layer > text_layers)
        throw ModelError("model config: pool_after_layer outside [0, text_layers]");
    if (text_vocab < 1) throw ModelError("model config: text_vocab not set");
    if (target_mode == TargetMode::Word && word_dictionary.empty())
        throw ModelError("model config: word-target mode needs a dictionary");
}

std::string ModelConfig::to_json() const {
    json j;
    j["d_model"] = d_model;
    j["d_in"] = d_in;
    j["n_heads"] = n_heads;
    j["conv_kernel"] = conv_kernel;
    j["ff_mult"] = ff_mult;
    j["visual_layers"] = visual_layers;
    j["text_layers"] = text_layers;
    j["fusion_layers"] = fusion_layers;
    j["pool_after_layer"] = pool_after_layer;
    j["s_max"] = s_max;
    j["t_max"] = t_max;
    j["token_max"] = token_max;
    j["target_mode"] = target_mode == TargetMode::Position ? "position" : "word";
    j["token_mode"] = token_mode == text::TokenMode::Word ? "word" : "phoneme";
    j["text_vocab"] = text_vocab;
    j["dropout"] = dropout;
    j["word_dictionary"] = word_dictionary;
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& textstr) {
    try {
        json j = json::parse(textstr);
        ModelConfig c;
        c.d_model = j.at("d_model").get<std::int64_t>();
        c.d_in = j.at("d_in").get<std::int64_t>();
        c.n_heads = j.at("n_heads").get<std::int64_t>();
        c.conv_kernel = j.at("conv_kernel").get<std::int64_t>();
        c.ff_mult = j.at("ff_mult").get<std::int64_t>();
        c.visual_layers = j.at("visual_layers").get<std::int64_t>();
        c.text_layers = j.at("text_layers").get<std::int64_t>();
        c.fusion_layers = j.at("fusion_layers").get<std::int64_t>();
        c.pool_after_layer = j.at("pool_after_layer").get<std::int64_t>();
        c.s_max = j.at("s_max").get<std::int64_t>();
        c.t_max = j.at("t_max").get<std::int64_t>();
        c.token_max = j.at("token_max").get<std::int64_t>();
        c.target_mode = j.at("target_mode").get<std::string>() == "word" ? TargetMode::Word
                                                                         : TargetMode::Position;
        c.token_mode = j.at("token_mode").get<std::string>() == "phoneme"
                           ? text::TokenMode::Phoneme
                           : text::TokenMode::Word;
        c.text_vocab = j.at("text_vocab").get<std::int64_t>();
        c.dropout = j.at("dropout").get<real>();
        c.word_dictionary = j.at("word_dictionary").get<std::vector<std::string>>();
        return c;
    } catch (const json::exception& e) {
        throw DataError(std::string("model config: ") + e.what());
    }
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper() {
    ModelConfig c;
    c.d_model = 512;
    c.n_heads = 8;
    c.visual_layers = 4;
    c.text_layers = 4;
    c.fusion_layers = 6;
    c.pool_after_layer = 2;
    return c;
}

DvfaModel::DvfaModel(ModelConfig config, std::uint64_t init_seed) : cfg(std::move(config)) {
    cfg.validate();
    Rng rng = make_rng(init_seed);
    nn::BlockConfig block;
    block.d_model = cfg.d_model;
    block.n_heads = cfg.n_heads;
    block.conv_kernel = cfg.conv_kernel;
    block.ff_mult = cfg.ff_mult;
    block.dropout = cfg.dropout;

    visual_in_.build(store, "visual.in", cfg.d_in, cfg.d_model, rng);
    {
        const real limit = std::sqrt(real(6) / static_cast<real>(cfg.conv_kernel + 1));
        std::uniform_real_distribution<real> dist(-limit, limit);
        std::vector<real> kv(static_cast<std::size_t>(cfg.conv_kernel * cfg.d_model));
        for (auto& v : kv) v = dist(rng);
        visual_conv_kernel_ = store.add("visual.conv_kernel", {cfg.conv_kernel, cfg.d_model}, kv);
        visual_conv_bias_ = store.add_zeros("visual.conv_bias", {1, cfg.d_model});
    }
    visual_proj_.build(store, "visual.proj", cfg.d_model, cfg.d_model, rng);
    token_embedding_ = store.add_xavier("text.embedding", cfg.text_vocab, cfg.d_model, rng);
    pos_.build(store, "pos", cfg.t_max, cfg.token_max, cfg.d_model, rng);
    visual_stack_.resize(static_cast<std::size_t>(cfg.visual_layers));
    for (std::size_t i = 0; i < visual_stack_.size(); ++i)
        visual_stack_[i].build(store, "visual.conformer" + std::to_string(i), block, rng);
    text_stack_.resize(static_cast<std::size_t>(cfg.text_layers));
    for (std::size_t i = 0; i < text_stack_.size(); ++i)
        text_stack_[i].build(store, "text.conformer" + std::to_string(i), block, rng);
    fusion_stack_.resize(static_cast<std::size_t>(cfg.fusion_layers));
    for (std::size_t i = 0; i < fusion_stack_.size(); ++i)
        fusion_stack_[i].build(store, "fusion.transformer" + std::to_string(i), block, rng);
    tap_head_.build(store, "tap.head", cfg.d_model, cfg.n_classes(), rng);
    tpp_head_.build(store, "tpp.head", cfg.d_model, 1, rng);
}

TensorPtr DvfaModel::encode_visual(const std::vector<real>& features, std::int64_t t_valid,
                                   std::int64_t t_total) const {
    if (t_total < 0) t_total = t_valid;
    if (t_valid < 1 || t_valid > t_total)
        throw ShapeError("encode_visual: invalid frame counts");
    if (t_total > cfg.t_max)
        throw DataError("encode_visual: " + std::to_string(t_total) + " frames exceeds t_max " +
                        std::to_string(cfg.t_max));
    if (static_cast<std::int64_t>(features.size()) != t_total * cfg.d_in)
        throw DataError("encode_visual: feature dim mismatch, expected " +
                        std::to_string(cfg.d_in) + " per frame");
    auto x = constant({t_total, cfg.d_in}, features);
    auto h = visual_in_(x);
    h = depthwise_conv1d(h, visual_conv_kernel_, visual_conv_bias_, t_valid);
    h = visual_proj_(swish(h));
    h = add(h, pos_(t_total, nn::Modality::Visual));
    h = dropout(h, cfg.dropout, training, dropout_rng);
    auto mask = nn::padding_mask(t_total, t_valid);
    for (const auto& layer : visual_stack_) h = layer(h, t_valid, mask);
    return h;
}

TensorPtr DvfaModel::encode_text(const text::Transcript& transcript) const {
    transcript.check();
    const std::int64_t s = transcript.n_words();
    const std::int64_t n_tok = static_cast<std::int64_t>(transcript.token_ids.size());
    if (s > cfg.s_max)
        throw DataError("encode_text: S=" + std::to_string(s) + " exceeds s_max " +
                        std::to_string(cfg.s_max));
    if (n_tok > cfg.token_max)
        throw DataError("encode_text: token count exceeds token_max");
    auto h = embedding(token_embedding_, transcript.token_ids);
    h = add(h, pos_(n_tok, nn::Modality::Text));
    h = dropout(h, cfg.dropout, training, dropout_rng);
    auto tok_mask = nn::AttentionMask::full(n_tok, n_tok);
    std::int64_t i = 0;
    for (; i < cfg.pool_after_layer; ++i)
        h = text_stack_[static_cast<std::size_t>(i)](h, n_tok, tok_mask);
    h = text::pool_to_words(h, transcript.word_map);
    auto word_mask = nn::AttentionMask::full(s, s);
    for (; i < cfg.text_layers; ++i)
        h = text_stack_[static_cast<std::size_t>(i)](h, s, word_mask);
    return h;
}

FusedOutput DvfaModel::fuse(const TensorPtr& f_v, const TensorPtr& f_t,
                            const nn::AttentionMask* mask) const {
    if (f_v->cols() != f_t->cols())
        throw ShapeError("fuse: modality widths differ (" + std::to_string(f_v->cols()) +
                         " vs " + std::to_string(f_t->cols()) + ")");
    FusedOutput out;
    out.n_frames = f_v->rows();
    out.n_words = f_t->rows();
    auto h = concat({f_v, f_t}, 0);
    const auto full = nn::AttentionMask::full(h->rows(), h->rows());
    const auto& m = mask != nullptr ? *mask : full;
    for (const auto& layer : fusion_stack_) h = layer(h, m);
    out.o_m = h;
    return out;
}

TensorPtr DvfaModel::predict_tap(const FusedOutput& fused, std::int64_t n_words) const {
    auto frames = slice(fused.o_m, 0, 0, fused.n_frames);
    auto logits = tap_head_(frames);
    if (cfg.target_mode == TargetMode::Position && n_words < cfg.s_max) {
        // Word-position classes beyond the sentence's S leave the softmax.
        const std::int64_t n = cfg.n_classes();
        std::vector<real> bias(static_cast<std::size_t>(fused.n_frames * n), real(0));
        for (std::int64_t t = 0; t < fused.n_frames; ++t)
            for (std::int64_t c = n_words + 1; c < n - 1; ++c)
                bias[static_cast<std::size_t>(t * n + c)] = real(-1e30);
        logits = add(logits, constant({fused.n_frames, n}, bias));
    }
    return log_softmax(logits);
}

TensorPtr DvfaModel::predict_tpp(const FusedOutput& fused) const {
    auto words = slice(fused.o_m, 0, fused.n_frames, fused.n_words);
    return sigmoid(tpp_head_(words));
}

std::int64_t DvfaModel::target_class(int codec_label, const std::vector<std::string>& words) const {
    const int s = static_cast<int>(words.size());
    if (codec_label < 0 || codec_label > s + 1)
        throw ModelError("target label " + std::to_string(codec_label) + " out of range");
    if (cfg.target_mode == TargetMode::Position) {
        if (codec_label == s + 1) return cfg.s_max + 1;
        return codec_label;
    }
    if (codec_label == 0) return 0;
    if (codec_label == s + 1) return static_cast<std::int64_t>(cfg.word_dictionary.size()) + 1;
    const auto& w = words[static_cast<std::size_t>(codec_label - 1)];
    auto it = std::find(cfg.word_dictionary.begin(), cfg.word_dictionary.end(), w);
    if (it == cfg.word_dictionary.end())
        throw ModelError("word-target mode: word '" + w + "' not in dictionary");
    return std::distance(cfg.word_dictionary.begin(), it) + 1;
}

std::vector<real> DvfaModel::position_posteriors(const std::vector<real>& tap_probs,
                                                 std::int64_t n_frames,
                                                 const std::vector<std::string>& words) const {
    const std::int64_t n_model = cfg.n_classes();
    const std::int64_t s = static_cast<std::int64_t>(words.size());
    const std::int64_t n_out = s + 2;
    std::vector<real> out(static_cast<std::size_t>(n_frames * n_out), real(0));
    for (std::int64_t t = 0; t < n_frames; ++t) {
        out[static_cast<std::size_t>(t * n_out)] = tap_probs[static_cast<std::size_t>(t * n_model)];
        out[static_cast<std::size_t>(t * n_out + n_out - 1)] =
            tap_probs[static_cast<std::size_t>(t * n_model + n_model - 1)];
        for (std::int64_t p = 1; p <= s; ++p) {
            const std::int64_t cls = target_class(static_cast<int>(p), words);
            out[static_cast<std::size_t>(t * n_out + p)] =
                tap_probs[static_cast<std::size_t>(t * n_model + cls)];
        }
    }
    return out;
}

DvfaModel::LossParts DvfaModel::total_loss(const TensorPtr& tap_log_probs,
                                           const TensorPtr& tpp_probs,
                                           const codec::AlignmentTarget& target,
                                           const codec::PresenceTarget& presence,
                                           const std::vector<std::string>& words) const {
    const std::int64_t t = tap_log_probs->rows();
    if (static_cast<std::int64_t>(target.frame_labels.size()) != t)
        throw ShapeError("total_loss: frame-label length mismatch");
    if (presence.present.size() != words.size())
        throw ShapeError("total_loss: presence length mismatch");
    std::vector<std::int64_t> classes(static_cast<std::size_t>(t));
    for (std::int64_t i = 0; i < t; ++i)
        classes[static_cast<std::size_t>(i)] =
            target_class(target.frame_labels[static_cast<std::size_t>(i)], words);
    std::vector<bool> frame_mask(static_cast<std::size_t>(t), true);
    auto tap = cross_entropy(tap_log_probs, classes, frame_mask);
    std::vector<bool> word_mask(words.size(), true);
    auto tpp = binary_cross_entropy(tpp_probs, presence.present, word_mask);
    LossParts parts;
    parts.tap = tap->val[0];
    parts.tpp = tpp->val[0];
    parts.total = add(tap, tpp);
    return parts;
}

DvfaModel::Forward DvfaModel::forward(const std::vector<real>& features, std::int64_t n_frames,
                                      const text::Transcript& transcript) const {
    Forward f;
    auto f_v = encode_visual(features, n_frames);
    auto f_t = encode_text(transcript);
    f.fused = fuse(f_v, f_t);
    f.tap_log_probs = predict_tap(f.fused, transcript.n_words());
    f.tpp_probs = predict_tpp(f.fused);
    return f;
}

}  // namespace dvfa::model
