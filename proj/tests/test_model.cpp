#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "dvfa/model.hpp"

using namespace dvfa;
using namespace dvfa::model;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.d_model = 8;
    c.d_in = 4;
    c.n_heads = 2;
    c.conv_kernel = 3;
    c.ff_mult = 2;
    c.visual_layers = 1;
    c.text_layers = 2;
    c.fusion_layers = 1;
    c.pool_after_layer = 1;
    c.s_max = 6;
    c.t_max = 32;
    c.token_max = 24;
    c.text_vocab = 12;
    return c;
}

std::vector<real> randv(std::size_t n, Rng& rng, real scale = 1) {
    std::normal_distribution<real> d(0, scale);
    std::vector<real> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

text::Transcript toy_transcript(std::initializer_list<std::int64_t> ids,
                                std::initializer_list<std::pair<int, int>> map) {
    text::Transcript t;
    t.token_ids = ids;
    t.word_map = map;
    for (std::size_t i = 0; i < t.word_map.size(); ++i) t.words.push_back("W" + std::to_string(i));
    return t;
}

}  // namespace

TEST_CASE("config validation and class count") {
    auto c = tiny_config();
    CHECK(c.n_classes() == 8);  // s_max + silence + deletion
    c.target_mode = TargetMode::Word;
    CHECK_THROWS_AS(c.validate(), ModelError);  // dictionary required
    c.word_dictionary = {"AA", "BB", "CC"};
    CHECK(c.n_classes() == 5);
    CHECK_NOTHROW(c.validate());
    c = tiny_config();
    c.n_heads = 3;
    CHECK_THROWS_AS(c.validate(), ModelError);
}

TEST_CASE("config json round trip keeps the dictionary") {
    auto c = tiny_config();
    c.target_mode = TargetMode::Word;
    c.word_dictionary = {"X", "Y"};
    c.token_mode = text::TokenMode::Phoneme;
    auto back = ModelConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    CHECK(back.word_dictionary == c.word_dictionary);
    CHECK(back.target_mode == TargetMode::Word);
    CHECK(back.token_mode == text::TokenMode::Phoneme);
}

TEST_CASE("encoders and heads produce the documented shapes") {
    auto cfg = tiny_config();
    DvfaModel m(cfg, 5);
    Rng rng = make_rng(1);
    const std::int64_t T = 10;
    auto f_v = m.encode_visual(randv(static_cast<std::size_t>(T * cfg.d_in), rng), T);
    CHECK(f_v->shape == std::vector<std::int64_t>{T, cfg.d_model});
    auto tr = toy_transcript({1, 2, 3, 4, 5}, {{0, 2}, {2, 1}, {3, 2}});
    auto f_t = m.encode_text(tr);
    CHECK(f_t->shape == std::vector<std::int64_t>{3, cfg.d_model});  // pooled to words
    auto fused = m.fuse(f_v, f_t);
    CHECK(fused.o_m->shape == std::vector<std::int64_t>{T + 3, cfg.d_model});
    auto tap = m.predict_tap(fused, 3);
    CHECK(tap->shape == std::vector<std::int64_t>{T, cfg.n_classes()});
    auto tpp = m.predict_tpp(fused);
    CHECK(tpp->shape == std::vector<std::int64_t>{3, 1});
    for (real p : tpp->val) {
        CHECK(p > 0);
        CHECK(p < 1);
    }
    // TAP rows are log-distributions
    for (std::int64_t t = 0; t < T; ++t) {
        real sum = 0;
        for (std::int64_t c = 0; c < cfg.n_classes(); ++c)
            sum += std::exp(tap->val[static_cast<std::size_t>(t * cfg.n_classes() + c)]);
        CHECK(sum == doctest::Approx(1.0));
    }
}

TEST_CASE("position classes beyond the sentence length are masked out") {
    auto cfg = tiny_config();
    DvfaModel m(cfg, 5);
    Rng rng = make_rng(2);
    const std::int64_t T = 6;
    auto fwd = m.forward(randv(static_cast<std::size_t>(T * cfg.d_in), rng), T,
                         toy_transcript({1, 2}, {{0, 1}, {1, 1}}));
    const auto n = cfg.n_classes();
    for (std::int64_t t = 0; t < T; ++t)
        for (std::int64_t c = 3; c < n - 1; ++c)  // S=2: classes 3..s_max masked
            CHECK(std::exp(fwd.tap_log_probs->val[static_cast<std::size_t>(t * n + c)]) ==
                  doctest::Approx(0.0));
}

TEST_CASE("freshly initialised model makes no confident predictions") {
    auto cfg = tiny_config();
    DvfaModel m(cfg, 5);
    Rng rng = make_rng(3);
    const std::int64_t T = 16;
    auto fwd = m.forward(randv(static_cast<std::size_t>(T * cfg.d_in), rng), T,
                         toy_transcript({1, 2, 3, 4, 5, 6}, {{0, 1}, {1, 1}, {2, 1}, {3, 1},
                                                             {4, 1}, {5, 1}}));
    const auto n = cfg.n_classes();
    double mean_max = 0;
    for (std::int64_t t = 0; t < T; ++t) {
        double row_max = 0;
        for (std::int64_t c = 0; c < n; ++c) {
            const double p = std::exp(fwd.tap_log_probs->val[static_cast<std::size_t>(t * n + c)]);
            CHECK(p < 0.95);
            row_max = std::max(row_max, p);
        }
        mean_max += row_max / static_cast<double>(T);
    }
    CHECK(mean_max < 0.65);
    for (real p : fwd.tpp_probs->val) {
        CHECK(p > 0.05);
        CHECK(p < 0.95);
    }
}

TEST_CASE("padding the visual input does not change the valid frames") {
    auto cfg = tiny_config();
    DvfaModel m(cfg, 5);
    Rng rng = make_rng(4);
    const std::int64_t T = 7, pad = 5;
    auto base = randv(static_cast<std::size_t>(T * cfg.d_in), rng);
    auto f1 = m.encode_visual(base, T);
    auto padded = base;
    auto junk = randv(static_cast<std::size_t>(pad * cfg.d_in), rng, 10);
    padded.insert(padded.end(), junk.begin(), junk.end());
    auto f2 = m.encode_visual(padded, T, T + pad);
    for (std::int64_t r = 0; r < T; ++r)
        for (std::int64_t c = 0; c < cfg.d_model; ++c)
            CHECK(f2->val[static_cast<std::size_t>(r * cfg.d_model + c)] ==
                  doctest::Approx(f1->val[static_cast<std::size_t>(r * cfg.d_model + c)])
                      .epsilon(1e-8));
}

TEST_CASE("an explicit full mask reproduces the default fusion") {
    auto cfg = tiny_config();
    DvfaModel m(cfg, 5);
    Rng rng = make_rng(5);
    const std::int64_t T = 6;
    auto f_v = m.encode_visual(randv(static_cast<std::size_t>(T * cfg.d_in), rng), T);
    auto tr = toy_transcript({3, 4}, {{0, 1}, {1, 1}});
    auto f_t = m.encode_text(tr);
    auto a = m.fuse(f_v, f_t);
    auto mask = nn::AttentionMask::full(T + 2, T + 2);
    auto b = m.fuse(f_v, f_t, &mask);
    for (std::size_t i = 0; i < a.o_m->val.size(); ++i)
        CHECK(a.o_m->val[i] == doctest::Approx(b.o_m->val[i]));
}

TEST_CASE("loss equals the hand-computed CE + BCE sum") {
    auto cfg = tiny_config();
    DvfaModel m(cfg, 5);
    Rng rng = make_rng(6);
    const std::int64_t T = 5;
    auto tr = toy_transcript({1, 2}, {{0, 1}, {1, 1}});
    auto fwd = m.forward(randv(static_cast<std::size_t>(T * cfg.d_in), rng), T, tr);
    codec::AlignmentTarget target;
    target.n_words = 2;
    target.frame_labels = {0, 1, 1, 2, 3};  // 3 = deletion for S=2
    codec::PresenceTarget presence;
    presence.present = {1, 0};
    auto parts = m.total_loss(fwd.tap_log_probs, fwd.tpp_probs, target, presence, tr.words);
    const auto n = cfg.n_classes();
    double ce = 0;
    const std::vector<std::int64_t> classes{0, 1, 1, 2, cfg.s_max + 1};  // deletion -> last class
    for (std::int64_t t = 0; t < T; ++t)
        ce -= fwd.tap_log_probs->val[static_cast<std::size_t>(t * n + classes[static_cast<std::size_t>(t)])];
    double bce = -std::log(fwd.tpp_probs->val[0]) - std::log(1 - fwd.tpp_probs->val[1]);
    CHECK(parts.tap == doctest::Approx(ce));
    CHECK(parts.tpp == doctest::Approx(bce));
    CHECK(parts.total->val[0] == doctest::Approx(ce + bce));
}

TEST_CASE("word-target mode classifies dictionary entries and collapses back") {
    auto cfg = tiny_config();
    cfg.target_mode = TargetMode::Word;
    cfg.word_dictionary = {"AA", "BB", "CC", "DD"};
    DvfaModel m(cfg, 5);
    const std::vector<std::string> words{"CC", "AA"};
    CHECK(m.target_class(0, words) == 0);
    CHECK(m.target_class(1, words) == 3);  // "CC"
    CHECK(m.target_class(2, words) == 1);  // "AA"
    CHECK(m.target_class(3, words) == 5);  // deletion = |dict|+1
    CHECK_THROWS_AS(m.target_class(1, {"NOPE"}), ModelError);

    // collapsing a wide posterior keeps the chosen words' mass
    const std::int64_t n = cfg.n_classes();  // 6
    std::vector<real> wide(static_cast<std::size_t>(n), real(0));
    wide[0] = real(0.1);   // silence
    wide[3] = real(0.4);   // CC -> position 1
    wide[1] = real(0.2);   // AA -> position 2
    wide[5] = real(0.3);   // deletion
    auto narrow = m.position_posteriors(wide, 1, words);
    REQUIRE(narrow.size() == 4);
    CHECK(narrow[0] == doctest::Approx(0.1));
    CHECK(narrow[1] == doctest::Approx(0.4));
    CHECK(narrow[2] == doctest::Approx(0.2));
    CHECK(narrow[3] == doctest::Approx(0.3));
}

TEST_CASE("position mode collapses the fixed head onto the sentence") {
    auto cfg = tiny_config();  // s_max 6 -> 8 classes
    DvfaModel m(cfg, 5);
    const std::vector<std::string> words{"A", "B"};
    std::vector<real> wide(8, real(0));
    wide[0] = real(0.5);
    wide[1] = real(0.2);
    wide[2] = real(0.2);
    wide[7] = real(0.1);  // deletion column
    auto narrow = m.position_posteriors(wide, 1, words);
    REQUIRE(narrow.size() == 4);
    CHECK(narrow[3] == doctest::Approx(0.1));
}

TEST_CASE("gradients flow into both modality encoders") {
    auto cfg = tiny_config();
    DvfaModel m(cfg, 5);
    Rng rng = make_rng(7);
    const std::int64_t T = 6;
    auto tr = toy_transcript({1, 2, 3}, {{0, 1}, {1, 1}, {2, 1}});
    auto fwd = m.forward(randv(static_cast<std::size_t>(T * cfg.d_in), rng), T, tr);
    codec::AlignmentTarget target;
    target.n_words = 3;
    target.frame_labels = {0, 1, 1, 2, 3, 0};
    codec::PresenceTarget presence;
    presence.present = {1, 1, 1};
    auto parts = m.total_loss(fwd.tap_log_probs, fwd.tpp_probs, target, presence, tr.words);
    ag::backward(parts.total);
    for (const char* name : {"text.embedding", "visual.in.weight", "tap.head.weight",
                             "tpp.head.weight", "pos.pos_text", "pos.modality"}) {
        auto p = m.store.get(name);
        REQUIRE(p->grad.size() == p->val.size());
        real norm = 0;
        for (real g : p->grad) norm += g * g;
        CHECK(norm > 0);
    }
}

TEST_CASE("end-to-end gradcheck through the full model") {
    auto cfg = tiny_config();
    DvfaModel m(cfg, 5);
    Rng rng = make_rng(8);
    const std::int64_t T = 6;
    auto features = randv(static_cast<std::size_t>(T * cfg.d_in), rng);
    auto tr = toy_transcript({1, 2}, {{0, 1}, {1, 1}});
    codec::AlignmentTarget target;
    target.n_words = 2;
    target.frame_labels = {0, 1, 1, 2, 2, 0};
    codec::PresenceTarget presence;
    presence.present = {1, 1};

    auto loss_value = [&] {
        auto fwd = m.forward(features, T, tr);
        return m.total_loss(fwd.tap_log_probs, fwd.tpp_probs, target, presence, tr.words);
    };
    auto parts = loss_value();
    ag::backward(parts.total);

    // spot-check a handful of parameters per tensor against differences
    Rng pick_rng = make_rng(99);
    const real eps = real(1e-5);
    double worst = 0;
    for (const auto& [name, p] : m.store.params) {
        std::uniform_int_distribution<std::size_t> pick(0, p->val.size() - 1);
        for (int k = 0; k < 2; ++k) {
            const std::size_t i = pick(pick_rng);
            const real keep = p->val[i];
            p->val[i] = keep + eps;
            const real up = loss_value().total->val[0];
            p->val[i] = keep - eps;
            const real down = loss_value().total->val[0];
            p->val[i] = keep;
            const double numeric = (up - down) / (2.0 * eps);
            const double analytic = p->grad[i];
            worst = std::max(worst, std::abs(numeric - analytic) /
                                        std::max(1.0, std::max(std::abs(numeric),
                                                               std::abs(analytic))));
        }
    }
    CHECK(worst < 1e-3);
}

TEST_CASE("identical seeds build identical models; different seeds differ") {
    auto cfg = tiny_config();
    DvfaModel a(cfg, 42), b(cfg, 42), c(cfg, 43);
    for (const auto& [name, p] : a.store.params) {
        CHECK(p->val == b.store.get(name)->val);
    }
    bool differs = false;
    for (const auto& [name, p] : a.store.params)
        if (p->val != c.store.get(name)->val) differs = true;
    CHECK(differs);
}

TEST_CASE("limits are enforced with data errors") {
    auto cfg = tiny_config();
    DvfaModel m(cfg, 5);
    Rng rng = make_rng(9);
    CHECK_THROWS_AS(
        m.encode_visual(randv(static_cast<std::size_t>((cfg.t_max + 1) * cfg.d_in), rng),
                        cfg.t_max + 1),
        DataError);
    text::Transcript too_many;
    for (int i = 0; i < 7; ++i) {  // one more than s_max
        too_many.token_ids.push_back(1);
        too_many.word_map.emplace_back(i, 1);
        too_many.words.push_back("W");
    }
    CHECK_THROWS_AS(m.encode_text(too_many), DataError);
}
