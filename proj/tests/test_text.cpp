#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>
#include <set>

#include "dvfa/text.hpp"

using namespace dvfa;
using namespace dvfa::text;

TEST_CASE("split_words uppercases and collapses whitespace") {
    CHECK(split_words("hello  world") == std::vector<std::string>{"HELLO", "WORLD"});
    CHECK(split_words("  a\tb\nc ") == std::vector<std::string>{"A", "B", "C"});
    CHECK(split_words("").empty());
}

TEST_CASE("tokenizer always covers the corpus alphabet") {
    auto tok = Tokenizer::build({"ABBA", "BACCA"});
    // every single character of the corpus must be a fragment
    std::set<std::string> frags(tok.fragments.begin(), tok.fragments.end());
    for (const char* c : {"A", "B", "C"}) CHECK(frags.count(c));
    // a word with unseen characters still needs its letters present to tokenize
    CHECK_THROWS_AS(tok.tokenize("XYZ", TokenMode::Word), DataError);
}

TEST_CASE("greedy longest-match picks the longest fragment first") {
    Tokenizer tok;
    tok.fragments = {"A", "B", "C", "AB", "ABC"};
    auto t = tok.tokenize("ABCAB", TokenMode::Word);
    // ABC + AB
    REQUIRE(t.token_ids.size() == 2);
    CHECK(tok.fragments[static_cast<std::size_t>(t.token_ids[0])] == "ABC");
    CHECK(tok.fragments[static_cast<std::size_t>(t.token_ids[1])] == "AB");
    CHECK(t.word_map == std::vector<std::pair<int, int>>{{0, 2}});
}

TEST_CASE("round trip over 1000 random sentences") {
    Rng rng = make_rng(31);
    // corpus-style vocabulary
    std::vector<std::string> vocab;
    std::uniform_int_distribution<int> len(3, 8);
    std::uniform_int_distribution<int> ch(0, 9);
    for (int i = 0; i < 50; ++i) {
        std::string w;
        const int n = len(rng);
        for (int j = 0; j < n; ++j) w += static_cast<char>('A' + ch(rng));
        vocab.push_back(w);
    }
    auto tok = Tokenizer::build(vocab);
    std::uniform_int_distribution<int> nw(1, 8);
    std::uniform_int_distribution<std::size_t> pick(0, vocab.size() - 1);
    for (int it = 0; it < 1000; ++it) {
        std::vector<std::string> words;
        const int n = nw(rng);
        for (int i = 0; i < n; ++i) words.push_back(vocab[pick(rng)]);
        std::string sentence;
        for (std::size_t i = 0; i < words.size(); ++i) sentence += (i ? " " : "") + words[i];
        auto t = tok.tokenize(sentence, TokenMode::Word);
        CHECK(t.words == words);
        CHECK(tok.detokenize(t) == sentence);
        CHECK_NOTHROW(t.check());
        // word_map tiles the token sequence contiguously
        int cursor = 0;
        for (const auto& [start, count] : t.word_map) {
            CHECK(start == cursor);
            CHECK(count >= 1);
            cursor += count;
        }
        CHECK(cursor == static_cast<int>(t.token_ids.size()));
    }
}

TEST_CASE("tokenizer json round trip") {
    auto tok = Tokenizer::build({"HELLO", "WORLD", "HELD"});
    tok.viseme_count = 12;
    auto back = Tokenizer::from_json(tok.to_json());
    CHECK(back.fragments == tok.fragments);
    CHECK(back.viseme_count == 12);
    CHECK_THROWS_AS(Tokenizer::from_json("{}"), DataError);
}

TEST_CASE("fragment inventory is capped and deterministic") {
    std::vector<std::string> vocab;
    Rng rng = make_rng(5);
    std::uniform_int_distribution<int> ch(0, 25);
    for (int i = 0; i < 200; ++i) {
        std::string w;
        for (int j = 0; j < 6; ++j) w += static_cast<char>('A' + ch(rng));
        vocab.push_back(w);
    }
    auto tok1 = Tokenizer::build(vocab);
    auto tok2 = Tokenizer::build(vocab);
    CHECK(tok1.fragments == tok2.fragments);
    CHECK(tok1.fragments.size() <= 96);
}

TEST_CASE("phoneme mode expands words through the lexicon") {
    auto lex = corpus::build_lexicon(3, 10, 8, 2, 4, 6);
    auto tok = Tokenizer::build(lex.words);
    tok.viseme_count = lex.viseme_count;
    const auto& w0 = lex.words[0];
    const auto& w1 = lex.words[1];
    auto t = tok.tokenize(w0 + " " + w1, TokenMode::Phoneme, &lex);
    const auto& v0 = lex.visemes[0];
    const auto& v1 = lex.visemes[1];
    REQUIRE(t.words.size() == v0.size() + v1.size());
    REQUIRE(t.token_ids.size() == v0.size() + v1.size());
    for (std::size_t i = 0; i < v0.size(); ++i)
        CHECK(t.token_ids[i] == v0[i]);
    for (std::size_t i = 0; i < v1.size(); ++i)
        CHECK(t.token_ids[v0.size() + i] == v1[i]);
    CHECK(t.source_words == std::vector<std::string>{w0, w1});
    CHECK(t.phonemes_per_word ==
          std::vector<int>{static_cast<int>(v0.size()), static_cast<int>(v1.size())});
    // each phoneme is its own alignment unit
    for (const auto& [start, count] : t.word_map) CHECK(count == 1);
    CHECK_THROWS_AS(tok.tokenize("NOTAWORD", TokenMode::Phoneme, &lex), DataError);
    CHECK_THROWS_AS(tok.tokenize(w0, TokenMode::Phoneme, nullptr), DataError);
}

TEST_CASE("pool_to_words averages each word's subword rows") {
    auto x = ag::constant({5, 2}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10});
    std::vector<std::pair<int, int>> map{{0, 2}, {2, 1}, {3, 2}};
    auto pooled = pool_to_words(x, map);
    REQUIRE(pooled->shape == std::vector<std::int64_t>{3, 2});
    CHECK(pooled->val[0] == doctest::Approx(2));   // mean(1,3)
    CHECK(pooled->val[1] == doctest::Approx(3));   // mean(2,4)
    CHECK(pooled->val[2] == doctest::Approx(5));
    CHECK(pooled->val[3] == doctest::Approx(6));
    CHECK(pooled->val[4] == doctest::Approx(8));   // mean(7,9)
    CHECK(pooled->val[5] == doctest::Approx(9));
    // gaps or overlaps are rejected
    CHECK_THROWS_AS(pool_to_words(x, {{0, 2}, {3, 2}}), ShapeError);
    CHECK_THROWS_AS(pool_to_words(x, {{0, 2}, {1, 4}}), ShapeError);
}

TEST_CASE("pool_to_words gradient splits evenly over the word's tokens") {
    auto x = ag::make_tensor({4, 1}, {1, 2, 3, 4}, true);
    auto pooled = pool_to_words(x, {{0, 3}, {3, 1}});
    auto loss = ag::sum_all(ag::mul(pooled, ag::constant({2, 1}, {6, 5})));
    ag::backward(loss);
    CHECK(x->grad[0] == doctest::Approx(2.0));
    CHECK(x->grad[1] == doctest::Approx(2.0));
    CHECK(x->grad[2] == doctest::Approx(2.0));
    CHECK(x->grad[3] == doctest::Approx(5.0));
}
