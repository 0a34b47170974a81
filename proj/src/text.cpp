#include "dvfa/text.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <map>
#include <unordered_map>

namespace dvfa::text {

using nlohmann::json;

void Transcript::check() const {
    if (words.empty()) throw DataError("transcript: empty");
    int next = 0;
    for (std::size_t i = 0; i < word_map.size(); ++i) {
        const auto& [start, count] = word_map[i];
        if (start != next || count < 1)
            throw DataError("transcript: word map must be contiguous and non-empty");
        next = start + count;
    }
    if (next != static_cast<int>(token_ids.size()))
        throw DataError("transcript: word map does not cover all tokens");
    if (word_map.size() != words.size())
        throw DataError("transcript: word map size != word count");
}

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(ch))));
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

Tokenizer Tokenizer::build(const std::vector<std::string>& corpus_words, int max_fragments) {
    std::map<std::string, int> char_set;
    std::map<std::string, int> multi;
    for (const auto& raw : corpus_words) {
        for (const auto& w : split_words(raw)) {
            for (std::size_t i = 0; i < w.size(); ++i) {
                char_set[w.substr(i, 1)]++;
                if (i + 2 <= w.size()) multi[w.substr(i, 2)]++;
                if (i + 3 <= w.size()) multi[w.substr(i, 3)]++;
            }
        }
    }
    if (char_set.empty()) throw DataError("tokenizer: empty corpus");
    Tokenizer tok;
    for (const auto& [c, n] : char_set) {
        (void)n;
        tok.fragments.push_back(c);
    }
    // Frequent bigrams/trigrams, frequency then lexicographic order.
    std::vector<std::pair<std::string, int>> ranked(multi.begin(), multi.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    for (const auto& [frag, n] : ranked) {
        (void)n;
        if (static_cast<int>(tok.fragments.size()) >= max_fragments) break;
        tok.fragments.push_back(frag);
    }
    return tok;
}

Transcript Tokenizer::tokenize(const std::string& input, TokenMode mode,
                               const corpus::Lexicon* lexicon) const {
    auto words = split_words(input);
    if (words.empty()) throw DataError("tokenize: empty text");
    Transcript t;
    t.mode = mode;
    if (mode == TokenMode::Phoneme) {
        if (lexicon == nullptr)
            throw DataError("tokenize: phoneme mode requires a lexicon");
        t.source_words = words;
        for (const auto& w : words) {
            const int wi = lexicon->word_index(w);
            if (wi < 0) throw DataError("tokenize: word '" + w + "' not in phoneme lexicon");
            const auto& seq = lexicon->visemes[static_cast<std::size_t>(wi)];
            t.phonemes_per_word.push_back(static_cast<int>(seq.size()));
            for (int v : seq) {
                t.word_map.emplace_back(static_cast<int>(t.token_ids.size()), 1);
                t.token_ids.push_back(v);
                t.words.push_back("V" + std::to_string(v));
            }
        }
        t.check();
        return t;
    }
    std::unordered_map<std::string, std::int64_t> index;
    std::size_t max_len = 0;
    for (std::size_t i = 0; i < fragments.size(); ++i) {
        index[fragments[i]] = static_cast<std::int64_t>(i);
        max_len = std::max(max_len, fragments[i].size());
    }
    t.source_words = words;
    for (const auto& w : words) {
        const int start = static_cast<int>(t.token_ids.size());
        std::size_t pos = 0;
        while (pos < w.size()) {
            std::size_t take = std::min(max_len, w.size() - pos);
            for (; take >= 1; --take) {
                auto it = index.find(w.substr(pos, take));
                if (it != index.end()) {
                    t.token_ids.push_back(it->second);
                    pos += take;
                    break;
                }
            }
            if (take == 0)
                throw DataError("tokenize: character '" + w.substr(pos, 1) +
                                "' not covered by the tokenizer inventory");
        }
        t.words.push_back(w);
        t.word_map.emplace_back(start, static_cast<int>(t.token_ids.size()) - start);
    }
    t.check();
    return t;
}

std::string Tokenizer::detokenize(const Transcript& t) const {
    std::string out;
    for (std::size_t i = 0; i < t.word_map.size(); ++i) {
        if (i) out.push_back(' ');
        if (t.mode == TokenMode::Phoneme) {
            out += t.words[i];
            continue;
        }
        const auto& [start, count] = t.word_map[i];
        for (int k = 0; k < count; ++k)
            out += fragments[static_cast<std::size_t>(
                t.token_ids[static_cast<std::size_t>(start + k)])];
    }
    return out;
}

std::string Tokenizer::to_json() const {
    json j;
    j["format"] = "dvfa-tokenizer";
    j["v"] = 1;
    j["fragments"] = fragments;
    j["viseme_count"] = viseme_count;
    return j.dump();
}

Tokenizer Tokenizer::from_json(const std::string& text) {
    json j = json::parse(text);
    if (j.value("format", "") != "dvfa-tokenizer")
        throw DataError("tokenizer: missing or wrong format tag");
    Tokenizer tok;
    tok.fragments = j.at("fragments").get<std::vector<std::string>>();
    tok.viseme_count = j.at("viseme_count").get<int>();
    return tok;
}

ag::TensorPtr pool_to_words(const ag::TensorPtr& subword_features,
                            const std::vector<std::pair<int, int>>& word_map) {
    const std::int64_t s_tok = subword_features->rows();
    int next = 0;
    for (const auto& [start, count] : word_map) {
        if (start != next || count < 1)
            throw ShapeError("pool_to_words: word map has a gap or empty range");
        next = start + count;
    }
    if (next != s_tok) throw ShapeError("pool_to_words: word map does not cover all rows");
    std::vector<ag::TensorPtr> rows;
    rows.reserve(word_map.size());
    for (const auto& [start, count] : word_map)
        rows.push_back(ag::mean_rows(ag::slice(subword_features, 0, start, count)));
    return ag::concat(rows, 0);
}

}  // namespace dvfa::text
