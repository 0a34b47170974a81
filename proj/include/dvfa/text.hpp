#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dvfa/corpus.hpp"
#include "dvfa/tensor.hpp"

namespace dvfa::text {

enum class TokenMode { Word, Phoneme };

struct Transcript {
    std::vector<std::string> words;  // alignment units (words, or phoneme symbols)
    std::vector<std::int64_t> token_ids;
    std::vector<std::pair<int, int>> word_map;  // per word: (first token, count)
    TokenMode mode = TokenMode::Word;
    // Phoneme mode keeps the original words and how many phonemes each
    // expands to, so targets can be rebuilt at phoneme granularity.
    std::vector<std::string> source_words;
    std::vector<int> phonemes_per_word;

    int n_words() const { return static_cast<int>(words.size()); }
    void check() const;
};

// Deterministic subword tokenizer: greedy longest-match over a fixed
// fragment inventory counted from the training corpus. Single characters
// are always present, so any word over the corpus alphabet tokenizes.
struct Tokenizer {
    std::vector<std::string> fragments;
    int viseme_count = 0;  // phoneme-mode inventory size

    static Tokenizer build(const std::vector<std::string>& corpus_words, int max_fragments = 96);

    std::int64_t vocab_size(TokenMode mode) const {
        return mode == TokenMode::Word ? static_cast<std::int64_t>(fragments.size())
                                       : viseme_count;
    }

    Transcript tokenize(const std::string& text, TokenMode mode,
                        const corpus::Lexicon* lexicon = nullptr) const;
    std::string detokenize(const Transcript& t) const;

    std::string to_json() const;
    static Tokenizer from_json(const std::string& text);
};

std::vector<std::string> split_words(const std::string& text);  // uppercased

// Row i of the result is the arithmetic mean of word i's subword rows.
ag::TensorPtr pool_to_words(const ag::TensorPtr& subword_features,
                            const std::vector<std::pair<int, int>>& word_map);

}  // namespace dvfa::text
