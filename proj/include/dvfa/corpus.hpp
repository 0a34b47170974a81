#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dvfa/common.hpp"

namespace dvfa::corpus {

// Word inventory with per-word viseme pronunciations and the prototype
// feature vector for every viseme (index K is the silence prototype).
struct Lexicon {
    std::vector<std::string> words;
    std::vector<std::vector<int>> visemes;  // per word, indices < viseme_count
    int viseme_count = 0;
    int feature_dim = 0;
    real homophene_prob = 0;
    std::vector<real> prototypes;  // (viseme_count + 1) x feature_dim, unit rows

    int word_index(const std::string& w) const;  // -1 if unknown
    const real* prototype(int viseme) const {
        return prototypes.data() + static_cast<std::size_t>(viseme) * feature_dim;
    }
    const real* silence_prototype() const { return prototype(viseme_count); }

    std::string to_json() const;
    static Lexicon from_json(const std::string& text);
};

struct SilenceSpan {
    int start = 0;  // first frame, 0-based
    int frames = 0;
};

struct Utterance {
    std::string id;
    std::vector<std::string> words;
    std::vector<std::vector<int>> viseme_durations;  // frames per viseme, per word
    std::vector<int> word_durations;                 // sum over visemes
    std::vector<SilenceSpan> silences;
    std::vector<real> features;  // T x feature_dim
    std::vector<int> frame_labels;  // 0 = silence, i+1 = word i
    std::vector<std::pair<int, int>> word_spans;  // first/last frame, inclusive
    int n_frames = 0;
    int feature_dim = 0;

    void check() const;  // structural invariants
};

struct CorpusConfig {
    int vocab_size = 30;
    int viseme_count = 10;
    int min_visemes = 2;
    int max_visemes = 5;
    int feature_dim = 16;
    real homophene_prob = real(0.05);
    int min_words = 3;
    int max_words = 8;
    int train_count = 2000;
    int test_count = 200;
    real noise_sigma = real(0.3);
    real silence_prob = real(0.3);
    int fps = 25;

    std::string to_json() const;
    static CorpusConfig from_json(const std::string& text);
    void validate() const;
};

Lexicon build_lexicon(std::uint64_t seed, int vocab_size, int viseme_count, int min_visemes,
                      int max_visemes, int feature_dim, real homophene_prob = real(0.05));

Utterance synth_utterance(const Lexicon& lex, const std::vector<std::string>& words, Rng& rng,
                          real noise_sigma, real silence_prob);

// Writes train.jsonl / test.jsonl / lexicon.json / manifest.json.
void gen_corpus(const CorpusConfig& config, std::uint64_t seed, const std::string& out_dir,
                bool force);

std::string utterance_to_json(const Utterance& u);
Utterance utterance_from_json(const std::string& line);

std::vector<Utterance> load_jsonl(const std::string& path);
Lexicon load_lexicon(const std::string& path);

}  // namespace dvfa::corpus
