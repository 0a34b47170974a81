#include "dvfa/corpus.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace dvfa::corpus {

namespace fs = std::filesystem;
using nlohmann::json;

int Lexicon::word_index(const std::string& w) const {
    for (std::size_t i = 0; i < words.size(); ++i)
        if (words[i] == w) return static_cast<int>(i);
    return -1;
}

std::string Lexicon::to_json() const {
    json j;
    j["format"] = "dvfa-lexicon";
    j["v"] = 1;
    j["words"] = words;
    j["visemes"] = visemes;
    j["viseme_count"] = viseme_count;
    j["feature_dim"] = feature_dim;
    j["homophene_prob"] = homophene_prob;
    j["prototypes"] = prototypes;
    return j.dump();
}

Lexicon Lexicon::from_json(const std::string& text) {
    json j = json::parse(text);
    if (j.value("format", "") != "dvfa-lexicon")
        throw DataError("lexicon file: missing or wrong format tag");
    Lexicon lex;
    lex.words = j.at("words").get<std::vector<std::string>>();
    lex.visemes = j.at("visemes").get<std::vector<std::vector<int>>>();
    lex.viseme_count = j.at("viseme_count").get<int>();
    lex.feature_dim = j.at("feature_dim").get<int>();
    lex.homophene_prob = j.at("homophene_prob").get<real>();
    lex.prototypes = j.at("prototypes").get<std::vector<real>>();
    return lex;
}

void Utterance::check() const {
    int dur = 0;
    for (int d : word_durations) dur += d;
    int sil = 0;
    for (const auto& s : silences) sil += s.frames;
    if (dur + sil != n_frames)
        throw DataError("utterance " + id + ": durations + silences != T");
    if (static_cast<int>(frame_labels.size()) != n_frames)
        throw DataError("utterance " + id + ": label length != T");
    int prev_end = -1;
    for (std::size_t i = 0; i < word_spans.size(); ++i) {
        const auto& [a, b] = word_spans[i];
        if (a <= prev_end || b < a)
            throw DataError("utterance " + id + ": word spans must be increasing");
        prev_end = b;
        for (int t = a; t <= b; ++t)
            if (frame_labels[static_cast<std::size_t>(t)] != static_cast<int>(i) + 1)
                throw DataError("utterance " + id + ": labels inconsistent with spans");
    }
}

void CorpusConfig::validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
        throw DataError("corpus config: field '" + field + "' " + why);
    };
    if (vocab_size < 2) fail("vocab_size", "must be >= 2");
    if (viseme_count < 2) fail("viseme_count", "must be >= 2");
    if (min_visemes < 1 || max_visemes < min_visemes) fail("min_visemes/max_visemes", "invalid range");
    if (feature_dim < 1) fail("feature_dim", "must be >= 1");
    if (min_words < 1 || max_words < min_words) fail("min_words/max_words", "invalid range");
    if (train_count < 1 || test_count < 1) fail("train_count/test_count", "must be >= 1");
    if (noise_sigma < 0) fail("noise_sigma", "must be >= 0");
    if (silence_prob < 0 || silence_prob > 1) fail("silence_prob", "must be in [0,1]");
    if (homophene_prob < 0 || homophene_prob > 1) fail("homophene_prob", "must be in [0,1]");
    if (fps < 1) fail("fps", "must be >= 1");
}

std::string CorpusConfig::to_json() const {
    json j;
    j["vocab_size"] = vocab_size;
    j["viseme_count"] = viseme_count;
    j["min_visemes"] = min_visemes;
    j["max_visemes"] = max_visemes;
    j["feature_dim"] = feature_dim;
    j["homophene_prob"] = homophene_prob;
    j["min_words"] = min_words;
    j["max_words"] = max_words;
    j["train_count"] = train_count;
    j["test_count"] = test_count;
    j["noise_sigma"] = noise_sigma;
    j["silence_prob"] = silence_prob;
    j["fps"] = fps;
    return j.dump();
}

CorpusConfig CorpusConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw DataError(std::string("corpus config: invalid JSON: ") + e.what());
    }
    CorpusConfig c;
    auto load = [&](const char* k, auto& field) {
        if (j.contains(k)) {
            try {
                field = j.at(k).get<std::decay_t<decltype(field)>>();
            } catch (const json::exception&) {
                throw DataError(std::string("corpus config: field '") + k + "' has wrong type");
            }
            j.erase(k);
        }
    };
    load("vocab_size", c.vocab_size);
    load("viseme_count", c.viseme_count);
    load("min_visemes", c.min_visemes);
    load("max_visemes", c.max_visemes);
    load("feature_dim", c.feature_dim);
    load("homophene_prob", c.homophene_prob);
    load("min_words", c.min_words);
    load("max_words", c.max_words);
    load("train_count", c.train_count);
    load("test_count", c.test_count);
    load("noise_sigma", c.noise_sigma);
    load("silence_prob", c.silence_prob);
    load("fps", c.fps);
    if (!j.empty())
        throw DataError("corpus config: unknown field '" + j.begin().key() + "'");
    c.validate();
    return c;
}

namespace {

// Spelling encodes the pronunciation — one letter per viseme — plus at least
// one silent letter drawn from outside the viseme range, so homophenes remain
// distinct strings. Mirrors the (loose) spelling/pronunciation coupling of
// real transcripts and keeps the text modality informative about the video.
std::string spelled_word(const std::vector<int>& seq, int viseme_count, Rng& rng,
                         std::set<std::string>& used) {
    std::string base;
    for (int v : seq) base.push_back(static_cast<char>('A' + v % 26));
    const int lo = viseme_count < 26 ? viseme_count : 0;
    std::uniform_int_distribution<int> ch(lo, 25);
    for (;;) {
        std::string w = base;
        w.push_back(static_cast<char>('A' + ch(rng)));
        while (w.size() < base.size() + 5 && used.count(w) != 0)
            w.push_back(static_cast<char>('A' + ch(rng)));
        if (used.insert(w).second) return w;
    }
}

std::vector<real> random_unit_vector(Rng& rng, int dim) {
    std::normal_distribution<real> dist(real(0), real(1));
    std::vector<real> v(static_cast<std::size_t>(dim));
    real norm = 0;
    do {
        norm = 0;
        for (auto& x : v) {
            x = dist(rng);
            norm += x * x;
        }
    } while (norm == 0);
    norm = std::sqrt(norm);
    for (auto& x : v) x /= norm;
    return v;
}

}  // namespace

Lexicon build_lexicon(std::uint64_t seed, int vocab_size, int viseme_count, int min_visemes,
                      int max_visemes, int feature_dim, real homophene_prob) {
    if (viseme_count < 2) throw DataError("build_lexicon: viseme_count must be >= 2");
    if (vocab_size < 2) throw DataError("build_lexicon: vocab_size must be >= 2");
    if (min_visemes < 1 || max_visemes < min_visemes)
        throw DataError("build_lexicon: invalid viseme length range");
    Rng rng = make_rng(seed);
    Lexicon lex;
    lex.viseme_count = viseme_count;
    lex.feature_dim = feature_dim;
    lex.homophene_prob = homophene_prob;
    lex.prototypes.reserve(static_cast<std::size_t>((viseme_count + 1) * feature_dim));
    for (int k = 0; k <= viseme_count; ++k) {
        auto v = random_unit_vector(rng, feature_dim);
        lex.prototypes.insert(lex.prototypes.end(), v.begin(), v.end());
    }
    std::set<std::string> used;
    std::uniform_int_distribution<int> len_dist(min_visemes, max_visemes);
    std::uniform_int_distribution<int> vis_dist(0, viseme_count - 1);
    std::uniform_real_distribution<real> unit(real(0), real(1));
    for (int w = 0; w < vocab_size; ++w) {
        std::vector<int> seq;
        // With probability homophene_prob reuse an earlier pronunciation, so
        // distinct words can share viseme sequences (homophenes).
        if (w > 0 && unit(rng) < homophene_prob) {
            std::uniform_int_distribution<int> pick(0, w - 1);
            seq = lex.visemes[static_cast<std::size_t>(pick(rng))];
        } else {
            const int len = len_dist(rng);
            seq.resize(static_cast<std::size_t>(len));
            for (auto& v : seq) v = vis_dist(rng);
        }
        lex.words.push_back(spelled_word(seq, viseme_count, rng, used));
        lex.visemes.push_back(std::move(seq));
    }
    return lex;
}

Utterance synth_utterance(const Lexicon& lex, const std::vector<std::string>& words, Rng& rng,
                          real noise_sigma, real silence_prob) {
    Utterance u;
    u.feature_dim = lex.feature_dim;
    std::uniform_int_distribution<int> dur_dist(1, 4);
    std::uniform_int_distribution<int> sil_dur(1, 3);
    std::uniform_real_distribution<real> unit(real(0), real(1));
    std::normal_distribution<real> noise(real(0), real(1));

    auto emit = [&](int viseme, int frames, int label) {
        const real* proto = lex.prototype(viseme);
        for (int f = 0; f < frames; ++f) {
            for (int c = 0; c < lex.feature_dim; ++c)
                u.features.push_back(proto[c] + (noise_sigma > 0 ? noise_sigma * noise(rng)
                                                                 : real(0)));
            u.frame_labels.push_back(label);
        }
        u.n_frames += frames;
    };
    auto maybe_silence = [&]() {
        if (unit(rng) < silence_prob) {
            const int frames = sil_dur(rng);
            u.silences.push_back({u.n_frames, frames});
            emit(lex.viseme_count, frames, 0);
        }
    };

    maybe_silence();
    for (std::size_t i = 0; i < words.size(); ++i) {
        const int w = lex.word_index(words[i]);
        if (w < 0) throw DataError("synth_utterance: unknown word '" + words[i] + "'");
        u.words.push_back(words[i]);
        const int first = u.n_frames;
        std::vector<int> vdur;
        for (int viseme : lex.visemes[static_cast<std::size_t>(w)]) {
            const int frames = dur_dist(rng);
            vdur.push_back(frames);
            emit(viseme, frames, static_cast<int>(i) + 1);
        }
        u.word_spans.emplace_back(first, u.n_frames - 1);
        int total = 0;
        for (int d : vdur) total += d;
        u.word_durations.push_back(total);
        u.viseme_durations.push_back(std::move(vdur));
        maybe_silence();
    }
    u.check();
    return u;
}

std::string utterance_to_json(const Utterance& u) {
    json j;
    j["v"] = 1;
    j["id"] = u.id;
    j["T"] = u.n_frames;
    j["S"] = static_cast<int>(u.words.size());
    j["d_in"] = u.feature_dim;
    j["words"] = u.words;
    j["viseme_durations"] = u.viseme_durations;
    json sil = json::array();
    for (const auto& s : u.silences) sil.push_back({s.start, s.frames});
    j["silences"] = sil;
    j["features"] = u.features;
    j["labels"] = u.frame_labels;
    return j.dump();
}

Utterance utterance_from_json(const std::string& line) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::exception& e) {
        throw DataError(std::string("utterance record: invalid JSON: ") + e.what());
    }
    if (j.value("v", 0) != 1) throw DataError("utterance record: unsupported version");
    Utterance u;
    u.id = j.at("id").get<std::string>();
    u.n_frames = j.at("T").get<int>();
    u.feature_dim = j.at("d_in").get<int>();
    u.words = j.at("words").get<std::vector<std::string>>();
    u.viseme_durations = j.at("viseme_durations").get<std::vector<std::vector<int>>>();
    for (const auto& s : j.at("silences")) u.silences.push_back({s.at(0).get<int>(), s.at(1).get<int>()});
    u.features = j.at("features").get<std::vector<real>>();
    u.frame_labels = j.at("labels").get<std::vector<int>>();
    for (const auto& vd : u.viseme_durations) {
        int total = 0;
        for (int d : vd) total += d;
        u.word_durations.push_back(total);
    }
    // Rebuild spans from labels.
    for (std::size_t i = 0; i < u.words.size(); ++i) {
        int first = -1, last = -1;
        for (int t = 0; t < u.n_frames; ++t)
            if (u.frame_labels[static_cast<std::size_t>(t)] == static_cast<int>(i) + 1) {
                if (first < 0) first = t;
                last = t;
            }
        u.word_spans.emplace_back(first, last);
    }
    u.check();
    return u;
}

void gen_corpus(const CorpusConfig& config, std::uint64_t seed, const std::string& out_dir,
                bool force) {
    config.validate();
    fs::path dir(out_dir);
    if (fs::exists(dir / "manifest.json") && !force)
        throw DataError("gen_corpus: output '" + out_dir + "' already exists (use --force)");
    fs::create_directories(dir);

    Lexicon lex = build_lexicon(derive_seed(seed, 0), config.vocab_size, config.viseme_count,
                                config.min_visemes, config.max_visemes, config.feature_dim,
                                config.homophene_prob);
    {
        std::ofstream f(dir / "lexicon.json");
        f << lex.to_json() << "\n";
    }

    auto write_split = [&](const std::string& name, int count, std::uint64_t stream_base) {
        std::ofstream f(dir / (name + ".jsonl"));
        for (int i = 0; i < count; ++i) {
            Rng rng = make_rng(derive_seed(seed, stream_base + static_cast<std::uint64_t>(i)));
            std::uniform_int_distribution<int> n_words(config.min_words, config.max_words);
            std::uniform_int_distribution<int> pick(0, config.vocab_size - 1);
            const int s = n_words(rng);
            std::vector<std::string> words;
            for (int w = 0; w < s; ++w)
                words.push_back(lex.words[static_cast<std::size_t>(pick(rng))]);
            Utterance u =
                synth_utterance(lex, words, rng, config.noise_sigma, config.silence_prob);
            std::ostringstream id;
            id << name << "_" << i;
            u.id = id.str();
            f << utterance_to_json(u) << "\n";
        }
    };
    write_split("train", config.train_count, 1000000);
    write_split("test", config.test_count, 2000000);

    const std::string cfg_json = config.to_json();
    json manifest;
    manifest["format"] = "dvfa-corpus";
    manifest["v"] = 1;
    manifest["seed"] = seed;
    manifest["config"] = json::parse(cfg_json);
    manifest["config_hash"] = fnv1a(cfg_json);
    manifest["train_count"] = config.train_count;
    manifest["test_count"] = config.test_count;
    std::ofstream mf(dir / "manifest.json");
    mf << manifest.dump(2) << "\n";
}

std::vector<Utterance> load_jsonl(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open dataset file '" + path + "'");
    std::vector<Utterance> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        out.push_back(utterance_from_json(line));
    }
    if (out.empty()) throw DataError("dataset file '" + path + "' is empty");
    return out;
}

Lexicon load_lexicon(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open lexicon file '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return Lexicon::from_json(ss.str());
}

}  // namespace dvfa::corpus
