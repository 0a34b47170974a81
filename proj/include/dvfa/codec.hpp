#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dvfa/common.hpp"
#include "dvfa/corpus.hpp"

namespace dvfa::codec {

// Per-sentence frame-label convention: 0 = silence, 1..S = word positions
// of the (possibly perturbed) transcript, S+1 = deletion.
inline constexpr int kSilenceLabel = 0;
inline int deletion_label(int n_words) { return n_words + 1; }

// Physical layout of an utterance: time-ordered runs of frames, each
// belonging to one spoken word or to silence.
struct Segment {
    int word = -1;  // index of the spoken word, -1 for silence
    int frames = 0;
};

struct AlignmentTarget {
    int n_words = 0;  // S of the target transcript
    std::vector<int> frame_labels;
    // Per transcript word: first/last frame, absent for words with no
    // frames (addition errors).
    std::vector<std::optional<std::pair<int, int>>> word_spans;
};

struct PresenceTarget {
    std::vector<int> present;  // 1 = spoken, 0 = addition error
};

enum class AnomalyKind { Addition, Deletion, Substitution };

struct AnomalyRecord {
    AnomalyKind kind;
    int word_index = -1;                 // addition / substitution
    std::pair<int, int> span{-1, -1};    // deletion / substitution, frames
    bool ground_truth = false;
};

struct WordSpan {
    double first = 0;  // fractional frames for interpolated boundaries
    double last = 0;
    bool present = true;
};

struct DecodedAlignment {
    std::vector<int> labels;  // monotonic-repaired per-frame labels
    std::vector<WordSpan> words;
    std::vector<std::pair<int, int>> deletion_spans;
};

// Ground-truth label construction: label of word w repeated over its
// frames, silence frames 0, frames of deleted words S_out+1.
// position_of_word[i] is the 1-based transcript position of physical word
// i, or -1 when it was removed from the transcript.
AlignmentTarget encode_alignment(const std::vector<Segment>& segments,
                                 const std::vector<int>& position_of_word, int n_words_out);

// Convenience form for a clean utterance: one duration per word, optional
// silence segments already interleaved.
AlignmentTarget encode_alignment(const std::vector<int>& word_durations);

std::vector<Segment> utterance_segments(const corpus::Utterance& u);

// Argmax + minimum-edit monotonic repair + run-length extraction.
// posteriors is T x n_classes row-major with rows summing to 1; column 0
// is silence, 1..S word positions, and the *last* column deletion
// (columns S+1 .. n_classes-2, if any, are never selected). Words with no
// surviving run are flagged absent and interpolated from their neighbors.
DecodedAlignment decode_alignment(const std::vector<real>& posteriors, int n_frames,
                                  int n_classes, int n_words, int min_run = 2);

// Exhaustive reference for the monotonic repair (test oracle sizes only).
std::vector<int> monotonic_repair_brute_force(const std::vector<int>& raw,
                                              const std::vector<real>& posteriors, int n_classes,
                                              int n_words);

struct PerturbResult {
    std::vector<std::string> words;  // perturbed transcript
    AlignmentTarget target;
    PresenceTarget presence;
    std::vector<AnomalyRecord> records;
};

// Per word-slot sampling with mutually exclusive error types.
PerturbResult perturb_transcript(const corpus::Utterance& u, Rng& rng, real p_add, real p_del,
                                 real p_sub, const std::vector<std::string>& dictionary);

// TPP probabilities below the threshold become additions; decoded
// deletion spans become deletions; a co-located pair merges into one
// substitution record.
std::vector<AnomalyRecord> detect_anomalies(const DecodedAlignment& decoded,
                                            const std::vector<real>& presence_probs,
                                            real presence_threshold = real(0.5));

double frames_to_ms(double frame, int fps);

// Alignment output schema shared by the DVFA decoder and the CTC
// baseline; consumed by the SRT exporter.
struct AlignedWord {
    std::string word;
    double start_ms = 0;
    double end_ms = 0;
    double present_probability = 1;
    std::vector<std::string> flags;
};

struct AlignmentOutput {
    int fps = 25;
    std::vector<AlignedWord> words;
    std::vector<AnomalyRecord> anomalies;

    std::string to_json() const;
    static AlignmentOutput from_json(const std::string& text);
};

AlignmentOutput make_alignment_output(const std::vector<std::string>& words,
                                      const DecodedAlignment& decoded,
                                      const std::vector<real>& presence_probs,
                                      const std::vector<AnomalyRecord>& anomalies, int fps);

}  // namespace dvfa::codec
