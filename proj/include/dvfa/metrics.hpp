#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dvfa/codec.hpp"

namespace dvfa::metrics {

// Mean over all words of (|left error| + |right error|) / 2, in ms.
// Boundaries are fractional frame indices; absent predictions must
// already be interpolated.
double boundary_mae_ms(const std::vector<codec::WordSpan>& predicted,
                       const std::vector<codec::WordSpan>& ground_truth, int fps);
double boundary_mae_frames(const std::vector<codec::WordSpan>& predicted,
                           const std::vector<codec::WordSpan>& ground_truth);

double frame_accuracy(const std::vector<int>& predicted, const std::vector<int>& ground_truth);

struct UtteranceAnomalies {
    int n_words = 0;  // words in the (perturbed) transcript
    std::vector<codec::AnomalyRecord> ground_truth;
    std::vector<codec::AnomalyRecord> detected;
};

struct AnomalyAccuracy {
    double addition_word = 0;      // per word-slot presence decisions
    double addition_sentence = 0;  // per-utterance any/none decision
    double deletion_sentence = 0;  // per-utterance, >=50% span overlap when both present
};

AnomalyAccuracy anomaly_accuracy(const std::vector<UtteranceAnomalies>& utterances);

struct EvalReport {
    double mae_ms = 0;
    double mae_frames = 0;
    double frame_acc = 0;
    AnomalyAccuracy anomaly;
    bool has_anomaly = false;
    int n_utterances = 0;
    int n_words = 0;
    int n_frames = 0;
    std::uint64_t config_hash = 0;
    std::uint64_t seed = 0;
    std::string mode;

    std::string to_json() const;
    static EvalReport from_json(const std::string& text);
};

}  // namespace dvfa::metrics
