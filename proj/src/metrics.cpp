#include "dvfa/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>

namespace dvfa::metrics {

using nlohmann::json;

double boundary_mae_frames(const std::vector<codec::WordSpan>& predicted,
                           const std::vector<codec::WordSpan>& ground_truth) {
    if (predicted.size() != ground_truth.size())
        throw DataError("boundary_mae: word-count mismatch (" +
                        std::to_string(predicted.size()) + " vs " +
                        std::to_string(ground_truth.size()) + ")");
    if (predicted.empty()) throw DataError("boundary_mae: no words");
    double total = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        total += (std::abs(predicted[i].first - ground_truth[i].first) +
                  std::abs(predicted[i].last - ground_truth[i].last)) /
                 2.0;
    }
    return total / static_cast<double>(predicted.size());
}

double boundary_mae_ms(const std::vector<codec::WordSpan>& predicted,
                       const std::vector<codec::WordSpan>& ground_truth, int fps) {
    return codec::frames_to_ms(boundary_mae_frames(predicted, ground_truth), fps);
}

double frame_accuracy(const std::vector<int>& predicted, const std::vector<int>& ground_truth) {
    if (predicted.size() != ground_truth.size())
        throw DataError("frame_accuracy: length mismatch");
    if (predicted.empty()) throw DataError("frame_accuracy: empty sequences");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i)
        if (predicted[i] == ground_truth[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

namespace {

bool spans_overlap_half(const std::pair<int, int>& a, const std::pair<int, int>& b) {
    const int lo = std::max(a.first, b.first);
    const int hi = std::min(a.second, b.second);
    const int inter = std::max(0, hi - lo + 1);
    const int len_a = a.second - a.first + 1;
    const int len_b = b.second - b.first + 1;
    return inter * 2 >= std::min(len_a, len_b);
}

// A substitution carries both an addition and a deletion component.
bool has_addition(const codec::AnomalyRecord& r) {
    return r.kind == codec::AnomalyKind::Addition ||
           r.kind == codec::AnomalyKind::Substitution;
}
bool has_deletion(const codec::AnomalyRecord& r) {
    return r.kind == codec::AnomalyKind::Deletion ||
           r.kind == codec::AnomalyKind::Substitution;
}

}  // namespace

AnomalyAccuracy anomaly_accuracy(const std::vector<UtteranceAnomalies>& utterances) {
    if (utterances.empty()) throw DataError("anomaly_accuracy: no utterances");
    long word_hits = 0, word_total = 0;
    long add_hits = 0, del_hits = 0;
    for (const auto& u : utterances) {
        std::vector<bool> gt_add(static_cast<std::size_t>(u.n_words), false);
        std::vector<bool> det_add(static_cast<std::size_t>(u.n_words), false);
        bool gt_any_add = false, det_any_add = false;
        std::vector<std::pair<int, int>> gt_del, det_del;
        for (const auto& r : u.ground_truth) {
            if (has_addition(r) && r.word_index >= 0 && r.word_index < u.n_words) {
                gt_add[static_cast<std::size_t>(r.word_index)] = true;
                gt_any_add = true;
            }
            if (has_deletion(r)) gt_del.push_back(r.span);
        }
        for (const auto& r : u.detected) {
            if (has_addition(r) && r.word_index >= 0 && r.word_index < u.n_words) {
                det_add[static_cast<std::size_t>(r.word_index)] = true;
                det_any_add = true;
            }
            if (has_deletion(r)) det_del.push_back(r.span);
        }
        for (int i = 0; i < u.n_words; ++i)
            if (gt_add[static_cast<std::size_t>(i)] == det_add[static_cast<std::size_t>(i)])
                ++word_hits;
        word_total += u.n_words;
        if (gt_any_add == det_any_add) ++add_hits;
        bool del_correct;
        if (gt_del.empty()) {
            del_correct = det_del.empty();
        } else if (det_del.empty()) {
            del_correct = false;
        } else {
            del_correct = false;
            for (const auto& g : gt_del)
                for (const auto& d : det_del)
                    if (spans_overlap_half(g, d)) del_correct = true;
        }
        if (del_correct) ++del_hits;
    }
    AnomalyAccuracy acc;
    acc.addition_word =
        word_total > 0 ? static_cast<double>(word_hits) / static_cast<double>(word_total) : 1.0;
    acc.addition_sentence = static_cast<double>(add_hits) / static_cast<double>(utterances.size());
    acc.deletion_sentence = static_cast<double>(del_hits) / static_cast<double>(utterances.size());
    return acc;
}

std::string EvalReport::to_json() const {
    json j;
    j["format"] = "dvfa-eval-report";
    j["v"] = 1;
    j["mode"] = mode;
    j["mae_ms"] = mae_ms;
    j["mae_frames"] = mae_frames;
    j["frame_acc"] = frame_acc;
    j["n_utterances"] = n_utterances;
    j["n_words"] = n_words;
    j["n_frames"] = n_frames;
    j["config_hash"] = config_hash;
    j["seed"] = seed;
    if (has_anomaly) {
        j["addition_acc_word"] = anomaly.addition_word;
        j["addition_acc_sentence"] = anomaly.addition_sentence;
        j["deletion_acc_sentence"] = anomaly.deletion_sentence;
    }
    return j.dump(2);
}

EvalReport EvalReport::from_json(const std::string& text) {
    json j = json::parse(text);
    if (j.value("format", "") != "dvfa-eval-report")
        throw DataError("eval report: missing or wrong format tag");
    EvalReport r;
    r.mode = j.value("mode", "");
    r.mae_ms = j.at("mae_ms").get<double>();
    r.mae_frames = j.at("mae_frames").get<double>();
    r.frame_acc = j.at("frame_acc").get<double>();
    r.n_utterances = j.at("n_utterances").get<int>();
    r.n_words = j.at("n_words").get<int>();
    r.n_frames = j.at("n_frames").get<int>();
    r.config_hash = j.at("config_hash").get<std::uint64_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("addition_acc_word")) {
        r.has_anomaly = true;
        r.anomaly.addition_word = j.at("addition_acc_word").get<double>();
        r.anomaly.addition_sentence = j.at("addition_acc_sentence").get<double>();
        r.anomaly.deletion_sentence = j.at("deletion_acc_sentence").get<double>();
    }
    return r;
}

}  // namespace dvfa::metrics
