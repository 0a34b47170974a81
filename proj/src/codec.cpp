#include "dvfa/codec.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

namespace dvfa::codec {

using nlohmann::json;

namespace {

const char* kind_name(AnomalyKind k) {
    switch (k) {
        case AnomalyKind::Addition: return "addition";
        case AnomalyKind::Deletion: return "deletion";
        case AnomalyKind::Substitution: return "substitution";
    }
    return "?";
}

AnomalyKind kind_from_name(const std::string& s) {
    if (s == "addition") return AnomalyKind::Addition;
    if (s == "deletion") return AnomalyKind::Deletion;
    if (s == "substitution") return AnomalyKind::Substitution;
    throw DataError("unknown anomaly kind '" + s + "'");
}

}  // namespace

AlignmentTarget encode_alignment(const std::vector<Segment>& segments,
                                 const std::vector<int>& position_of_word, int n_words_out) {
    AlignmentTarget target;
    target.n_words = n_words_out;
    target.word_spans.assign(static_cast<std::size_t>(n_words_out), std::nullopt);
    const int del = deletion_label(n_words_out);
    int prev_pos = 0;
    std::vector<bool> seen(position_of_word.size(), false);
    for (const auto& seg : segments) {
        if (seg.frames < 1) throw DataError("encode_alignment: segment with no frames");
        int label = kSilenceLabel;
        if (seg.word >= 0) {
            if (seg.word >= static_cast<int>(position_of_word.size()))
                throw DataError("encode_alignment: segment references unknown word");
            if (seen[static_cast<std::size_t>(seg.word)])
                throw DataError("encode_alignment: overlapping segments for one word");
            seen[static_cast<std::size_t>(seg.word)] = true;
            const int pos = position_of_word[static_cast<std::size_t>(seg.word)];
            if (pos < 0) {
                label = del;
            } else {
                if (pos <= prev_pos)
                    throw DataError("encode_alignment: word positions must be increasing");
                if (pos > n_words_out)
                    throw DataError("encode_alignment: position exceeds transcript length");
                prev_pos = pos;
                label = pos;
                const int first = static_cast<int>(target.frame_labels.size());
                target.word_spans[static_cast<std::size_t>(pos - 1)] = {first,
                                                                        first + seg.frames - 1};
            }
        }
        target.frame_labels.insert(target.frame_labels.end(), static_cast<std::size_t>(seg.frames),
                                   label);
    }
    return target;
}

AlignmentTarget encode_alignment(const std::vector<int>& word_durations) {
    std::vector<Segment> segments;
    std::vector<int> positions;
    for (std::size_t i = 0; i < word_durations.size(); ++i) {
        segments.push_back({static_cast<int>(i), word_durations[i]});
        positions.push_back(static_cast<int>(i) + 1);
    }
    return encode_alignment(segments, positions, static_cast<int>(word_durations.size()));
}

std::vector<Segment> utterance_segments(const corpus::Utterance& u) {
    std::vector<Segment> segs;
    for (int t = 0; t < u.n_frames; ++t) {
        const int w = u.frame_labels[static_cast<std::size_t>(t)] - 1;  // -1 = silence
        if (!segs.empty() && segs.back().word == w)
            ++segs.back().frames;
        else
            segs.push_back({w, 1});
    }
    return segs;
}

namespace {

// Label space of the repair: 0 silence, 1..S positions, S+1 deletion.
// Column of a label inside the posterior matrix (deletion lives in the
// last column regardless of n_classes).
inline int label_column(int label, int n_words, int n_classes) {
    return label == n_words + 1 ? n_classes - 1 : label;
}

std::vector<int> raw_argmax(const std::vector<real>& post, int n_frames, int n_classes,
                            int n_words) {
    std::vector<int> raw(static_cast<std::size_t>(n_frames));
    for (int t = 0; t < n_frames; ++t) {
        int best = 0;
        real bv = -std::numeric_limits<real>::infinity();
        for (int l = 0; l <= n_words + 1; ++l) {
            const int c = label_column(l, n_words, n_classes);
            const real v = post[static_cast<std::size_t>(t * n_classes + c)];
            if (v > bv) {
                bv = v;
                best = l;
            }
        }
        raw[static_cast<std::size_t>(t)] = best;
    }
    return raw;
}

struct RepairCell {
    int cost = 0;
    double score = 0;
};

// Minimum-edit non-decreasing relabeling. Ties on edit count are broken
// by higher total log-posterior, then by the lexicographically smallest
// label sequence.
std::vector<int> monotonic_repair(const std::vector<int>& raw, const std::vector<real>& post,
                                  int n_frames, int n_classes, int n_words) {
    const int S = n_words;
    auto lp = [&](int t, int label) {
        const int c = label_column(label, S, n_classes);
        return std::log(std::max<double>(post[static_cast<std::size_t>(t * n_classes + c)],
                                         1e-12));
    };
    // best[t][p-1]: frames t..T-1, next word label must be >= p.
    const int np = std::max(S, 1);
    std::vector<std::vector<RepairCell>> best(static_cast<std::size_t>(n_frames + 1),
                                              std::vector<RepairCell>(static_cast<std::size_t>(np)));
    for (int t = n_frames - 1; t >= 0; --t) {
        for (int p = 1; p <= np; ++p) {
            bool first = true;
            RepairCell acc;
            auto consider = [&](int label, int next_p) {
                RepairCell cand = best[static_cast<std::size_t>(t + 1)]
                                      [static_cast<std::size_t>(next_p - 1)];
                cand.cost += raw[static_cast<std::size_t>(t)] != label ? 1 : 0;
                cand.score += lp(t, label);
                if (first || cand.cost < acc.cost ||
                    (cand.cost == acc.cost && cand.score > acc.score)) {
                    acc = cand;
                    first = false;
                }
            };
            consider(kSilenceLabel, p);
            for (int w = p; w <= S; ++w) consider(w, w);
            consider(S + 1, p);
            best[static_cast<std::size_t>(t)][static_cast<std::size_t>(p - 1)] = acc;
        }
    }
    // Greedy front-to-back reconstruction keeps the lexicographically
    // smallest optimum.
    std::vector<int> out(static_cast<std::size_t>(n_frames));
    int p = 1;
    for (int t = 0; t < n_frames; ++t) {
        const RepairCell target = best[static_cast<std::size_t>(t)][static_cast<std::size_t>(p - 1)];
        int chosen = -1, chosen_p = p;
        auto matches = [&](int label, int next_p) {
            RepairCell cand = best[static_cast<std::size_t>(t + 1)]
                                  [static_cast<std::size_t>(next_p - 1)];
            cand.cost += raw[static_cast<std::size_t>(t)] != label ? 1 : 0;
            cand.score += lp(t, label);
            return cand.cost == target.cost && cand.score == target.score;
        };
        if (matches(kSilenceLabel, p)) {
            chosen = kSilenceLabel;
        } else {
            for (int w = p; w <= S && chosen < 0; ++w)
                if (matches(w, w)) {
                    chosen = w;
                    chosen_p = w;
                }
            if (chosen < 0 && matches(S + 1, p)) chosen = S + 1;
        }
        if (chosen < 0) throw ModelError("monotonic repair: reconstruction failed");
        out[static_cast<std::size_t>(t)] = chosen;
        p = chosen_p;
    }
    return out;
}

}  // namespace

std::vector<int> monotonic_repair_brute_force(const std::vector<int>& raw,
                                              const std::vector<real>& posteriors, int n_classes,
                                              int n_words) {
    const int T = static_cast<int>(raw.size());
    const int S = n_words;
    auto lp = [&](int t, int label) {
        const int c = label_column(label, S, n_classes);
        return std::log(std::max<double>(posteriors[static_cast<std::size_t>(t * n_classes + c)],
                                         1e-12));
    };
    std::vector<int> current(static_cast<std::size_t>(T));
    std::vector<int> best;
    int best_cost = std::numeric_limits<int>::max();
    double best_score = 0;
    std::function<void(int, int, int, double)> rec = [&](int t, int p, int cost, double score) {
        if (cost > best_cost) return;
        if (t == T) {
            if (cost < best_cost || (cost == best_cost && score > best_score) ||
                (cost == best_cost && score == best_score &&
                 (best.empty() || current < best))) {
                best = current;
                best_cost = cost;
                best_score = score;
            }
            return;
        }
        auto step = [&](int label, int next_p) {
            current[static_cast<std::size_t>(t)] = label;
            rec(t + 1, next_p, cost + (raw[static_cast<std::size_t>(t)] != label ? 1 : 0),
                score + lp(t, label));
        };
        step(kSilenceLabel, p);
        for (int w = p; w <= S; ++w) step(w, w);
        step(S + 1, p);
    };
    rec(0, 1, 0, 0);
    return best;
}

DecodedAlignment decode_alignment(const std::vector<real>& posteriors, int n_frames,
                                  int n_classes, int n_words, int min_run) {
    if (n_frames < 1) throw ShapeError("decode_alignment: no frames");
    if (n_classes < n_words + 2)
        throw ShapeError("decode_alignment: need at least S+2 classes");
    if (static_cast<int>(posteriors.size()) != n_frames * n_classes)
        throw ShapeError("decode_alignment: posterior size mismatch");

    DecodedAlignment out;
    auto raw = raw_argmax(posteriors, n_frames, n_classes, n_words);
    out.labels = monotonic_repair(raw, posteriors, n_frames, n_classes, n_words);

    out.words.assign(static_cast<std::size_t>(n_words), WordSpan{});
    std::vector<bool> found(static_cast<std::size_t>(n_words), false);
    const int del = n_words + 1;
    int run_start = 0;
    for (int t = 0; t <= n_frames; ++t) {
        if (t < n_frames && out.labels[static_cast<std::size_t>(t)] ==
                                out.labels[static_cast<std::size_t>(run_start)])
            continue;
        const int label = out.labels[static_cast<std::size_t>(run_start)];
        const int len = t - run_start;
        if (label >= 1 && label <= n_words) {
            out.words[static_cast<std::size_t>(label - 1)] =
                WordSpan{static_cast<double>(run_start), static_cast<double>(t - 1), true};
            found[static_cast<std::size_t>(label - 1)] = true;
        } else if (label == del && len >= min_run) {
            out.deletion_spans.emplace_back(run_start, t - 1);
        }
        run_start = t;
    }

    // Absent words: interpolate evenly inside the gap left by present
    // neighbours (fractional frame boundaries).
    int i = 0;
    while (i < n_words) {
        if (found[static_cast<std::size_t>(i)]) {
            ++i;
            continue;
        }
        int j = i;
        while (j < n_words && !found[static_cast<std::size_t>(j)]) ++j;
        const double lo = i > 0 ? out.words[static_cast<std::size_t>(i - 1)].last + 1 : 0;
        const double hi =
            j < n_words ? out.words[static_cast<std::size_t>(j)].first - 1 : n_frames - 1;
        const int k = j - i;
        const double len = hi - lo + 1;
        for (int w = i; w < j; ++w) {
            WordSpan span;
            span.present = false;
            if (len <= 0) {
                span.first = span.last = lo - 0.5;
            } else {
                span.first = lo + static_cast<double>(w - i) * len / k;
                span.last = std::max(span.first, lo + static_cast<double>(w - i + 1) * len / k - 1);
            }
            out.words[static_cast<std::size_t>(w)] = span;
        }
        i = j;
    }
    return out;
}

PerturbResult perturb_transcript(const corpus::Utterance& u, Rng& rng, real p_add, real p_del,
                                 real p_sub, const std::vector<std::string>& dictionary) {
    if (p_add < 0 || p_del < 0 || p_sub < 0 || p_add + p_del + p_sub > 1)
        throw DataError("perturb_transcript: probabilities must be in [0,1] and sum <= 1");
    if (dictionary.empty() && (p_add > 0 || p_sub > 0))
        throw DataError("perturb_transcript: empty dictionary");

    std::uniform_real_distribution<real> unit(real(0), real(1));
    enum class Slot { None, Add, Del, Sub };
    const int s_orig = static_cast<int>(u.words.size());
    std::vector<Slot> slot(static_cast<std::size_t>(s_orig), Slot::None);
    bool any = false;
    for (auto& s : slot) {
        const real x = unit(rng);
        if (x < p_add)
            s = Slot::Add;
        else if (x < p_add + p_del)
            s = Slot::Del;
        else if (x < p_add + p_del + p_sub)
            s = Slot::Sub;
        if (s != Slot::None) any = true;
    }

    auto pick_word = [&](const std::string& avoid) {
        std::uniform_int_distribution<std::size_t> dist(0, dictionary.size() - 1);
        for (int tries = 0; tries < 64; ++tries) {
            const auto& w = dictionary[dist(rng)];
            if (w != avoid) return w;
        }
        return dictionary[dist(rng)];
    };

    PerturbResult res;
    std::vector<int> position(static_cast<std::size_t>(s_orig), -1);
    if (any) {
        for (int i = 0; i < s_orig; ++i) {
            switch (slot[static_cast<std::size_t>(i)]) {
                case Slot::Del: {
                    AnomalyRecord rec;
                    rec.kind = AnomalyKind::Deletion;
                    rec.span = u.word_spans[static_cast<std::size_t>(i)];
                    rec.ground_truth = true;
                    res.records.push_back(rec);
                    break;
                }
                case Slot::Sub: {
                    res.words.push_back(pick_word(u.words[static_cast<std::size_t>(i)]));
                    res.presence.present.push_back(0);
                    AnomalyRecord rec;
                    rec.kind = AnomalyKind::Substitution;
                    rec.word_index = static_cast<int>(res.words.size()) - 1;
                    rec.span = u.word_spans[static_cast<std::size_t>(i)];
                    rec.ground_truth = true;
                    res.records.push_back(rec);
                    break;
                }
                case Slot::None:
                case Slot::Add:
                    res.words.push_back(u.words[static_cast<std::size_t>(i)]);
                    res.presence.present.push_back(1);
                    position[static_cast<std::size_t>(i)] =
                        static_cast<int>(res.words.size());
                    break;
            }
            if (slot[static_cast<std::size_t>(i)] == Slot::Add) {
                res.words.push_back(pick_word(""));
                res.presence.present.push_back(0);
                AnomalyRecord rec;
                rec.kind = AnomalyKind::Addition;
                rec.word_index = static_cast<int>(res.words.size()) - 1;
                rec.ground_truth = true;
                res.records.push_back(rec);
            }
        }
    }
    if (res.words.empty()) {
        // Identity fallback; also covers the degenerate everything-deleted
        // draw, which would leave no transcript to align.
        res.words = u.words;
        res.presence.present.assign(u.words.size(), 1);
        res.records.clear();
        for (int i = 0; i < s_orig; ++i) position[static_cast<std::size_t>(i)] = i + 1;
    }
    res.target = encode_alignment(utterance_segments(u), position,
                                  static_cast<int>(res.words.size()));
    return res;
}

std::vector<AnomalyRecord> detect_anomalies(const DecodedAlignment& decoded,
                                            const std::vector<real>& presence_probs,
                                            real presence_threshold) {
    std::vector<int> additions;
    for (std::size_t i = 0; i < presence_probs.size(); ++i)
        if (presence_probs[i] < presence_threshold) additions.push_back(static_cast<int>(i));
    std::vector<std::pair<int, int>> deletions = decoded.deletion_spans;

    std::vector<AnomalyRecord> out;
    std::vector<bool> del_used(deletions.size(), false);
    for (int widx : additions) {
        const auto& span = decoded.words[static_cast<std::size_t>(widx)];
        bool merged = false;
        for (std::size_t d = 0; d < deletions.size(); ++d) {
            if (del_used[d]) continue;
            // Adjacent or overlapping (within one frame) counts as the same
            // temporal location.
            const double lo = span.first - 1, hi = span.last + 1;
            if (static_cast<double>(deletions[d].second) >= lo &&
                static_cast<double>(deletions[d].first) <= hi) {
                AnomalyRecord rec;
                rec.kind = AnomalyKind::Substitution;
                rec.word_index = widx;
                rec.span = deletions[d];
                out.push_back(rec);
                del_used[d] = true;
                merged = true;
                break;
            }
        }
        if (!merged) {
            AnomalyRecord rec;
            rec.kind = AnomalyKind::Addition;
            rec.word_index = widx;
            out.push_back(rec);
        }
    }
    for (std::size_t d = 0; d < deletions.size(); ++d) {
        if (del_used[d]) continue;
        AnomalyRecord rec;
        rec.kind = AnomalyKind::Deletion;
        rec.span = deletions[d];
        out.push_back(rec);
    }
    return out;
}

double frames_to_ms(double frame, int fps) {
    if (fps <= 0) throw DataError("frames_to_ms: fps must be positive");
    return frame * 1000.0 / fps;
}

std::string AlignmentOutput::to_json() const {
    json j;
    j["format"] = "dvfa-alignment";
    j["v"] = 1;
    j["fps"] = fps;
    json ws = json::array();
    for (const auto& w : words) {
        json e;
        e["word"] = w.word;
        e["start_ms"] = w.start_ms;
        e["end_ms"] = w.end_ms;
        e["present_probability"] = w.present_probability;
        e["flags"] = w.flags;
        ws.push_back(e);
    }
    j["words"] = ws;
    json an = json::array();
    for (const auto& a : anomalies) {
        json e;
        e["kind"] = kind_name(a.kind);
        e["word_index"] = a.word_index;
        e["span"] = {a.span.first, a.span.second};
        an.push_back(e);
    }
    j["anomalies"] = an;
    return j.dump(2);
}

AlignmentOutput AlignmentOutput::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw DataError(std::string("alignment output: invalid JSON: ") + e.what());
    }
    if (j.value("format", "") != "dvfa-alignment")
        throw DataError("alignment output: missing or wrong format tag");
    AlignmentOutput out;
    out.fps = j.at("fps").get<int>();
    for (const auto& e : j.at("words")) {
        AlignedWord w;
        w.word = e.at("word").get<std::string>();
        w.start_ms = e.at("start_ms").get<double>();
        w.end_ms = e.at("end_ms").get<double>();
        w.present_probability = e.at("present_probability").get<double>();
        w.flags = e.at("flags").get<std::vector<std::string>>();
        out.words.push_back(w);
    }
    for (const auto& e : j.at("anomalies")) {
        AnomalyRecord a;
        a.kind = kind_from_name(e.at("kind").get<std::string>());
        a.word_index = e.at("word_index").get<int>();
        a.span = {e.at("span").at(0).get<int>(), e.at("span").at(1).get<int>()};
        out.anomalies.push_back(a);
    }
    return out;
}

AlignmentOutput make_alignment_output(const std::vector<std::string>& words,
                                      const DecodedAlignment& decoded,
                                      const std::vector<real>& presence_probs,
                                      const std::vector<AnomalyRecord>& anomalies, int fps) {
    AlignmentOutput out;
    out.fps = fps;
    for (std::size_t i = 0; i < words.size(); ++i) {
        AlignedWord w;
        w.word = words[i];
        const auto& span = decoded.words[i];
        w.start_ms = frames_to_ms(span.first, fps);
        w.end_ms = frames_to_ms(span.last + 1, fps);  // end of the last frame
        w.present_probability =
            i < presence_probs.size() ? static_cast<double>(presence_probs[i]) : 1.0;
        if (!span.present) w.flags.push_back("absent");
        for (const auto& a : anomalies) {
            if (a.word_index != static_cast<int>(i)) continue;
            if (a.kind == AnomalyKind::Addition) w.flags.push_back("addition");
            if (a.kind == AnomalyKind::Substitution) w.flags.push_back("substitution");
        }
        out.words.push_back(w);
    }
    out.anomalies = anomalies;
    return out;
}

}  // namespace dvfa::codec
