#include "dvfa/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "dvfa/checkpoint.hpp"

namespace dvfa::train {

using nlohmann::json;

namespace {

// Disjoint stream offsets for derive_seed so the independent RNG uses
// can never collide.
constexpr std::uint64_t kStreamShuffle = 0x100000000ull;
constexpr std::uint64_t kStreamPerturb = 0x200000000ull;
constexpr std::uint64_t kStreamEval = 0x300000000ull;

std::string join_words(const std::vector<std::string>& words) {
    std::string out;
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i) out += ' ';
        out += words[i];
    }
    return out;
}

std::string mode_name(model::TargetMode m) {
    return m == model::TargetMode::Position ? "position" : "word";
}

}  // namespace

TrainConfig TrainConfig::desk() { return TrainConfig{}; }

TrainConfig TrainConfig::paper() {
    TrainConfig c;
    c.preset = "paper";
    c.lr = real(1e-4);
    c.batch_size = 32;
    c.epochs = 50;
    return c;
}

void TrainConfig::validate() const {
    if (epochs < 1) throw DataError("train config: epochs must be >= 1");
    if (batch_size < 1) throw DataError("train config: batch_size must be >= 1");
    if (!(lr > 0)) throw DataError("train config: lr must be positive");
    if (p_add < 0 || p_del < 0 || p_sub < 0 || p_add + p_del + p_sub > 1)
        throw DataError("train config: perturbation rates must be >= 0 and sum to <= 1");
    if (feature_noise < 0) throw DataError("train config: feature_noise must be >= 0");
    if (patience < 1) throw DataError("train config: patience must be >= 1");
    if (eval_every < 1) throw DataError("train config: eval_every must be >= 1");
    if (preset != "desk" && preset != "paper")
        throw DataError("train config: unknown preset '" + preset + "'");
}

std::string TrainConfig::to_json() const {
    json j;
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["lr"] = lr;
    j["weight_decay"] = weight_decay;
    j["seed"] = seed;
    j["p_add"] = p_add;
    j["p_del"] = p_del;
    j["p_sub"] = p_sub;
    j["perturb"] = perturb;
    j["feature_noise"] = feature_noise;
    j["patience"] = patience;
    j["eval_every"] = eval_every;
    j["preset"] = preset;
    j["target_mode"] = mode_name(target_mode);
    j["token_mode"] = token_mode == text::TokenMode::Word ? "word" : "phoneme";
    j["resume_from"] = resume_from;
    return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& textstr) {
    json j;
    try {
        j = json::parse(textstr);
    } catch (const json::exception& e) {
        throw DataError(std::string("train config: ") + e.what());
    }
    TrainConfig c;
    if (j.value("preset", "desk") == "paper") c = paper();
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.seed = j.value("seed", c.seed);
    c.p_add = j.value("p_add", c.p_add);
    c.p_del = j.value("p_del", c.p_del);
    c.p_sub = j.value("p_sub", c.p_sub);
    c.perturb = j.value("perturb", c.perturb);
    c.feature_noise = j.value("feature_noise", c.feature_noise);
    c.patience = j.value("patience", c.patience);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.target_mode =
        j.value("target_mode", "position") == "word" ? model::TargetMode::Word
                                                     : model::TargetMode::Position;
    c.token_mode = j.value("token_mode", "word") == "phoneme" ? text::TokenMode::Phoneme
                                                              : text::TokenMode::Word;
    c.resume_from = j.value("resume_from", "");
    c.validate();
    return c;
}

std::vector<Batch> make_batches(const std::vector<corpus::Utterance>& data,
                                std::int64_t batch_size, std::uint64_t seed, std::int64_t epoch,
                                std::int64_t t_max, const std::vector<int>& units_per_item,
                                std::int64_t s_max) {
    if (batch_size < 1) throw DataError("make_batches: batch_size must be >= 1");
    if (units_per_item.size() != data.size())
        throw ShapeError("make_batches: units_per_item length mismatch");
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (data[i].n_frames > t_max)
            throw DataError("make_batches: utterance " + data[i].id + " has " +
                            std::to_string(data[i].n_frames) + " frames, limit " +
                            std::to_string(t_max));
        if (units_per_item[i] > s_max)
            throw DataError("make_batches: utterance " + data[i].id + " has " +
                            std::to_string(units_per_item[i]) + " units, limit " +
                            std::to_string(s_max));
    }
    std::vector<int> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return data[static_cast<std::size_t>(a)].n_frames <
               data[static_cast<std::size_t>(b)].n_frames;
    });
    std::vector<Batch> batches;
    for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(batch_size)) {
        Batch b;
        const std::size_t end = std::min(order.size(), pos + static_cast<std::size_t>(batch_size));
        for (std::size_t k = pos; k < end; ++k) {
            b.items.push_back(order[k]);
            b.max_frames =
                std::max<std::int64_t>(b.max_frames, data[static_cast<std::size_t>(order[k])].n_frames);
        }
        for (int item : b.items) {
            const auto& u = data[static_cast<std::size_t>(item)];
            std::vector<real> feat(static_cast<std::size_t>(b.max_frames * u.feature_dim),
                                   real(0));
            std::copy(u.features.begin(), u.features.end(), feat.begin());
            b.features.push_back(std::move(feat));
            std::vector<std::uint8_t> mask(static_cast<std::size_t>(b.max_frames), 0);
            std::fill(mask.begin(), mask.begin() + u.n_frames, std::uint8_t(1));
            b.frame_mask.push_back(std::move(mask));
        }
        batches.push_back(std::move(b));
    }
    Rng rng = make_rng(derive_seed(seed, kStreamShuffle + static_cast<std::uint64_t>(epoch)));
    std::shuffle(batches.begin(), batches.end(), rng);
    return batches;
}

int unit_count(const corpus::Utterance& u, text::TokenMode mode) {
    if (mode == text::TokenMode::Word) return static_cast<int>(u.words.size());
    int n = 0;
    for (const auto& vd : u.viseme_durations) n += static_cast<int>(vd.size());
    return n;
}

codec::AlignmentTarget unit_target(const corpus::Utterance& u, text::TokenMode mode) {
    if (mode == text::TokenMode::Word) {
        codec::AlignmentTarget t;
        t.n_words = static_cast<int>(u.words.size());
        t.frame_labels = u.frame_labels;
        for (const auto& span : u.word_spans) t.word_spans.emplace_back(span);
        return t;
    }
    codec::AlignmentTarget t;
    t.n_words = unit_count(u, mode);
    t.frame_labels.assign(static_cast<std::size_t>(u.n_frames), codec::kSilenceLabel);
    int unit = 0;
    for (std::size_t w = 0; w < u.words.size(); ++w) {
        int frame = u.word_spans[w].first;
        for (int dur : u.viseme_durations[w]) {
            ++unit;
            t.word_spans.emplace_back(std::make_pair(frame, frame + dur - 1));
            for (int k = 0; k < dur; ++k)
                t.frame_labels[static_cast<std::size_t>(frame + k)] = unit;
            frame += dur;
        }
    }
    return t;
}

std::vector<codec::WordSpan> target_spans(const codec::AlignmentTarget& target) {
    std::vector<codec::WordSpan> spans;
    spans.reserve(target.word_spans.size());
    for (const auto& s : target.word_spans) {
        codec::WordSpan w;
        if (s.has_value()) {
            w.first = s->first;
            w.last = s->second;
        } else {
            w.present = false;
        }
        spans.push_back(w);
    }
    return spans;
}

codec::PerturbResult inject_addition(const corpus::Utterance& u, Rng& rng,
                                     const std::vector<std::string>& dictionary) {
    if (dictionary.empty()) throw DataError("inject_addition: empty dictionary");
    const int s = static_cast<int>(u.words.size());
    std::uniform_int_distribution<int> slot_dist(0, s);
    std::uniform_int_distribution<std::size_t> word_dist(0, dictionary.size() - 1);
    const int slot = slot_dist(rng);
    codec::PerturbResult pr;
    pr.words = u.words;
    pr.words.insert(pr.words.begin() + slot, dictionary[word_dist(rng)]);
    std::vector<int> positions(static_cast<std::size_t>(s));
    for (int i = 0; i < s; ++i) positions[static_cast<std::size_t>(i)] = i < slot ? i + 1 : i + 2;
    pr.target = codec::encode_alignment(codec::utterance_segments(u), positions, s + 1);
    pr.presence.present.assign(static_cast<std::size_t>(s + 1), 1);
    pr.presence.present[static_cast<std::size_t>(slot)] = 0;
    codec::AnomalyRecord rec;
    rec.kind = codec::AnomalyKind::Addition;
    rec.word_index = slot;
    rec.ground_truth = true;
    pr.records.push_back(rec);
    return pr;
}

codec::PerturbResult inject_deletion(const corpus::Utterance& u, Rng& rng) {
    const int s = static_cast<int>(u.words.size());
    codec::PerturbResult pr;
    if (s < 2) {  // refuse to empty the transcript; caller sees no records
        pr.words = u.words;
        pr.target = unit_target(u, text::TokenMode::Word);
        pr.presence.present.assign(u.words.size(), 1);
        return pr;
    }
    std::uniform_int_distribution<int> pick(0, s - 1);
    const int victim = pick(rng);
    pr.words = u.words;
    pr.words.erase(pr.words.begin() + victim);
    std::vector<int> positions(static_cast<std::size_t>(s));
    for (int i = 0; i < s; ++i)
        positions[static_cast<std::size_t>(i)] = i < victim ? i + 1 : (i == victim ? -1 : i);
    pr.target = codec::encode_alignment(codec::utterance_segments(u), positions, s - 1);
    pr.presence.present.assign(static_cast<std::size_t>(s - 1), 1);
    codec::AnomalyRecord rec;
    rec.kind = codec::AnomalyKind::Deletion;
    rec.span = u.word_spans[static_cast<std::size_t>(victim)];
    rec.ground_truth = true;
    pr.records.push_back(rec);
    return pr;
}

TrainSetup prepare(const TrainConfig& cfg, const std::string& corpus_dir) {
    cfg.validate();
    TrainSetup setup;
    setup.lexicon = corpus::load_lexicon(corpus_dir + "/lexicon.json");
    setup.train_set = corpus::load_jsonl(corpus_dir + "/train.jsonl");
    setup.val_set = corpus::load_jsonl(corpus_dir + "/test.jsonl");
    if (setup.train_set.empty()) throw DataError("prepare: empty training set");
    {
        std::ifstream in(corpus_dir + "/manifest.json");
        if (in) {
            json j = json::parse(in, nullptr, false);
            if (!j.is_discarded() && j.contains("config"))
                setup.fps = j["config"].value("fps", 25);
        }
    }
    setup.tokenizer = text::Tokenizer::build(setup.lexicon.words);
    setup.tokenizer.viseme_count = setup.lexicon.viseme_count;

    model::ModelConfig mc =
        cfg.preset == "paper" ? model::ModelConfig::paper() : model::ModelConfig::desk();
    mc.d_in = setup.lexicon.feature_dim;
    mc.target_mode = cfg.target_mode;
    mc.token_mode = cfg.token_mode;
    mc.text_vocab = setup.tokenizer.vocab_size(cfg.token_mode);
    if (cfg.target_mode == model::TargetMode::Word) mc.word_dictionary = setup.lexicon.words;

    std::int64_t max_frames = 1, max_units = 1, max_tokens = 1;
    for (const auto* set : {&setup.train_set, &setup.val_set})
        for (const auto& u : *set) {
            max_frames = std::max<std::int64_t>(max_frames, u.n_frames);
            max_units = std::max<std::int64_t>(max_units, unit_count(u, cfg.token_mode));
            auto tr = setup.tokenizer.tokenize(join_words(u.words), cfg.token_mode,
                                               &setup.lexicon);
            max_tokens = std::max<std::int64_t>(max_tokens,
                                                static_cast<std::int64_t>(tr.token_ids.size()));
        }
    // Headroom: perturbation can at worst double the transcript length.
    mc.t_max = max_frames + 16;
    mc.s_max = 2 * max_units + 2;
    mc.token_max = 2 * max_tokens + 8;
    mc.validate();
    setup.model_config = mc;
    return setup;
}

namespace {

json train_state_json(std::int64_t epoch, std::int64_t best_epoch, double best_mae,
                      std::int64_t bad_evals, const TrainConfig& cfg) {
    json j;
    j["epoch"] = epoch;
    j["best_epoch"] = best_epoch;
    j["best_val_mae_frames"] = best_mae;
    j["bad_evals"] = bad_evals;
    j["train_config"] = json::parse(cfg.to_json());
    return j;
}

struct ItemLoss {
    ag::TensorPtr loss;
    real tap = 0;
    real tpp = 0;
};

ItemLoss item_loss(model::DvfaModel& m, const TrainSetup& setup, const TrainConfig& cfg,
                   const corpus::Utterance& u, const std::vector<real>& padded_features,
                   std::int64_t padded_frames, Rng& prng) {
    std::vector<std::string> words;
    codec::AlignmentTarget target;
    codec::PresenceTarget presence;
    if (cfg.perturb && cfg.token_mode == text::TokenMode::Word &&
        (cfg.p_add > 0 || cfg.p_del > 0 || cfg.p_sub > 0)) {
        auto pr = codec::perturb_transcript(u, prng, cfg.p_add, cfg.p_del, cfg.p_sub,
                                            setup.lexicon.words);
        words = std::move(pr.words);
        target = std::move(pr.target);
        presence = std::move(pr.presence);
    } else {
        words = u.words;
        target = unit_target(u, cfg.token_mode);
        presence.present.assign(static_cast<std::size_t>(target.n_words), 1);
    }
    auto tr = setup.tokenizer.tokenize(join_words(words), cfg.token_mode, &setup.lexicon);

    const std::vector<real>* feats = &padded_features;
    std::vector<real> noisy;
    if (cfg.feature_noise > 0) {
        noisy = padded_features;
        std::normal_distribution<real> gauss(real(0), cfg.feature_noise);
        const std::size_t valid = static_cast<std::size_t>(u.n_frames * m.cfg.d_in);
        for (std::size_t i = 0; i < valid; ++i) noisy[i] += gauss(prng);
        feats = &noisy;
    }
    auto f_v = m.encode_visual(*feats, u.n_frames, padded_frames);
    if (padded_frames > u.n_frames) f_v = ag::slice(f_v, 0, 0, u.n_frames);
    auto f_t = m.encode_text(tr);
    auto fused = m.fuse(f_v, f_t);
    auto tap = m.predict_tap(fused, tr.n_words());
    auto tpp = m.predict_tpp(fused);
    auto parts = m.total_loss(tap, tpp, target, presence, tr.words);
    return {parts.total, parts.tap, parts.tpp};
}

// Linear warmup into a cosine decay that bottoms out at a tenth of the
// base rate; transformers stall at a fixed rate on this task.
real scheduled_lr(real base, std::int64_t step, std::int64_t total_steps) {
    const std::int64_t warmup = std::max<std::int64_t>(10, total_steps / 20);
    if (step < warmup) return base * static_cast<real>(step + 1) / static_cast<real>(warmup);
    const real progress = static_cast<real>(step - warmup) /
                          static_cast<real>(std::max<std::int64_t>(1, total_steps - warmup));
    const real cosine = real(0.5) * (real(1) + std::cos(real(3.14159265358979323846) * progress));
    return base * (real(0.1) + real(0.9) * cosine);
}

}  // namespace

TrainResult train_model(const TrainConfig& cfg, model::DvfaModel& m, const TrainSetup& setup,
                        const std::string& out_dir, std::ostream* log) {
    cfg.validate();
    std::filesystem::create_directories(out_dir);
    ag::AdamW opt;
    opt.lr = cfg.lr;
    opt.weight_decay = cfg.weight_decay;

    TrainResult result;
    result.best_val_mae_frames = std::numeric_limits<double>::infinity();
    std::int64_t start_epoch = 0, bad_evals = 0;
    if (!cfg.resume_from.empty()) {
        auto loaded = load_model(cfg.resume_from);
        if (loaded.model->cfg.to_json() != m.cfg.to_json())
            throw ModelError("resume: checkpoint model configuration differs");
        ckpt::Loaded raw = ckpt::load(cfg.resume_from);
        ckpt::apply(raw, m.store);
        if (raw.has_optimizer) opt = raw.optimizer;
        json extra = json::parse(loaded.extra);
        start_epoch = extra.value("epoch", std::int64_t(-1)) + 1;
        result.best_epoch = extra.value("best_epoch", std::int64_t(-1));
        result.best_val_mae_frames =
            extra.value("best_val_mae_frames", std::numeric_limits<double>::infinity());
        bad_evals = extra.value("bad_evals", std::int64_t(0));
    }

    std::vector<int> units(setup.train_set.size());
    for (std::size_t i = 0; i < setup.train_set.size(); ++i)
        units[i] = unit_count(setup.train_set[i], cfg.token_mode);

    std::ofstream metrics_log(out_dir + "/metrics.jsonl",
                              start_epoch > 0 ? std::ios::app : std::ios::trunc);
    const std::string best_path = out_dir + "/best.ckpt";
    const std::string last_path = out_dir + "/last.ckpt";

    std::int64_t steps_per_epoch = 0;

    for (std::int64_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        auto batches = make_batches(setup.train_set, cfg.batch_size, cfg.seed, epoch,
                                    setup.model_config.t_max, units, setup.model_config.s_max);
        steps_per_epoch = static_cast<std::int64_t>(batches.size());
        double tap_sum = 0, tpp_sum = 0;
        std::int64_t n_items = 0;
        m.training = true;
        for (std::size_t b = 0; b < batches.size(); ++b) {
            const auto& batch = batches[b];
            opt.lr = scheduled_lr(cfg.lr,
                                  epoch * steps_per_epoch + static_cast<std::int64_t>(b),
                                  cfg.epochs * steps_per_epoch);
            const real inv = real(1) / static_cast<real>(batch.items.size());
            for (std::size_t k = 0; k < batch.items.size(); ++k) {
                const auto& u = setup.train_set[static_cast<std::size_t>(batch.items[k])];
                Rng prng = make_rng(derive_seed(
                    cfg.seed, kStreamPerturb + static_cast<std::uint64_t>(epoch) * 1000003ull +
                                  static_cast<std::uint64_t>(batch.items[k])));
                m.dropout_rng = &prng;
                auto il = item_loss(m, setup, cfg, u, batch.features[k], batch.max_frames, prng);
                if (!std::isfinite(static_cast<double>(il.loss->val[0])))
                    throw ModelError("non-finite loss at epoch " + std::to_string(epoch) +
                                     " batch " + std::to_string(b) + " utterance " + u.id);
                auto scaled = ag::scale(il.loss, inv);
                ag::backward(scaled);
                tap_sum += il.tap;
                tpp_sum += il.tpp;
                ++n_items;
            }
            opt.step(m.store.params);
            opt.zero_grad(m.store.params);
        }
        m.training = false;
        m.dropout_rng = nullptr;
        result.epochs_run = epoch + 1;
        result.final_train_loss = (tap_sum + tpp_sum) / std::max<std::int64_t>(1, n_items);

        json line;
        line["epoch"] = epoch;
        line["train_tap"] = tap_sum / std::max<std::int64_t>(1, n_items);
        line["train_tpp"] = tpp_sum / std::max<std::int64_t>(1, n_items);
        line["train_loss"] = result.final_train_loss;

        bool improved = false;
        if ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs) {
            auto report = evaluate(m, setup, setup.val_set, EvalMode::Clean, cfg.seed);
            line["val_mae_frames"] = report.mae_frames;
            line["val_mae_ms"] = report.mae_ms;
            line["val_frame_acc"] = report.frame_acc;
            if (report.mae_frames < result.best_val_mae_frames) {
                improved = true;
                result.best_val_mae_frames = report.mae_frames;
                result.best_epoch = epoch;
                bad_evals = 0;
            } else {
                ++bad_evals;
            }
        }
        metrics_log << line.dump() << '\n';
        metrics_log.flush();
        if (log) *log << line.dump() << std::endl;

        const auto state = train_state_json(epoch, result.best_epoch,
                                            result.best_val_mae_frames, bad_evals, cfg);
        save_model(last_path, m, setup.tokenizer, setup.lexicon, &opt, state.dump());
        if (improved)
            save_model(best_path, m, setup.tokenizer, setup.lexicon, nullptr, state.dump());
        if (bad_evals >= cfg.patience) break;
    }
    result.best_checkpoint = best_path;
    result.last_checkpoint = last_path;
    if (result.best_epoch < 0)  // no eval ever improved; keep the last weights
        save_model(best_path, m, setup.tokenizer, setup.lexicon, nullptr, "{}");
    return result;
}

namespace {

struct Accum {
    double abs_err_frames = 0;
    std::int64_t boundary_words = 0;
    std::int64_t frames_correct = 0;
    std::int64_t frames_total = 0;
    std::int64_t words_total = 0;

    void add_spans(const std::vector<codec::WordSpan>& pred,
                   const std::vector<codec::WordSpan>& gt) {
        for (std::size_t i = 0; i < pred.size(); ++i) {
            if (!gt[i].present) continue;
            abs_err_frames += (std::abs(pred[i].first - gt[i].first) +
                               std::abs(pred[i].last - gt[i].last)) /
                              2.0;
            ++boundary_words;
        }
    }
    void add_frames(const std::vector<int>& pred, const std::vector<int>& gt) {
        for (std::size_t i = 0; i < pred.size(); ++i)
            if (pred[i] == gt[i]) ++frames_correct;
        frames_total += static_cast<std::int64_t>(pred.size());
    }
};

struct Decoded {
    codec::DecodedAlignment alignment;
    std::vector<real> presence;
};

Decoded run_decode(model::DvfaModel& m, const TrainSetup& setup,
                   const corpus::Utterance& u, const std::vector<std::string>& words) {
    auto tr = setup.tokenizer.tokenize(join_words(words), m.cfg.token_mode, &setup.lexicon);
    auto fwd = m.forward(u.features, u.n_frames, tr);
    std::vector<real> probs(fwd.tap_log_probs->val.size());
    for (std::size_t i = 0; i < probs.size(); ++i)
        probs[i] = std::exp(fwd.tap_log_probs->val[i]);
    auto post = m.position_posteriors(probs, u.n_frames, tr.words);
    const int s = tr.n_words();
    Decoded d;
    d.alignment = codec::decode_alignment(post, u.n_frames, s + 2, s);
    d.presence = fwd.tpp_probs->val;
    return d;
}

}  // namespace

metrics::EvalReport evaluate(model::DvfaModel& m, const TrainSetup& setup,
                             const std::vector<corpus::Utterance>& data, EvalMode mode,
                             std::uint64_t seed,
                             std::vector<codec::AlignmentOutput>* outputs) {
    const bool was_training = m.training;
    m.training = false;
    metrics::EvalReport report;
    report.seed = seed;
    report.config_hash = fnv1a(m.cfg.to_json());
    report.n_utterances = static_cast<int>(data.size());
    Accum acc;

    if (mode == EvalMode::Clean || mode == EvalMode::Oracle) {
        report.mode = mode == EvalMode::Clean ? "clean" : "oracle";
        for (const auto& u : data) {
            auto gt = unit_target(u, m.cfg.token_mode);
            const int s = gt.n_words;
            Decoded d;
            if (mode == EvalMode::Clean) {
                d = run_decode(m, setup, u, u.words);
            } else {
                std::vector<real> post(static_cast<std::size_t>(u.n_frames * (s + 2)), real(0));
                for (int t = 0; t < u.n_frames; ++t)
                    post[static_cast<std::size_t>(t * (s + 2) +
                                                  gt.frame_labels[static_cast<std::size_t>(t)])] =
                        real(1);
                d.alignment = codec::decode_alignment(post, u.n_frames, s + 2, s);
                d.presence.assign(static_cast<std::size_t>(s), real(1));
            }
            acc.add_frames(d.alignment.labels, gt.frame_labels);
            acc.add_spans(d.alignment.words, target_spans(gt));
            acc.words_total += s;
            if (outputs) {
                std::vector<std::string> unit_words;
                if (m.cfg.token_mode == text::TokenMode::Word) {
                    unit_words = u.words;
                } else {
                    auto tr = setup.tokenizer.tokenize(join_words(u.words), m.cfg.token_mode,
                                                       &setup.lexicon);
                    unit_words = tr.words;
                }
                outputs->push_back(codec::make_alignment_output(
                    unit_words, d.alignment, d.presence, {}, setup.fps));
            }
        }
    } else {
        report.mode = "anomaly";
        report.has_anomaly = true;
        if (m.cfg.token_mode != text::TokenMode::Word)
            throw ModelError("anomaly evaluation requires word token mode");
        // Two passes at 50% injection each: one measures addition
        // detection, the other deletion detection.
        std::vector<metrics::UtteranceAnomalies> add_pass, del_pass;
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t i = 0; i < data.size(); ++i) {
                const auto& u = data[i];
                Rng rng = make_rng(derive_seed(
                    seed, kStreamEval + static_cast<std::uint64_t>(pass) * 1000003ull +
                              static_cast<std::uint64_t>(i)));
                std::uniform_real_distribution<double> coin(0.0, 1.0);
                codec::PerturbResult pr;
                if (coin(rng) < 0.5) {
                    pr = pass == 0 ? inject_addition(u, rng, setup.lexicon.words)
                                   : inject_deletion(u, rng);
                } else {
                    pr.words = u.words;
                    pr.target = unit_target(u, text::TokenMode::Word);
                    pr.presence.present.assign(u.words.size(), 1);
                }
                auto d = run_decode(m, setup, u, pr.words);
                auto detected = codec::detect_anomalies(d.alignment, d.presence);
                metrics::UtteranceAnomalies ua;
                ua.n_words = static_cast<int>(pr.words.size());
                ua.ground_truth = pr.records;
                ua.detected = detected;
                (pass == 0 ? add_pass : del_pass).push_back(std::move(ua));
                acc.add_frames(d.alignment.labels, pr.target.frame_labels);
                acc.words_total += static_cast<int>(pr.words.size());
                if (outputs)
                    outputs->push_back(codec::make_alignment_output(pr.words, d.alignment,
                                                                    d.presence, detected,
                                                                    setup.fps));
            }
        }
        const auto add_acc = metrics::anomaly_accuracy(add_pass);
        const auto del_acc = metrics::anomaly_accuracy(del_pass);
        report.anomaly.addition_word = add_acc.addition_word;
        report.anomaly.addition_sentence = add_acc.addition_sentence;
        report.anomaly.deletion_sentence = del_acc.deletion_sentence;
        report.n_utterances = static_cast<int>(data.size()) * 2;
    }

    report.n_words = static_cast<int>(acc.words_total);
    report.n_frames = static_cast<int>(acc.frames_total);
    report.frame_acc =
        acc.frames_total ? static_cast<double>(acc.frames_correct) / acc.frames_total : 0;
    if (acc.boundary_words) {
        report.mae_frames = acc.abs_err_frames / acc.boundary_words;
        report.mae_ms = report.mae_frames * 1000.0 / setup.fps;
    }
    m.training = was_training;
    return report;
}

void save_model(const std::string& path, const model::DvfaModel& m,
                const text::Tokenizer& tokenizer, const corpus::Lexicon& lexicon,
                const ag::AdamW* optimizer, const std::string& extra_json) {
    json meta;
    meta["kind"] = "dvfa";
    meta["model_config"] = json::parse(m.cfg.to_json());
    meta["tokenizer"] = json::parse(tokenizer.to_json());
    meta["lexicon"] = json::parse(lexicon.to_json());
    meta["extra"] = json::parse(extra_json);
    ckpt::save(path, m.store, meta.dump(), optimizer);
}

LoadedModel load_model(const std::string& path) {
    auto raw = ckpt::load(path);
    json meta = json::parse(raw.meta);
    if (meta.value("kind", "") != "dvfa")
        throw ModelError("checkpoint " + path + " is not an alignment model");
    LoadedModel out;
    auto cfg = model::ModelConfig::from_json(meta.at("model_config").dump());
    out.model = std::make_unique<model::DvfaModel>(cfg);
    ckpt::apply(raw, out.model->store);
    out.tokenizer = text::Tokenizer::from_json(meta.at("tokenizer").dump());
    out.lexicon = corpus::Lexicon::from_json(meta.at("lexicon").dump());
    out.has_optimizer = raw.has_optimizer;
    out.optimizer = std::move(raw.optimizer);
    out.extra = meta.value("extra", json::object()).dump();
    return out;
}

std::vector<int> word_tokens(const corpus::Lexicon& lexicon, const std::string& word) {
    const int idx = lexicon.word_index(word);
    if (idx < 0) throw DataError("word '" + word + "' not in lexicon");
    return lexicon.visemes[static_cast<std::size_t>(idx)];
}

ctc::CtcConfig make_ctc_config(const TrainSetup& setup) {
    ctc::CtcConfig c;
    c.d_in = setup.lexicon.feature_dim;
    c.t_max = setup.model_config.t_max;
    c.vocab = setup.lexicon.viseme_count;
    return c;
}

TrainResult train_ctc(const TrainConfig& cfg, ctc::CtcModel& m, const TrainSetup& setup,
                      const std::string& out_dir, std::ostream* log) {
    cfg.validate();
    std::filesystem::create_directories(out_dir);
    ag::AdamW opt;
    opt.lr = cfg.lr;
    opt.weight_decay = cfg.weight_decay;
    TrainResult result;
    result.best_val_mae_frames = std::numeric_limits<double>::infinity();
    std::int64_t bad_evals = 0;

    std::vector<int> units(setup.train_set.size());
    for (std::size_t i = 0; i < setup.train_set.size(); ++i)
        units[i] = static_cast<int>(setup.train_set[i].words.size());

    std::ofstream metrics_log(out_dir + "/metrics.jsonl", std::ios::trunc);
    const std::string best_path = out_dir + "/best.ckpt";
    const std::string last_path = out_dir + "/last.ckpt";

    for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto batches = make_batches(setup.train_set, cfg.batch_size, cfg.seed, epoch, m.cfg.t_max,
                                    units, std::numeric_limits<std::int64_t>::max());
        double loss_sum = 0;
        std::int64_t n_items = 0;
        for (std::size_t b = 0; b < batches.size(); ++b) {
            const auto& batch = batches[b];
            opt.lr = scheduled_lr(
                cfg.lr, epoch * static_cast<std::int64_t>(batches.size()) +
                            static_cast<std::int64_t>(b),
                cfg.epochs * static_cast<std::int64_t>(batches.size()));
            const real inv = real(1) / static_cast<real>(batch.items.size());
            for (int item : batch.items) {
                const auto& u = setup.train_set[static_cast<std::size_t>(item)];
                std::vector<int> tokens;
                for (const auto& w : u.words)
                    for (int v : word_tokens(setup.lexicon, w)) tokens.push_back(v);
                auto lp = m.log_probs(u.features, u.n_frames);
                auto loss = ctc::ctc_loss(lp, tokens, m.blank());
                if (!std::isfinite(static_cast<double>(loss->val[0])))
                    throw ModelError("non-finite loss at epoch " + std::to_string(epoch) +
                                     " batch " + std::to_string(b) + " utterance " + u.id);
                ag::backward(ag::scale(loss, inv));
                loss_sum += loss->val[0];
                ++n_items;
            }
            opt.step(m.store.params);
            opt.zero_grad(m.store.params);
        }
        result.epochs_run = epoch + 1;
        result.final_train_loss = loss_sum / std::max<std::int64_t>(1, n_items);

        json line;
        line["epoch"] = epoch;
        line["train_loss"] = result.final_train_loss;
        bool improved = false;
        if ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs) {
            auto report = evaluate_ctc(m, setup, setup.val_set);
            line["val_mae_frames"] = report.mae_frames;
            line["val_frame_acc"] = report.frame_acc;
            if (report.mae_frames < result.best_val_mae_frames) {
                improved = true;
                result.best_val_mae_frames = report.mae_frames;
                result.best_epoch = epoch;
                bad_evals = 0;
            } else {
                ++bad_evals;
            }
        }
        metrics_log << line.dump() << '\n';
        metrics_log.flush();
        if (log) *log << line.dump() << std::endl;
        save_ctc(last_path, m, setup.lexicon, "{}");
        if (improved) save_ctc(best_path, m, setup.lexicon, "{}");
        if (bad_evals >= cfg.patience) break;
    }
    result.best_checkpoint = best_path;
    result.last_checkpoint = last_path;
    if (result.best_epoch < 0) save_ctc(best_path, m, setup.lexicon, "{}");
    return result;
}

metrics::EvalReport evaluate_ctc(const ctc::CtcModel& m, const TrainSetup& setup,
                                 const std::vector<corpus::Utterance>& data,
                                 std::vector<codec::AlignmentOutput>* outputs) {
    metrics::EvalReport report;
    report.mode = "ctc";
    report.config_hash = fnv1a(m.cfg.to_json());
    report.n_utterances = static_cast<int>(data.size());
    Accum acc;
    for (const auto& u : data) {
        std::vector<int> tokens;
        std::vector<std::pair<int, int>> token_of_word;  // [first, last] token index
        for (const auto& w : u.words) {
            const int first = static_cast<int>(tokens.size());
            for (int v : word_tokens(setup.lexicon, w)) tokens.push_back(v);
            token_of_word.emplace_back(first, static_cast<int>(tokens.size()) - 1);
        }
        auto lp = m.log_probs(u.features, u.n_frames);
        auto spans = ctc::ctc_segment(lp->val, u.n_frames, m.cfg.vocab + 1, tokens, m.blank());

        codec::DecodedAlignment dec;
        dec.labels.assign(static_cast<std::size_t>(u.n_frames), codec::kSilenceLabel);
        for (std::size_t w = 0; w < token_of_word.size(); ++w) {
            const int first = spans[static_cast<std::size_t>(token_of_word[w].first)].first;
            const int last = spans[static_cast<std::size_t>(token_of_word[w].second)].second;
            codec::WordSpan ws;
            ws.first = first;
            ws.last = last;
            dec.words.push_back(ws);
            for (int t = first; t <= last; ++t)
                dec.labels[static_cast<std::size_t>(t)] = static_cast<int>(w) + 1;
        }
        auto gt = unit_target(u, text::TokenMode::Word);
        acc.add_frames(dec.labels, gt.frame_labels);
        acc.add_spans(dec.words, target_spans(gt));
        acc.words_total += gt.n_words;
        if (outputs) {
            std::vector<real> presence(u.words.size(), real(1));
            outputs->push_back(
                codec::make_alignment_output(u.words, dec, presence, {}, setup.fps));
        }
    }
    report.n_words = static_cast<int>(acc.words_total);
    report.n_frames = static_cast<int>(acc.frames_total);
    report.frame_acc =
        acc.frames_total ? static_cast<double>(acc.frames_correct) / acc.frames_total : 0;
    if (acc.boundary_words) {
        report.mae_frames = acc.abs_err_frames / acc.boundary_words;
        report.mae_ms = report.mae_frames * 1000.0 / setup.fps;
    }
    return report;
}

void save_ctc(const std::string& path, const ctc::CtcModel& m, const corpus::Lexicon& lexicon,
              const std::string& extra_json) {
    json meta;
    meta["kind"] = "ctc";
    meta["ctc_config"] = json::parse(m.cfg.to_json());
    meta["lexicon"] = json::parse(lexicon.to_json());
    meta["extra"] = json::parse(extra_json);
    ckpt::save(path, m.store, meta.dump());
}

LoadedCtc load_ctc(const std::string& path) {
    auto raw = ckpt::load(path);
    json meta = json::parse(raw.meta);
    if (meta.value("kind", "") != "ctc")
        throw ModelError("checkpoint " + path + " is not a baseline model");
    LoadedCtc out;
    auto cfg = ctc::CtcConfig::from_json(meta.at("ctc_config").dump());
    out.model = std::make_unique<ctc::CtcModel>(cfg);
    ckpt::apply(raw, out.model->store);
    out.lexicon = corpus::Lexicon::from_json(meta.at("lexicon").dump());
    out.extra = meta.value("extra", json::object()).dump();
    return out;
}

std::string checkpoint_kind(const std::string& path) {
    auto raw = ckpt::load(path);
    return json::parse(raw.meta).value("kind", "");
}

codec::AlignmentOutput align_checkpoint(const std::string& model_path,
                                        const std::vector<real>& features, int n_frames,
                                        const std::vector<std::string>& words, int fps) {
    if (words.empty()) throw DataError("align: empty transcript");
    const std::string kind = checkpoint_kind(model_path);
    if (kind == "dvfa") {
        auto loaded = load_model(model_path);
        auto& m = *loaded.model;
        std::string sentence;
        for (std::size_t i = 0; i < words.size(); ++i) sentence += (i ? " " : "") + words[i];
        auto tr = loaded.tokenizer.tokenize(sentence, m.cfg.token_mode, &loaded.lexicon);
        auto fwd = m.forward(features, n_frames, tr);
        std::vector<real> probs(fwd.tap_log_probs->val.size());
        for (std::size_t i = 0; i < probs.size(); ++i)
            probs[i] = std::exp(fwd.tap_log_probs->val[i]);
        auto post = m.position_posteriors(probs, n_frames, tr.words);
        const int s = tr.n_words();
        auto dec = codec::decode_alignment(post, n_frames, s + 2, s);
        auto anomalies = codec::detect_anomalies(dec, fwd.tpp_probs->val);
        return codec::make_alignment_output(tr.words, dec, fwd.tpp_probs->val, anomalies, fps);
    }
    if (kind == "ctc") {
        auto loaded = load_ctc(model_path);
        const auto& m = *loaded.model;
        std::vector<int> tokens;
        std::vector<std::pair<int, int>> token_of_word;
        for (const auto& w : words) {
            const int first = static_cast<int>(tokens.size());
            for (int v : word_tokens(loaded.lexicon, w)) tokens.push_back(v);
            token_of_word.emplace_back(first, static_cast<int>(tokens.size()) - 1);
        }
        auto lp = m.log_probs(features, n_frames);
        auto spans = ctc::ctc_segment(lp->val, n_frames, m.cfg.vocab + 1, tokens, m.blank());
        codec::DecodedAlignment dec;
        dec.labels.assign(static_cast<std::size_t>(n_frames), codec::kSilenceLabel);
        for (std::size_t w = 0; w < token_of_word.size(); ++w) {
            codec::WordSpan ws;
            ws.first = spans[static_cast<std::size_t>(token_of_word[w].first)].first;
            ws.last = spans[static_cast<std::size_t>(token_of_word[w].second)].second;
            dec.words.push_back(ws);
            for (int t = static_cast<int>(ws.first); t <= static_cast<int>(ws.last); ++t)
                dec.labels[static_cast<std::size_t>(t)] = static_cast<int>(w) + 1;
        }
        std::vector<real> presence(words.size(), real(1));
        return codec::make_alignment_output(words, dec, presence, {}, fps);
    }
    throw ModelError(model_path + ": unknown checkpoint kind '" + kind + "'");
}

}  // namespace dvfa::train
