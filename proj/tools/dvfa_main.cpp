#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "dvfa/checkpoint.hpp"
#include "dvfa/srt.hpp"
#include "dvfa/trainer.hpp"

using nlohmann::json;
using namespace dvfa;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void spill(const std::string& path, const std::string& content) {
    if (path.empty() || path == "-") {
        std::cout << content;
        return;
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path);
    out << content;
}

train::TrainSetup setup_from_model(const train::LoadedModel& loaded, const std::string& data_dir) {
    train::TrainSetup s;
    s.lexicon = loaded.lexicon;
    s.tokenizer = loaded.tokenizer;
    s.model_config = loaded.model->cfg;
    if (!data_dir.empty()) {
        s.train_set = corpus::load_jsonl(data_dir + "/train.jsonl");
        s.val_set = corpus::load_jsonl(data_dir + "/test.jsonl");
        std::ifstream in(data_dir + "/manifest.json");
        if (in) {
            json j = json::parse(in, nullptr, false);
            if (!j.is_discarded() && j.contains("config")) s.fps = j["config"].value("fps", 25);
        }
    }
    return s;
}

struct FeatureInput {
    std::vector<real> features;
    int n_frames = 0;
    int d_in = 0;
    int fps = 25;
};

// {"version":1,"d_in":16,"fps":25,"frames":[[...],...]}
FeatureInput read_features(const std::string& path) {
    json j = json::parse(slurp(path));
    if (j.value("version", 0) != 1) throw DataError(path + ": unsupported feature file version");
    FeatureInput f;
    f.d_in = j.at("d_in").get<int>();
    f.fps = j.value("fps", 25);
    for (const auto& row : j.at("frames")) {
        if (static_cast<int>(row.size()) != f.d_in)
            throw DataError(path + ": frame width differs from d_in");
        for (const auto& v : row) f.features.push_back(v.get<real>());
        ++f.n_frames;
    }
    if (f.n_frames == 0) throw DataError(path + ": no frames");
    return f;
}

corpus::Utterance find_utterance(const std::string& data_dir, const std::string& id) {
    for (const char* split : {"/test.jsonl", "/train.jsonl"}) {
        const std::string path = data_dir + split;
        if (!std::filesystem::exists(path)) continue;
        for (auto& u : corpus::load_jsonl(path))
            if (u.id == id) return u;
    }
    throw DataError("utterance '" + id + "' not found in " + data_dir);
}

int run(int argc, char** argv) {
    CLI::App app{"Visual speech forced alignment: corpus generation, training, "
                 "alignment, anomaly interpretation, subtitle export"};
    app.require_subcommand(1);

    // ---- gen-data ------------------------------------------------------
    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic corpus");
    std::string gen_out, gen_config;
    std::uint64_t gen_seed = 1;
    bool gen_force = false;
    corpus::CorpusConfig cc;
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--config", gen_config, "Corpus config JSON file");
    gen->add_option("--seed", gen_seed, "Master seed");
    gen->add_flag("--force", gen_force, "Overwrite an existing corpus directory");
    auto* g_vocab = gen->add_option("--vocab", cc.vocab_size, "Lexicon size");
    auto* g_train = gen->add_option("--train-count", cc.train_count, "Training utterances");
    auto* g_test = gen->add_option("--test-count", cc.test_count, "Test utterances");
    auto* g_noise = gen->add_option("--noise", cc.noise_sigma, "Feature noise sigma");
    auto* g_minw = gen->add_option("--min-words", cc.min_words, "Minimum words per utterance");
    auto* g_maxw = gen->add_option("--max-words", cc.max_words, "Maximum words per utterance");
    auto* g_fps = gen->add_option("--fps", cc.fps, "Frame rate");
    auto* g_dim = gen->add_option("--feature-dim", cc.feature_dim, "Feature width");
    gen->callback([&] {
        corpus::CorpusConfig base;
        if (!gen_config.empty()) base = corpus::CorpusConfig::from_json(slurp(gen_config));
        if (g_vocab->count()) base.vocab_size = cc.vocab_size;
        if (g_train->count()) base.train_count = cc.train_count;
        if (g_test->count()) base.test_count = cc.test_count;
        if (g_noise->count()) base.noise_sigma = cc.noise_sigma;
        if (g_minw->count()) base.min_words = cc.min_words;
        if (g_maxw->count()) base.max_words = cc.max_words;
        if (g_fps->count()) base.fps = cc.fps;
        if (g_dim->count()) base.feature_dim = cc.feature_dim;
        corpus::gen_corpus(base, gen_seed, gen_out, gen_force);
        std::cout << "wrote corpus to " << gen_out << "\n";
    });

    // ---- train ---------------------------------------------------------
    auto* tr = app.add_subcommand("train", "Train the alignment model");
    std::string tr_data, tr_out, tr_config, tr_preset, tr_target, tr_token, tr_resume;
    std::int64_t tr_epochs = 0, tr_batch = 0, tr_patience = 0;
    double tr_lr = 0, tr_feature_noise = 0;
    std::uint64_t tr_seed = 0;
    bool tr_no_perturb = false, tr_ctc = false, tr_quiet = false;
    tr->add_option("--data", tr_data, "Corpus directory")->required();
    tr->add_option("--out", tr_out, "Run directory (checkpoints, metric log)")->required();
    auto* t_cfg = tr->add_option("--config", tr_config,
                                 "Training config JSON (default: $DVFA_CONFIG); flags override");
    auto* t_preset = tr->add_option("--preset", tr_preset, "desk | paper")
                         ->check(CLI::IsMember({"desk", "paper"}));
    auto* t_epochs = tr->add_option("--epochs", tr_epochs, "Max epochs");
    auto* t_batch = tr->add_option("--batch-size", tr_batch, "Batch size");
    auto* t_lr = tr->add_option("--lr", tr_lr, "Learning rate");
    auto* t_seed = tr->add_option("--seed", tr_seed, "Training seed");
    auto* t_pat = tr->add_option("--patience", tr_patience, "Early-stop patience");
    auto* t_target = tr->add_option("--target-mode", tr_target, "position | word")
                         ->check(CLI::IsMember({"position", "word"}));
    auto* t_token = tr->add_option("--mode", tr_token, "Token mode: word | phoneme")
                        ->check(CLI::IsMember({"word", "phoneme"}));
    auto* t_fnoise = tr->add_option("--feature-noise", tr_feature_noise,
                                    "Gaussian feature augmentation sigma (default off)");
    auto* t_resume = tr->add_option("--resume", tr_resume, "Checkpoint to resume from");
    tr->add_flag("--no-perturb", tr_no_perturb, "Train on clean transcripts only");
    tr->add_flag("--ctc", tr_ctc, "Train the frame-classifier baseline instead");
    tr->add_flag("--quiet", tr_quiet, "Suppress per-epoch progress lines");
    tr->callback([&] {
        train::TrainConfig cfg;
        std::string cfg_path = tr_config;
        if (!t_cfg->count()) {
            if (const char* env = std::getenv("DVFA_CONFIG")) cfg_path = env;
        }
        if (!cfg_path.empty()) cfg = train::TrainConfig::from_json(slurp(cfg_path));
        if (t_preset->count())
            cfg = tr_preset == "paper" ? train::TrainConfig::paper() : train::TrainConfig::desk();
        if (t_epochs->count()) cfg.epochs = tr_epochs;
        if (t_batch->count()) cfg.batch_size = tr_batch;
        if (t_lr->count()) cfg.lr = static_cast<real>(tr_lr);
        if (t_seed->count()) cfg.seed = tr_seed;
        if (t_pat->count()) cfg.patience = tr_patience;
        if (t_target->count())
            cfg.target_mode = tr_target == "word" ? model::TargetMode::Word
                                                  : model::TargetMode::Position;
        if (t_token->count())
            cfg.token_mode = tr_token == "phoneme" ? text::TokenMode::Phoneme
                                                   : text::TokenMode::Word;
        if (t_fnoise->count()) cfg.feature_noise = static_cast<real>(tr_feature_noise);
        if (t_resume->count()) cfg.resume_from = tr_resume;
        if (tr_no_perturb) cfg.perturb = false;
        cfg.validate();
        auto setup = train::prepare(cfg, tr_data);
        std::ostream* log = tr_quiet ? nullptr : &std::cerr;
        if (tr_ctc) {
            ctc::CtcModel m(train::make_ctc_config(setup), cfg.seed);
            auto result = train::train_ctc(cfg, m, setup, tr_out, log);
            std::cout << "best checkpoint: " << result.best_checkpoint
                      << " (val MAE " << result.best_val_mae_frames << " frames)\n";
        } else {
            model::DvfaModel m(setup.model_config, cfg.seed);
            auto result = train::train_model(cfg, m, setup, tr_out, log);
            std::cout << "best checkpoint: " << result.best_checkpoint
                      << " (val MAE " << result.best_val_mae_frames << " frames)\n";
        }
    });

    // ---- eval ----------------------------------------------------------
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a corpus split");
    std::string ev_model, ev_data, ev_split = "test", ev_mode = "clean", ev_report;
    std::uint64_t ev_seed = 1;
    ev->add_option("--model", ev_model, "Checkpoint path")->required();
    ev->add_option("--data", ev_data, "Corpus directory")->required();
    ev->add_option("--split", ev_split, "train | test")->check(CLI::IsMember({"train", "test"}));
    ev->add_option("--mode", ev_mode, "clean | anomaly | oracle")
        ->check(CLI::IsMember({"clean", "anomaly", "oracle"}));
    ev->add_option("--seed", ev_seed, "Evaluation seed (anomaly injection)");
    ev->add_option("--report", ev_report, "Report JSON path (default stdout)");
    ev->callback([&] {
        const std::string kind = train::checkpoint_kind(ev_model);
        metrics::EvalReport report;
        if (kind == "ctc") {
            if (ev_mode != "clean")
                throw DataError("eval: baseline checkpoints only support clean mode");
            auto loaded = train::load_ctc(ev_model);
            train::TrainSetup s;
            s.lexicon = loaded.lexicon;
            s.train_set = corpus::load_jsonl(ev_data + "/train.jsonl");
            s.val_set = corpus::load_jsonl(ev_data + "/test.jsonl");
            report = train::evaluate_ctc(*loaded.model, s,
                                         ev_split == "train" ? s.train_set : s.val_set);
        } else {
            auto loaded = train::load_model(ev_model);
            auto s = setup_from_model(loaded, ev_data);
            const auto mode = ev_mode == "clean"     ? train::EvalMode::Clean
                              : ev_mode == "anomaly" ? train::EvalMode::Anomaly
                                                     : train::EvalMode::Oracle;
            report = train::evaluate(*loaded.model, s,
                                     ev_split == "train" ? s.train_set : s.val_set, mode, ev_seed);
        }
        spill(ev_report, report.to_json() + "\n");
    });

    // ---- align ---------------------------------------------------------
    auto* al = app.add_subcommand("align", "Align a transcription against visual features");
    std::string al_model, al_features, al_data, al_id, al_transcript, al_out;
    al->add_option("--model", al_model, "Checkpoint path")->required();
    auto* a_feat = al->add_option("--features", al_features, "Feature file (JSON)");
    auto* a_data = al->add_option("--data", al_data, "Corpus directory (with --id)");
    al->add_option("--id", al_id, "Utterance id inside --data");
    auto* a_text = al->add_option("--transcript", al_transcript,
                                  "Transcription (defaults to the utterance's words)");
    al->add_option("--out", al_out, "Alignment JSON path (default stdout)");
    a_feat->excludes(a_data);
    al->callback([&] {
        std::vector<real> features;
        int n_frames = 0, fps = 25;
        std::vector<std::string> words;
        if (a_feat->count()) {
            auto f = read_features(al_features);
            features = std::move(f.features);
            n_frames = f.n_frames;
            fps = f.fps;
            if (!a_text->count())
                throw DataError("align: --transcript is required with --features");
        } else if (a_data->count()) {
            if (al_id.empty()) throw DataError("align: --id is required with --data");
            auto u = find_utterance(al_data, al_id);
            features = u.features;
            n_frames = u.n_frames;
            words = u.words;
            std::ifstream in(al_data + "/manifest.json");
            if (in) {
                json j = json::parse(in, nullptr, false);
                if (!j.is_discarded() && j.contains("config")) fps = j["config"].value("fps", 25);
            }
        } else {
            throw DataError("align: provide --features or --data/--id");
        }
        if (a_text->count()) words = text::split_words(al_transcript);
        auto out = train::align_checkpoint(al_model, features, n_frames, words, fps);
        spill(al_out, out.to_json() + "\n");
    });

    // ---- interpret -----------------------------------------------------
    auto* in = app.add_subcommand("interpret", "Explain an alignment's anomaly decisions");
    std::string in_alignment, in_out;
    in->add_option("--alignment", in_alignment, "Alignment JSON from `align`")->required();
    in->add_option("--out", in_out, "Report path (default stdout)");
    in->callback([&] {
        auto a = codec::AlignmentOutput::from_json(slurp(in_alignment));
        std::ostringstream out;
        out << "words: " << a.words.size() << ", anomalies: " << a.anomalies.size() << "\n";
        for (std::size_t i = 0; i < a.words.size(); ++i) {
            const auto& w = a.words[i];
            std::string status = "trusted";
            for (const auto& f : w.flags) {
                if (f == "addition") status = "addition (not spoken)";
                else if (f == "substitution") status = "substituted";
                else if (f == "absent") status = "absent";
            }
            out << i << "\t" << w.word << "\t" << static_cast<long long>(w.start_ms) << "-"
                << static_cast<long long>(w.end_ms) << "ms\tpresence "
                << w.present_probability << "\t" << status << "\n";
        }
        for (const auto& rec : a.anomalies) {
            if (rec.kind == codec::AnomalyKind::Addition)
                out << "anomaly: word " << rec.word_index
                    << " appears in the text but not in the video\n";
            else if (rec.kind == codec::AnomalyKind::Deletion)
                out << "anomaly: frames " << rec.span.first << "-" << rec.span.second
                    << " hold speech missing from the text\n";
            else
                out << "anomaly: word " << rec.word_index << " was replaced by the speech at "
                    << "frames " << rec.span.first << "-" << rec.span.second << "\n";
        }
        spill(in_out, out.str());
    });

    // ---- export-srt ----------------------------------------------------
    auto* ex = app.add_subcommand("export-srt", "Write an alignment as SubRip subtitles");
    std::string ex_alignment, ex_out;
    ex->add_option("--alignment", ex_alignment, "Alignment JSON from `align`")->required();
    ex->add_option("--out", ex_out, "SRT path (default stdout)");
    ex->callback([&] {
        auto a = codec::AlignmentOutput::from_json(slurp(ex_alignment));
        spill(ex_out, srt::write_srt(srt::cues_from_alignment(a)));
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return e.get_exit_code() == 0 ? 0 : 2;  // usage errors
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const ModelError& e) {
        std::cerr << "model error: " << e.what() << "\n";
        return 4;
    } catch (const ShapeError& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
