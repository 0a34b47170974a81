#pragma once

#include <cstdint>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "dvfa/codec.hpp"
#include "dvfa/corpus.hpp"
#include "dvfa/ctc.hpp"
#include "dvfa/metrics.hpp"
#include "dvfa/model.hpp"
#include "dvfa/text.hpp"

namespace dvfa::train {

struct TrainConfig {
    std::int64_t epochs = 30;
    std::int64_t batch_size = 16;
    real lr = real(1e-3);
    real weight_decay = real(0.01);
    std::uint64_t seed = 1;
    // Per word-slot transcript error rates during training.
    real p_add = real(0.1);
    real p_del = real(0.1);
    real p_sub = real(0.1);
    bool perturb = true;
    // Gaussian noise added to input features during training (0 = off).
    real feature_noise = real(0);
    std::int64_t patience = 5;    // early stop after this many non-improving evals
    std::int64_t eval_every = 1;  // epochs between validation passes
    std::string preset = "desk";  // desk | paper (model size + optimizer defaults)
    model::TargetMode target_mode = model::TargetMode::Position;
    text::TokenMode token_mode = text::TokenMode::Word;
    std::string resume_from;  // checkpoint path, empty = fresh start

    static TrainConfig desk();
    static TrainConfig paper();
    std::string to_json() const;
    static TrainConfig from_json(const std::string& text);
    void validate() const;
};

// One padded mini-batch; features are zero-padded to the batch maximum and
// frame_mask marks the valid prefix of every item.
struct Batch {
    std::vector<int> items;  // indices into the source utterance list
    std::int64_t max_frames = 0;
    std::vector<std::vector<real>> features;        // per item, max_frames x d_in
    std::vector<std::vector<std::uint8_t>> frame_mask;  // per item, max_frames
};

// Length-sorted bucketing into fixed-size batches, batch order shuffled by
// (seed, epoch). Items with too many frames or alignment units are
// rejected by id.
std::vector<Batch> make_batches(const std::vector<corpus::Utterance>& data,
                                std::int64_t batch_size, std::uint64_t seed, std::int64_t epoch,
                                std::int64_t t_max, const std::vector<int>& units_per_item,
                                std::int64_t s_max);

// Ground truth at alignment-unit granularity: words, or phonemes when the
// token mode expands words.
codec::AlignmentTarget unit_target(const corpus::Utterance& u, text::TokenMode mode);
std::vector<codec::WordSpan> target_spans(const codec::AlignmentTarget& target);
int unit_count(const corpus::Utterance& u, text::TokenMode mode);

// Single-error injectors for anomaly evaluation.
codec::PerturbResult inject_addition(const corpus::Utterance& u, Rng& rng,
                                     const std::vector<std::string>& dictionary);
codec::PerturbResult inject_deletion(const corpus::Utterance& u, Rng& rng);

struct TrainSetup {
    corpus::Lexicon lexicon;
    std::vector<corpus::Utterance> train_set;
    std::vector<corpus::Utterance> val_set;
    text::Tokenizer tokenizer;
    model::ModelConfig model_config;
    int fps = 25;
};

// Loads a generated corpus directory and finalizes the model
// configuration against it.
TrainSetup prepare(const TrainConfig& cfg, const std::string& corpus_dir);

struct TrainResult {
    std::int64_t epochs_run = 0;
    std::int64_t best_epoch = -1;
    double best_val_mae_frames = 0;
    double final_train_loss = 0;
    std::string best_checkpoint;
    std::string last_checkpoint;
};

// Full training loop: perturbed transcripts, gradient accumulation over
// the batch, AdamW, validation-MAE early stopping, best/last checkpoints
// and a JSONL metric log under out_dir.
TrainResult train_model(const TrainConfig& cfg, model::DvfaModel& m, const TrainSetup& setup,
                        const std::string& out_dir, std::ostream* log = nullptr);

enum class EvalMode { Clean, Anomaly, Oracle };

metrics::EvalReport evaluate(model::DvfaModel& m, const TrainSetup& setup,
                             const std::vector<corpus::Utterance>& data, EvalMode mode,
                             std::uint64_t seed,
                             std::vector<codec::AlignmentOutput>* outputs = nullptr);

// ---- model checkpointing ----------------------------------------------

void save_model(const std::string& path, const model::DvfaModel& m,
                const text::Tokenizer& tokenizer, const corpus::Lexicon& lexicon,
                const ag::AdamW* optimizer = nullptr, const std::string& extra_json = "{}");

struct LoadedModel {
    std::unique_ptr<model::DvfaModel> model;
    text::Tokenizer tokenizer;
    corpus::Lexicon lexicon;
    bool has_optimizer = false;
    ag::AdamW optimizer;
    std::string extra;  // JSON: training progress etc.
};

LoadedModel load_model(const std::string& path);

// ---- frame-classifier baseline ----------------------------------------

// Token sequence (viseme indices) for one transcript word.
std::vector<int> word_tokens(const corpus::Lexicon& lexicon, const std::string& word);

// Baseline configuration sized against the same corpus.
ctc::CtcConfig make_ctc_config(const TrainSetup& setup);

TrainResult train_ctc(const TrainConfig& cfg, ctc::CtcModel& m, const TrainSetup& setup,
                      const std::string& out_dir, std::ostream* log = nullptr);

metrics::EvalReport evaluate_ctc(const ctc::CtcModel& m, const TrainSetup& setup,
                                 const std::vector<corpus::Utterance>& data,
                                 std::vector<codec::AlignmentOutput>* outputs = nullptr);

void save_ctc(const std::string& path, const ctc::CtcModel& m, const corpus::Lexicon& lexicon,
              const std::string& extra_json = "{}");

struct LoadedCtc {
    std::unique_ptr<ctc::CtcModel> model;
    corpus::Lexicon lexicon;
    std::string extra;
};

LoadedCtc load_ctc(const std::string& path);

// ---- checkpoint-driven inference --------------------------------------

// "dvfa" or "ctc", read from the checkpoint metadata.
std::string checkpoint_kind(const std::string& path);

// Align one transcript against features with either checkpoint kind:
// forward + decode + anomaly detection for the full model, Viterbi
// segmentation for the baseline.
codec::AlignmentOutput align_checkpoint(const std::string& model_path,
                                        const std::vector<real>& features, int n_frames,
                                        const std::vector<std::string>& words, int fps);

}  // namespace dvfa::train
