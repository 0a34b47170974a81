#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "dvfa/srt.hpp"
#include "dvfa/trainer.hpp"

namespace py = pybind11;
using namespace dvfa;

namespace {

py::object json_loads(const std::string& text) {
    return py::module_::import("json").attr("loads")(text);
}

std::vector<real> flatten(const std::vector<std::vector<real>>& rows, const char* what) {
    if (rows.empty()) throw DataError(std::string(what) + ": no rows");
    const std::size_t width = rows[0].size();
    std::vector<real> flat;
    flat.reserve(rows.size() * width);
    for (const auto& r : rows) {
        if (r.size() != width) throw DataError(std::string(what) + ": ragged rows");
        flat.insert(flat.end(), r.begin(), r.end());
    }
    return flat;
}

}  // namespace

PYBIND11_MODULE(_dvfa, m) {
    m.doc() = "Visual speech forced alignment: corpus generation, training, alignment, "
              "decoding and metrics";

    py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
    py::register_exception<ModelError>(m, "ModelError", PyExc_RuntimeError);
    py::register_exception<ShapeError>(m, "ShapeError", PyExc_RuntimeError);

    m.def(
        "gen_data",
        [](const std::string& out_dir, std::uint64_t seed, const std::string& config_json,
           bool force) {
            auto cfg = config_json.empty() ? corpus::CorpusConfig{}
                                           : corpus::CorpusConfig::from_json(config_json);
            corpus::gen_corpus(cfg, seed, out_dir, force);
        },
        py::arg("out_dir"), py::arg("seed") = 1, py::arg("config_json") = "",
        py::arg("force") = false, "Generate a synthetic corpus directory");

    m.def(
        "train",
        [](const std::string& data_dir, const std::string& out_dir,
           const std::string& config_json, bool ctc_baseline) {
            auto cfg = config_json.empty() ? train::TrainConfig{}
                                           : train::TrainConfig::from_json(config_json);
            auto setup = train::prepare(cfg, data_dir);
            train::TrainResult r;
            if (ctc_baseline) {
                ctc::CtcModel model(train::make_ctc_config(setup), cfg.seed);
                r = train::train_ctc(cfg, model, setup, out_dir);
            } else {
                model::DvfaModel model(setup.model_config, cfg.seed);
                r = train::train_model(cfg, model, setup, out_dir);
            }
            py::dict d;
            d["epochs_run"] = r.epochs_run;
            d["best_epoch"] = r.best_epoch;
            d["best_val_mae_frames"] = r.best_val_mae_frames;
            d["final_train_loss"] = r.final_train_loss;
            d["best_checkpoint"] = r.best_checkpoint;
            d["last_checkpoint"] = r.last_checkpoint;
            return d;
        },
        py::arg("data_dir"), py::arg("out_dir"), py::arg("config_json") = "",
        py::arg("ctc_baseline") = false,
        "Train on a generated corpus; returns checkpoint paths and summary numbers");

    m.def(
        "evaluate",
        [](const std::string& model_path, const std::string& data_dir, const std::string& split,
           const std::string& mode, std::uint64_t seed) {
            const std::string kind = train::checkpoint_kind(model_path);
            metrics::EvalReport report;
            if (kind == "ctc") {
                if (mode != "clean")
                    throw DataError("evaluate: baseline checkpoints only support clean mode");
                auto loaded = train::load_ctc(model_path);
                train::TrainSetup s;
                s.lexicon = loaded.lexicon;
                s.train_set = corpus::load_jsonl(data_dir + "/train.jsonl");
                s.val_set = corpus::load_jsonl(data_dir + "/test.jsonl");
                report = train::evaluate_ctc(*loaded.model, s,
                                             split == "train" ? s.train_set : s.val_set);
            } else {
                auto loaded = train::load_model(model_path);
                train::TrainSetup s;
                s.lexicon = loaded.lexicon;
                s.tokenizer = loaded.tokenizer;
                s.model_config = loaded.model->cfg;
                s.train_set = corpus::load_jsonl(data_dir + "/train.jsonl");
                s.val_set = corpus::load_jsonl(data_dir + "/test.jsonl");
                const auto m = mode == "clean"     ? train::EvalMode::Clean
                               : mode == "anomaly" ? train::EvalMode::Anomaly
                               : mode == "oracle"
                                   ? train::EvalMode::Oracle
                                   : throw DataError("evaluate: unknown mode '" + mode + "'");
                report = train::evaluate(*loaded.model, s,
                                         split == "train" ? s.train_set : s.val_set, m, seed);
            }
            return json_loads(report.to_json());
        },
        py::arg("model_path"), py::arg("data_dir"), py::arg("split") = "test",
        py::arg("mode") = "clean", py::arg("seed") = 1,
        "Evaluate a checkpoint on a corpus split; returns the report as a dict");

    m.def(
        "align",
        [](const std::string& model_path, const std::vector<std::vector<real>>& features,
           const std::vector<std::string>& transcript, int fps) {
            auto flat = flatten(features, "align");
            auto out = train::align_checkpoint(model_path, flat,
                                               static_cast<int>(features.size()), transcript, fps);
            return json_loads(out.to_json());
        },
        py::arg("model_path"), py::arg("features"), py::arg("transcript"), py::arg("fps") = 25,
        "Align a transcript (list of words) against T x D_in features");

    m.def(
        "decode_alignment",
        [](const std::vector<std::vector<real>>& posteriors, int n_words, int min_run) {
            auto flat = flatten(posteriors, "decode_alignment");
            auto dec = codec::decode_alignment(flat, static_cast<int>(posteriors.size()),
                                               static_cast<int>(posteriors[0].size()), n_words,
                                               min_run);
            py::dict d;
            d["labels"] = dec.labels;
            py::list words;
            for (const auto& w : dec.words) {
                py::dict ws;
                ws["first"] = w.first;
                ws["last"] = w.last;
                ws["present"] = w.present;
                words.append(ws);
            }
            d["words"] = words;
            d["deletion_spans"] = dec.deletion_spans;
            return d;
        },
        py::arg("posteriors"), py::arg("n_words"), py::arg("min_run") = 2,
        "Decode T x (S+2) posteriors into repaired labels and word spans");

    m.def(
        "ctc_segment",
        [](const std::vector<std::vector<real>>& log_probs, const std::vector<int>& targets,
           int blank) {
            auto flat = flatten(log_probs, "ctc_segment");
            return ctc::ctc_segment(flat, static_cast<std::int64_t>(log_probs.size()),
                                    static_cast<std::int64_t>(log_probs[0].size()), targets,
                                    blank);
        },
        py::arg("log_probs"), py::arg("targets"), py::arg("blank"),
        "Best-path token spans from T x (V+1) log-distributions");

    m.def(
        "frame_accuracy",
        [](const std::vector<int>& pred, const std::vector<int>& gt) {
            return metrics::frame_accuracy(pred, gt);
        },
        py::arg("predicted"), py::arg("ground_truth"));

    m.def(
        "boundary_mae_frames",
        [](const std::vector<std::tuple<double, double>>& pred,
           const std::vector<std::tuple<double, double>>& gt) {
            auto spans = [](const std::vector<std::tuple<double, double>>& in) {
                std::vector<codec::WordSpan> out;
                for (const auto& [a, b] : in) out.push_back({a, b, true});
                return out;
            };
            return metrics::boundary_mae_frames(spans(pred), spans(gt));
        },
        py::arg("predicted"), py::arg("ground_truth"),
        "Mean per-word boundary deviation, spans as (first, last) frame pairs");

    m.def(
        "export_srt",
        [](const py::object& alignment) {
            const std::string text =
                py::module_::import("json").attr("dumps")(alignment).cast<std::string>();
            auto a = codec::AlignmentOutput::from_json(text);
            return srt::write_srt(srt::cues_from_alignment(a));
        },
        py::arg("alignment"), "Render an alignment dict (as returned by align) as SubRip text");
}
