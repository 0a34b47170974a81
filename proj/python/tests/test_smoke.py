import json
import math

import pytest

try:
    import dvfa_align as dvfa
except ImportError:
    import _dvfa as dvfa


CORPUS_CONFIG = json.dumps(
    {
        "vocab_size": 12,
        "min_words": 2,
        "max_words": 4,
        "train_count": 24,
        "test_count": 6,
        "noise_sigma": 0.05,
    }
)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    corpus = root / "corpus"
    dvfa.gen_data(str(corpus), seed=21, config_json=CORPUS_CONFIG)
    result = dvfa.train(
        str(corpus), str(root / "run"), config_json=json.dumps({"epochs": 2, "seed": 3})
    )
    return {"corpus": corpus, "result": result}


def test_gen_data_writes_the_corpus(run):
    for name in ("train.jsonl", "test.jsonl", "lexicon.json", "manifest.json"):
        assert (run["corpus"] / name).exists()
    with pytest.raises(ValueError):
        dvfa.gen_data(str(run["corpus"]), seed=21)  # refuses to clobber


def test_train_reports_checkpoints(run):
    result = run["result"]
    assert result["epochs_run"] == 2
    assert result["best_checkpoint"].endswith("best.ckpt")


def test_oracle_evaluation_is_perfect(run):
    report = dvfa.evaluate(result_path(run), str(run["corpus"]), mode="oracle")
    assert report["mae_frames"] == 0.0
    assert report["frame_acc"] == 1.0
    assert report["n_utterances"] == 6


def test_clean_evaluation_is_deterministic(run):
    a = dvfa.evaluate(result_path(run), str(run["corpus"]), seed=5)
    b = dvfa.evaluate(result_path(run), str(run["corpus"]), seed=5)
    assert a == b
    assert a["mode"] == "clean"


def test_align_and_export(run):
    line = (run["corpus"] / "test.jsonl").read_text().splitlines()[0]
    utt = json.loads(line)
    d_in = 16
    frames = [
        utt["features"][t * d_in : (t + 1) * d_in]
        for t in range(len(utt["features"]) // d_in)
    ]
    alignment = dvfa.align(result_path(run), frames, utt["words"])
    assert len(alignment["words"]) == len(utt["words"])
    for word in alignment["words"]:
        assert word["end_ms"] >= word["start_ms"]

    srt = dvfa.export_srt(alignment)
    assert isinstance(srt, str)

    with pytest.raises(ValueError):
        dvfa.align(result_path(run), frames, [])


def test_decode_alignment_round_trip():
    labels = [1, 2, 2, 3]
    eps = 1e-3
    posteriors = [
        [eps if c != l else 1 - 4 * eps for c in range(5)] for l in labels
    ]
    decoded = dvfa.decode_alignment(posteriors, n_words=3)
    assert decoded["labels"] == labels
    assert [(w["first"], w["last"]) for w in decoded["words"]] == [(0, 0), (1, 2), (3, 3)]
    assert decoded["deletion_spans"] == []


def test_ctc_segment_peaked_path():
    lp = [
        [math.log(0.98), math.log(0.01), math.log(0.01)],
        [math.log(0.01), math.log(0.98), math.log(0.01)],
        [math.log(0.01), math.log(0.01), math.log(0.98)],
    ]
    assert dvfa.ctc_segment(lp, [0, 1], blank=2) == [(0, 0), (1, 1)]
    with pytest.raises(ValueError):
        dvfa.ctc_segment(lp, [], blank=2)


def test_metrics():
    assert dvfa.frame_accuracy([1, 1, 2], [1, 2, 2]) == pytest.approx(2 / 3)
    assert dvfa.boundary_mae_frames([(1, 4), (6, 9)], [(0, 4), (8, 9)]) == pytest.approx(0.75)
    with pytest.raises(ValueError):
        dvfa.frame_accuracy([], [])


def result_path(run):
    return run["result"]["best_checkpoint"]
