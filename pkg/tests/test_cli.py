import json
import os

import numpy as np
import pytest

from framechain.cli import main
from framechain.data import (
    SynthConfig,
    generate_synthetic_corpus,
    save_corpus,
    save_feature_sequence,
)
from framechain.crf import LabelSequence, ObservationSequence


TINY_PIPELINE = {
    "extractor": {"num_classes": 3, "input_size": [8, 8, 1],
                  "feature_dim": 4, "stem_channels": [2, 3],
                  "stages": [[1, 3, 2]], "dropout_rate": 0.0, "seed": 0},
    "sgd": {"total_iterations": 30, "batch_size": 16, "lr_drop_every": 25},
    "optim": {"max_iterations": 40},
    "seed": 0,
}

TINY_SYNTH = {
    "num_subjects": 4, "sequences_per_subject": 2, "num_classes": 3,
    "image_size": [8, 8], "apex_noise": 0.1, "transition_frames": 3,
    "apex_frames": 2, "seed": 0,
}


@pytest.fixture()
def workdir(tmp_path):
    (tmp_path / "pipeline.json").write_text(json.dumps(TINY_PIPELINE))
    (tmp_path / "synth.json").write_text(json.dumps(TINY_SYNTH))
    return tmp_path


def run(args):
    return main([str(a) for a in args])


class TestGenSynth:
    def test_writes_manifest(self, workdir, capsys):
        out = workdir / "corpus"
        assert run(["gen-synth", "--config", workdir / "synth.json",
                    "--out", out]) == 0
        assert (out / "manifest.json").exists()
        assert "sequences" in capsys.readouterr().out

    def test_seed_flag_overrides_config(self, workdir):
        a, b = workdir / "a", workdir / "b"
        run(["gen-synth", "--config", workdir / "synth.json", "--out", a,
             "--seed", 123])
        run(["gen-synth", "--config", workdir / "synth.json", "--out", b,
             "--seed", 123])
        ma = json.loads((a / "manifest.json").read_text())
        mb = json.loads((b / "manifest.json").read_text())
        assert ma == mb

    def test_bad_config_exit_code(self, workdir):
        (workdir / "bad.json").write_text(json.dumps({"num_classes": 1}))
        assert run(["gen-synth", "--config", workdir / "bad.json",
                    "--out", workdir / "x"]) == 2


class TestTrainPredictEval:
    def test_full_cycle(self, workdir, capsys):
        corpus_dir = workdir / "corpus"
        run(["gen-synth", "--config", workdir / "synth.json",
             "--out", corpus_dir])
        manifest = corpus_dir / "manifest.json"
        model = workdir / "model.fchain"
        assert run(["train", "--corpus", manifest,
                    "--config", workdir / "pipeline.json",
                    "--out-model", model]) == 0
        assert model.exists()

        preds = workdir / "preds.json"
        assert run(["predict", "--model", model, "--corpus", manifest,
                    "--out", preds]) == 0
        doc = json.loads(preds.read_text())
        assert len(doc["sequences"]) == 8

        capsys.readouterr()
        assert run(["eval", "--pred", preds, "--truth", manifest]) == 0
        metrics = json.loads(capsys.readouterr().out)
        assert 0.0 <= metrics["per_frame_accuracy"] <= 1.0
        assert metrics["num_sequences"] == 8

    def test_missing_corpus_is_data_error(self, workdir):
        assert run(["train", "--corpus", workdir / "nope.json",
                    "--config", workdir / "pipeline.json",
                    "--out-model", workdir / "m"]) == 3

    def test_corrupt_model_exit_code(self, workdir):
        corpus_dir = workdir / "corpus"
        run(["gen-synth", "--config", workdir / "synth.json",
             "--out", corpus_dir])
        bad = workdir / "bad.fchain"
        bad.write_text("junk")
        assert run(["predict", "--model", bad,
                    "--corpus", corpus_dir / "manifest.json",
                    "--out", workdir / "p.json"]) == 4


class TestAblate:
    def test_ablate_si_writes_report(self, workdir, capsys):
        corpus_dir = workdir / "corpus"
        run(["gen-synth", "--config", workdir / "synth.json",
             "--out", corpus_dir])
        report_path = workdir / "report.json"
        assert run(["ablate-si", "--corpus", corpus_dir / "manifest.json",
                    "--config", workdir / "pipeline.json", "--folds", 2,
                    "--seed", 1, "--out", report_path]) == 0
        report = json.loads(report_path.read_text())
        assert report["protocol"] == "subject_independent"
        assert report["delta"] == pytest.approx(
            report["with_crf"]["per_frame_accuracy"]
            - report["without_crf"]["per_frame_accuracy"])
        out = capsys.readouterr().out
        assert "with CRF" in out and "delta" in out

    def test_ablate_cross(self, workdir):
        for name, seed in (("a", 2), ("b", 3)):
            cfg = dict(TINY_SYNTH, seed=seed, name=name)
            (workdir / ("%s.json" % name)).write_text(json.dumps(cfg))
            run(["gen-synth", "--config", workdir / ("%s.json" % name),
                 "--out", workdir / name])
        assert run(["ablate-cross", "--corpora",
                    workdir / "a" / "manifest.json",
                    workdir / "b" / "manifest.json",
                    "--test-name", "b",
                    "--config", workdir / "pipeline.json",
                    "--out", workdir / "cross.json"]) == 0
        report = json.loads((workdir / "cross.json").read_text())
        assert report["protocol"] == "cross_corpus"


class TestCrfTrain:
    def test_trains_from_feature_files(self, workdir, capsys):
        rng = np.random.default_rng(0)
        feat_dir = workdir / "features"
        feat_dir.mkdir()
        for i in range(4):
            T = int(rng.integers(3, 7))
            feats = rng.normal(size=(T, 2))
            labels = (feats[:, 0] > 0).astype(int)
            save_feature_sequence(str(feat_dir / ("seq%d.features" % i)),
                                  ObservationSequence(feats),
                                  LabelSequence(labels))
        out = workdir / "crf.json"
        assert run(["crf-train", "--features-dir", feat_dir,
                    "--sigma2", 50.0, "--out-model", out]) == 0
        doc = json.loads(out.read_text())
        assert doc["kind"] == "crf"
        assert doc["d"] == 2
        assert np.array(doc["W_state"]).shape == (2, 2)

    def test_empty_dir_is_data_error(self, workdir):
        empty = workdir / "empty"
        empty.mkdir()
        assert run(["crf-train", "--features-dir", empty,
                    "--out-model", workdir / "m"]) == 3


class TestCheck:
    def test_oracle_suite(self, capsys, monkeypatch):
        import framechain.checks as checks

        real = checks.run_crf_oracle_suite
        monkeypatch.setattr(checks, "run_crf_oracle_suite",
                            lambda: real(num_instances=20, seed=0))
        assert run(["check", "--suite", "oracle"]) == 0
        assert "oracle suite passed" in capsys.readouterr().out

    def test_grad_suite_failure_exit_code(self, monkeypatch):
        import framechain.checks as checks

        def boom(**kw):
            raise AssertionError("forced")

        monkeypatch.setattr(checks, "run_crf_gradient_suite", boom)
        assert run(["check", "--suite", "grad"]) == 5
