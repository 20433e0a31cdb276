"""Metrics, the two evaluation protocols, and model persistence.

Both protocols score two arms from the same trained extractor: the full
cascade (Viterbi over CRF scores) and the no-CRF baseline (per-frame
softmax argmax). The reported statistic is per-frame accuracy; a
per-sequence majority-vote accuracy is emitted as a secondary number.
"""

from __future__ import annotations

import dataclasses
import io
import json
import os
import tempfile
import zipfile
from dataclasses import dataclass, field

import numpy as np

from . import crf, data, extractor, optim, pipeline

MODEL_FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """Raised for unreadable or inconsistent model files."""


class ModelVersionError(ModelFormatError):
    """Raised when a model file has an unsupported format version."""


@dataclass(frozen=True)
class Metrics:
    per_frame_accuracy: float
    per_class_recall: np.ndarray
    confusion: np.ndarray          # rows = truth, cols = prediction
    num_frames: int
    num_sequences: int
    per_sequence_accuracy: float   # majority-vote, secondary statistic

    def to_dict(self):
        return {"per_frame_accuracy": self.per_frame_accuracy,
                "per_class_recall": self.per_class_recall.tolist(),
                "confusion": self.confusion.tolist(),
                "num_frames": self.num_frames,
                "num_sequences": self.num_sequences,
                "per_sequence_accuracy": self.per_sequence_accuracy}


def evaluate(predictions, truth, num_classes=None):
    """Confusion-matrix metrics over aligned lists of label sequences."""
    if len(predictions) != len(truth):
        raise ValueError("prediction and truth lists differ in length")
    if not truth:
        raise ValueError("nothing to evaluate")
    if num_classes is None:
        num_classes = 1 + max(int(max(p.labels.max(), t.labels.max()))
                              for p, t in zip(predictions, truth))
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    seq_hits = 0
    for pred, true in zip(predictions, truth):
        if pred.T != true.T:
            raise ValueError("sequence length mismatch: %d predicted vs %d "
                             "true" % (pred.T, true.T))
        np.add.at(confusion, (true.labels, pred.labels), 1)
        maj_pred = np.bincount(pred.labels, minlength=num_classes).argmax()
        maj_true = np.bincount(true.labels, minlength=num_classes).argmax()
        seq_hits += int(maj_pred == maj_true)
    num_frames = int(confusion.sum())
    truth_counts = confusion.sum(axis=1)
    recall = np.where(truth_counts > 0,
                      np.diag(confusion) / np.maximum(truth_counts, 1), 0.0)
    return Metrics(
        per_frame_accuracy=float(np.trace(confusion)) / num_frames,
        per_class_recall=recall,
        confusion=confusion,
        num_frames=num_frames,
        num_sequences=len(truth),
        per_sequence_accuracy=seq_hits / len(truth))


@dataclass(frozen=True)
class AblationReport:
    with_crf: Metrics
    without_crf: Metrics
    delta: float
    protocol: str                  # subject_independent | cross_corpus
    config_hash: str
    seed: int
    fold_accuracies: tuple = ()    # (with, without) per fold

    def to_dict(self):
        return {"protocol": self.protocol,
                "config_hash": self.config_hash,
                "seed": self.seed,
                "delta": self.delta,
                "with_crf": self.with_crf.to_dict(),
                "without_crf": self.without_crf.to_dict(),
                "fold_accuracies": [list(f) for f in self.fold_accuracies]}

    def summary(self):
        lines = ["protocol: %s" % self.protocol,
                 "with CRF:    %.4f per-frame (%.4f per-sequence)"
                 % (self.with_crf.per_frame_accuracy,
                    self.with_crf.per_sequence_accuracy),
                 "without CRF: %.4f per-frame (%.4f per-sequence)"
                 % (self.without_crf.per_frame_accuracy,
                    self.without_crf.per_sequence_accuracy),
                 "delta:       %+.4f" % self.delta]
        return "\n".join(lines)


def _score_arms(trained, test_corpus):
    """Both arms' predictions on a test corpus, plus the truth."""
    with_crf, without_crf, truth = [], [], []
    for seq in test_corpus.sequences:
        with_crf.append(pipeline.predict_sequence(trained, seq))
        without_crf.append(pipeline.predict_frames_softmax(
            trained.extractor_model, seq))
        truth.append(crf.LabelSequence(seq.labels()))
    return with_crf, without_crf, truth


def _build_report(arm_results, protocol, config, seed):
    all_with, all_without, all_truth = [], [], []
    folds = []
    for with_crf, without_crf, truth in arm_results:
        all_with.extend(with_crf)
        all_without.extend(without_crf)
        all_truth.extend(truth)
    num_classes = 1 + max(int(max(p.labels.max(), t.labels.max()))
                          for p, t in zip(all_with + all_without,
                                          all_truth + all_truth))
    for with_crf, without_crf, truth in arm_results:
        mw = evaluate(with_crf, truth, num_classes)
        mo = evaluate(without_crf, truth, num_classes)
        folds.append((mw.per_frame_accuracy, mo.per_frame_accuracy))
    with_m = evaluate(all_with, all_truth, num_classes)
    without_m = evaluate(all_without, all_truth, num_classes)
    return AblationReport(
        with_crf=with_m,
        without_crf=without_m,
        delta=with_m.per_frame_accuracy - without_m.per_frame_accuracy,
        protocol=protocol,
        config_hash=pipeline.config_hash(config),
        seed=seed,
        fold_accuracies=tuple(folds))


def run_subject_independent(corpus, config, k=5, seed=0):
    """k-fold subject-disjoint ablation; pooled test metrics plus
    per-fold accuracies."""
    plan = data.subject_independent_folds(corpus, k, seed=seed)
    arm_results = []
    for i, (train_ids, _val_ids, test_ids) in enumerate(plan.folds):
        try:
            train = data.restrict_to_sequences(corpus, train_ids)
            test = data.restrict_to_sequences(corpus, test_ids)
            fold_config = dataclasses.replace(config, seed=config.seed + i)
            trained = pipeline.train_two_step(train, fold_config)
            arm_results.append(_score_arms(trained, test))
        except Exception as exc:
            raise RuntimeError("fold %d failed: %s" % (i, exc)) from exc
    return _build_report(arm_results, "subject_independent", config, seed)


def run_cross_corpus(corpora, test_name, config, seed=0):
    """Train on all corpora but `test_name`, evaluate both arms on it."""
    train, test = data.cross_corpus_split(corpora, test_name)
    if train.label_set.K != config.extractor.num_classes:
        config = dataclasses.replace(
            config, extractor=dataclasses.replace(
                config.extractor, num_classes=train.label_set.K))
    run_config = dataclasses.replace(config, seed=seed)
    trained = pipeline.train_two_step(train, run_config)
    arm_results = [_score_arms(trained, test)]
    return _build_report(arm_results, "cross_corpus", run_config, seed)


# ---------------------------------------------------------------------------
# model persistence

def save_model(trained, path):
    """Write a TrainedPipeline to a single self-describing file.

    The container is a zip holding a JSON header (format version, config,
    label names, provenance) and each parameter/statistic array in npy
    format with explicit little-endian dtype. Writes are atomic.
    """
    arrays = {}
    for name, layer, key in trained.extractor_model.named_parameters():
        arrays["extractor/%s" % name] = layer.params[key]
    for lname, layer in trained.extractor_model.named_layers():
        if hasattr(layer, "running_mean"):
            arrays["extractor/%s.running_mean" % lname] = layer.running_mean
            arrays["extractor/%s.running_var" % lname] = layer.running_var
    arrays["crf/W_state"] = trained.crf_model.W_state
    arrays["crf/b_state"] = trained.crf_model.b_state
    arrays["crf/A_trans"] = trained.crf_model.A_trans
    if trained.feature_mean is not None:
        arrays["features/mean"] = trained.feature_mean
        arrays["features/std"] = trained.feature_std

    header = {"format_version": MODEL_FORMAT_VERSION,
              "labels": list(trained.label_set.names),
              "config": trained.config.to_dict(),
              "provenance": trained.provenance,
              "arrays": sorted(arrays)}

    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)))
    os.close(fd)
    try:
        with zipfile.ZipFile(tmp, "w", zipfile.ZIP_DEFLATED) as zf:
            zf.writestr("header.json", json.dumps(header, indent=1))
            for name, arr in arrays.items():
                buf = io.BytesIO()
                np.save(buf, np.ascontiguousarray(arr, dtype="<f8"))
                zf.writestr("arrays/%s.npy" % name, buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(path):
    """Read a model container back into a TrainedPipeline."""
    try:
        zf = zipfile.ZipFile(path)
        with zf.open("header.json") as fh:
            header = json.load(fh)
    except (zipfile.BadZipFile, KeyError, OSError,
            json.JSONDecodeError) as exc:
        raise ModelFormatError("corrupt model file %s: %s"
                               % (path, exc)) from exc
    version = header.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ModelVersionError("model format version %r not supported"
                                % version)
    config = pipeline.TwoStepConfig.from_dict(header["config"])
    label_set = crf.LabelSet(tuple(header["labels"]))

    def read(name):
        try:
            with zf.open("arrays/%s.npy" % name) as fh:
                return np.load(io.BytesIO(fh.read()))
        except KeyError as exc:
            raise ModelFormatError("model file missing array %r"
                                   % name) from exc

    model = extractor.ExtractorModel(config.extractor)
    for name, layer, key in model.named_parameters():
        arr = read("extractor/%s" % name)
        if arr.shape != layer.params[key].shape:
            raise ModelFormatError(
                "array %r has shape %r, expected %r"
                % (name, arr.shape, layer.params[key].shape))
        layer.params[key][...] = arr
    for lname, layer in model.named_layers():
        if hasattr(layer, "running_mean"):
            layer.running_mean = read("extractor/%s.running_mean" % lname)
            layer.running_var = read("extractor/%s.running_var" % lname)

    try:
        crf_model = crf.CrfModel(label_set, read("crf/W_state"),
                                 read("crf/b_state"), read("crf/A_trans"))
    except ValueError as exc:
        raise ModelFormatError("inconsistent CRF arrays: %s" % exc) from exc
    mean = std = None
    if "features/mean" in header["arrays"]:
        mean, std = read("features/mean"), read("features/std")
    try:
        return pipeline.TrainedPipeline(model, crf_model, label_set, config,
                                        feature_mean=mean, feature_std=std)
    except ValueError as exc:
        raise ModelFormatError("dimension inconsistency: %s" % exc) from exc
