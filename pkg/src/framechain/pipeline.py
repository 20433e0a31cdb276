"""Two-step training: frame-wise extractor first, whole-sequence CRF second.

Step 1 flattens every training sequence into labeled frames and fits the
convolutional extractor with momentum SGD. Step 2 freezes the extractor,
maps each training sequence to its feature matrix, and fits the CRF on
all sequences at once with the quasi-Newton solver. Prediction runs the
frozen extractor followed by Viterbi decoding; the no-CRF baseline takes
the per-frame argmax of the logits instead.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import crf, data, extractor, optim


@dataclass(frozen=True)
class TwoStepConfig:
    extractor: extractor.ExtractorConfig
    sgd: extractor.SgdConfig = field(default_factory=extractor.SgdConfig)
    optim: optim.OptimConfig = field(default_factory=optim.OptimConfig)
    sigma2: float = 10.0
    feature_tap: str = "penultimate"   # or 'logits'
    standardize_features: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.feature_tap not in ("penultimate", "logits"):
            raise ValueError("feature_tap must be 'penultimate' or 'logits'")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        ex = dict(d.pop("extractor"))
        for key in ("input_size", "stem_channels"):
            if key in ex:
                ex[key] = tuple(ex[key])
        if "stages" in ex:
            ex["stages"] = tuple(tuple(s) for s in ex["stages"])
        d["extractor"] = extractor.ExtractorConfig(**ex)
        if "sgd" in d:
            d["sgd"] = extractor.SgdConfig(**d["sgd"])
        if "optim" in d:
            d["optim"] = optim.OptimConfig(**d["optim"])
        return cls(**d)


def config_hash(config):
    """Stable hash of a TwoStepConfig for provenance stamps."""
    blob = json.dumps(config.to_dict(), sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class TrainedPipeline:
    extractor_model: extractor.ExtractorModel
    crf_model: crf.CrfModel
    label_set: crf.LabelSet
    config: TwoStepConfig
    feature_mean: np.ndarray = None    # set when standardize_features
    feature_std: np.ndarray = None
    crf_report: optim.OptimReport = None

    def __post_init__(self):
        d = tap_width(self.config.extractor, self.config.feature_tap)
        if self.crf_model.d != d:
            raise ValueError("CRF feature dimension %d does not match the "
                             "extractor tap width %d" % (self.crf_model.d, d))
        if self.crf_model.label_set != self.label_set:
            raise ValueError("label sets differ between components")

    @property
    def provenance(self):
        return {"config_hash": config_hash(self.config),
                "seed": self.config.seed}


def tap_width(ex_config, feature_tap):
    return (ex_config.feature_dim if feature_tap == "penultimate"
            else ex_config.num_classes)


def _flatten_frames(corpus, input_size):
    images, labels = [], []
    hw = input_size[:2]
    for seq in corpus.sequences:
        for f in seq.frames:
            images.append(data.preprocess_frame(f.image, hw))
            labels.append(f.label)
    return np.stack(images), np.array(labels, dtype=np.int64)


def _sequence_batch(seq, input_size):
    hw = input_size[:2]
    return np.stack([data.preprocess_frame(f.image, hw) for f in seq.frames])


def sequence_features(pipeline_or_model, seq_or_frames, config=None,
                      mean=None, std=None):
    """Feature matrix for one sequence under a trained pipeline."""
    if isinstance(pipeline_or_model, TrainedPipeline):
        p = pipeline_or_model
        model, config = p.extractor_model, p.config
        mean, std = p.feature_mean, p.feature_std
    else:
        model = pipeline_or_model
    if isinstance(seq_or_frames, data.LabeledSequence):
        batch = _sequence_batch(seq_or_frames, config.extractor.input_size)
    else:
        batch = np.asarray(seq_or_frames, dtype=np.float64)
        if batch.ndim == 3:
            batch = batch[..., None]
    obs = extractor.extract_features(model, batch,
                                     feature_tap=config.feature_tap)
    if mean is not None:
        obs = crf.ObservationSequence((obs.features - mean) / std)
    return obs


def train_two_step(corpus, config):
    """Train extractor then CRF on `corpus`; fully deterministic in
    (corpus, config, config.seed)."""
    if corpus.label_set.K != config.extractor.num_classes:
        raise ValueError("extractor num_classes=%d but corpus has %d labels"
                         % (config.extractor.num_classes, corpus.label_set.K))

    # step 1: frame-wise extractor training
    try:
        images, frame_labels = _flatten_frames(corpus,
                                               config.extractor.input_size)
        ex_config = dataclasses.replace(config.extractor, seed=config.seed)
        model = extractor.ExtractorModel(ex_config)
        extractor.train_extractor(model, images, frame_labels, config.sgd,
                                  seed=config.seed + 1)
    except Exception as exc:
        raise RuntimeError("extractor training failed: %s" % exc) from exc

    # step 2: freeze, extract whole-sequence features, fit the CRF
    try:
        observations = [
            extractor.extract_features(
                model, _sequence_batch(seq, ex_config.input_size),
                feature_tap=config.feature_tap)
            for seq in corpus.sequences]
        mean = std = None
        if config.standardize_features:
            stacked = np.vstack([o.features for o in observations])
            mean = stacked.mean(axis=0)
            std = np.maximum(stacked.std(axis=0), 1e-8)
            observations = [
                crf.ObservationSequence((o.features - mean) / std)
                for o in observations]
        items = [(obs, crf.LabelSequence(seq.labels()))
                 for obs, seq in zip(observations, corpus.sequences)]
        dataset = crf.RegularizedDataset(items, sigma2=config.sigma2)
        init = crf.CrfModel.zeros(corpus.label_set,
                                  tap_width(ex_config, config.feature_tap))
        crf_model, report = optim.train_crf(dataset, init, config.optim)
    except RuntimeError:
        raise
    except Exception as exc:
        raise RuntimeError("CRF training failed: %s" % exc) from exc

    return TrainedPipeline(model, crf_model, corpus.label_set,
                           dataclasses.replace(config, extractor=ex_config),
                           feature_mean=mean, feature_std=std,
                           crf_report=report)


def predict_sequence(pipeline, frames):
    """Viterbi labeling of one frame sequence under the full cascade."""
    obs = sequence_features(pipeline, frames)
    if obs.d != pipeline.crf_model.d:
        raise ValueError("feature width %d does not match CRF d=%d"
                         % (obs.d, pipeline.crf_model.d))
    return crf.viterbi_decode(pipeline.crf_model, obs)


def predict_frames_softmax(model, frames, input_size=None):
    """No-CRF baseline: per-frame argmax of the extractor logits."""
    if isinstance(frames, data.LabeledSequence):
        frames = _sequence_batch(frames, input_size or
                                 model.config.input_size)
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 3:
        frames = frames[..., None]
    logits, _ = model.forward(frames, mode="infer")
    return crf.LabelSequence(np.argmax(logits, axis=1))
