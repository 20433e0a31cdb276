"""Corpora: ingestion, synthetic generation, split protocols, preprocessing.

A corpus is a set of labeled frame sequences tagged with subject identity.
Real corpora are described by a JSON manifest pointing at lossless PNG
frames; the synthetic generator produces sequences that ramp from a
neutral prototype image to a per-class apex prototype (and back, in the
round-trip style), with per-subject bias so that subject-disjoint splits
actually matter.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .crf import LabelSet

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
PNG_SCALE = 65535  # frames are stored as 16-bit grayscale PNG


class CorpusError(ValueError):
    """Raised for malformed manifests or corpus contents."""


@dataclass(frozen=True)
class FrameRecord:
    image: np.ndarray   # H x W x C in [0, 1]
    label: int
    frame_index: int

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim == 2:
            img = img[:, :, None]
        if img.ndim != 3:
            raise CorpusError("frame image must be H x W x C, got shape %r"
                              % (img.shape,))
        if img.min() < 0 or img.max() > 1:
            raise CorpusError("pixel values must lie in [0, 1]")
        if self.label < 0:
            raise CorpusError("negative label index")
        object.__setattr__(self, "image", img)


@dataclass(frozen=True)
class LabeledSequence:
    frames: tuple
    subject_id: str
    sequence_id: str

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise CorpusError("sequence %r has no frames" % self.sequence_id)
        idx = [f.frame_index for f in frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise CorpusError("frame indices must be strictly increasing in "
                              "sequence %r" % self.sequence_id)
        object.__setattr__(self, "frames", frames)

    @property
    def T(self):
        return len(self.frames)

    def labels(self):
        return np.array([f.label for f in self.frames], dtype=np.int64)

    def images(self):
        return np.stack([f.image for f in self.frames])


@dataclass(frozen=True)
class Corpus:
    name: str
    label_set: LabelSet
    sequences: tuple

    def __post_init__(self):
        sequences = tuple(self.sequences)
        if not sequences:
            raise CorpusError("empty corpus")
        ids = [s.sequence_id for s in sequences]
        if len(set(ids)) != len(ids):
            raise CorpusError("duplicate sequence ids")
        K = self.label_set.K
        for seq in sequences:
            for f in seq.frames:
                if f.label >= K:
                    raise CorpusError(
                        "label %d out of range for %d classes in sequence %r"
                        % (f.label, K, seq.sequence_id))
        object.__setattr__(self, "sequences", sequences)

    def subjects(self):
        return sorted({s.subject_id for s in self.sequences})

    def num_frames(self):
        return sum(s.T for s in self.sequences)


@dataclass(frozen=True)
class SplitPlan:
    """Per-fold (train, validation, test) sequence-id sets."""

    folds: tuple

    def __post_init__(self):
        object.__setattr__(self, "folds", tuple(
            (frozenset(tr), frozenset(va), frozenset(te))
            for tr, va, te in self.folds))


# ---------------------------------------------------------------------------
# manifest ingestion


def save_corpus(corpus, directory):
    """Write a corpus as 16-bit grayscale PNG frames plus a JSON manifest.

    Returns the manifest path. Pixels are quantized to 1/65535 steps;
    multi-channel images are stored one PNG per channel stack (RGB for
    C=3, 8-bit).
    """
    os.makedirs(directory, exist_ok=True)
    entries = []
    for seq in corpus.sequences:
        frame_entries = []
        for f in seq.frames:
            fname = "%s_f%04d.png" % (seq.sequence_id, f.frame_index)
            path = os.path.join(directory, fname)
            img = f.image
            if img.shape[2] == 1:
                arr = np.round(img[:, :, 0] * PNG_SCALE).astype(np.uint16)
                Image.fromarray(arr).save(path)
            elif img.shape[2] == 3:
                arr = np.round(img * 255).astype(np.uint8)
                Image.fromarray(arr, mode="RGB").save(path)
            else:
                raise CorpusError("only 1- or 3-channel frames can be saved, "
                                  "got %d channels" % img.shape[2])
            frame_entries.append({"image_path": fname,
                                  "label_index": int(f.label),
                                  "frame_index": int(f.frame_index)})
        entries.append({"sequence_id": seq.sequence_id,
                        "subject_id": seq.subject_id,
                        "frames": frame_entries})
    manifest = {"version": MANIFEST_VERSION,
                "name": corpus.name,
                "labels": list(corpus.label_set.names),
                "sequences": entries}
    manifest_path = os.path.join(directory, "manifest.json")
    _atomic_write_text(manifest_path, json.dumps(manifest, indent=1))
    return manifest_path


def load_corpus(manifest_path):
    """Load a corpus from a JSON manifest; frames normalized to [0, 1]."""
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CorpusError("cannot read manifest %s: %s"
                          % (manifest_path, exc)) from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise CorpusError("unsupported manifest version %r"
                          % manifest.get("version"))
    for key in ("name", "labels", "sequences"):
        if key not in manifest:
            raise CorpusError("manifest missing %r field" % key)
    if not manifest["sequences"]:
        raise CorpusError("empty corpus")
    label_set = LabelSet(tuple(manifest["labels"]))
    base = os.path.dirname(os.path.abspath(manifest_path))
    sequences = []
    for entry in manifest["sequences"]:
        frames = []
        for fe in entry["frames"]:
            path = os.path.join(base, fe["image_path"])
            if not os.path.exists(path):
                raise CorpusError("missing frame file %s" % path)
            img = _load_png(path)
            label = int(fe["label_index"])
            if label >= label_set.K:
                raise CorpusError("label %d out of range in %s"
                                  % (label, entry["sequence_id"]))
            frames.append(FrameRecord(img, label, int(fe["frame_index"])))
        sequences.append(LabeledSequence(frames, entry["subject_id"],
                                         entry["sequence_id"]))
    return Corpus(manifest["name"], label_set, sequences)


def _load_png(path):
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.dtype == np.uint16 or img.mode == "I;16" or img.mode == "I":
        return (arr.astype(np.float64) / PNG_SCALE)[:, :, None]
    if arr.ndim == 2:
        return (arr.astype(np.float64) / 255.0)[:, :, None]
    return arr.astype(np.float64)[:, :, :3] / 255.0


def _atomic_write_text(path, text):
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic expression-like corpus.

    Label 0 is the neutral state. Each sequence blends a neutral
    prototype toward a class prototype with coefficient alpha ramping
    over `transition_frames`, holds the apex for `apex_frames`, and (in
    'roundtrip' style) ramps back down. Frames with alpha >= 0.5 carry
    the class label, everything else is neutral.
    """

    num_subjects: int = 30
    sequences_per_subject: int = 10
    num_classes: int = 5
    image_size: tuple = (32, 32)
    apex_noise: float = 0.35
    transition_frames: int = 6
    apex_frames: int = 4
    style: str = "roundtrip"        # 'roundtrip' (up-down) or 'onset' (up)
    subject_bias_scale: float = 0.1
    seed: int = 0
    name: str = "synthetic"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2 (label 0 is neutral)")
        if self.num_subjects < 1 or self.sequences_per_subject < 1:
            raise ValueError("need at least one subject and one sequence")
        if self.transition_frames < 0:
            raise ValueError("transition_frames must be >= 0")
        if self.apex_frames < 1:
            raise ValueError("apex_frames must be >= 1")
        if self.apex_noise < 0:
            raise ValueError("apex_noise must be >= 0")
        if self.style not in ("roundtrip", "onset"):
            raise ValueError("style must be 'roundtrip' or 'onset'")


_PROTOTYPE_SEED = 91760  # class prototypes are shared across corpora


def _smooth_field(rng, size, grid=4, lo=0.0, hi=1.0):
    """Low-frequency random image: coarse grid upsampled bilinearly."""
    coarse = rng.uniform(lo, hi, size=(grid, grid))
    return resize_bilinear(coarse[:, :, None], size)[:, :, 0]


def class_prototype(label, image_size):
    """Deterministic per-class prototype image, independent of corpus."""
    rng = np.random.default_rng([_PROTOTYPE_SEED, label,
                                 image_size[0], image_size[1]])
    return _smooth_field(rng, image_size, lo=0.2, hi=0.8)


def _alpha_ramp(cfg):
    tf = cfg.transition_frames
    up = np.arange(tf) / tf if tf > 0 else np.empty(0)
    hold = np.ones(cfg.apex_frames)
    if cfg.style == "roundtrip":
        return np.concatenate([up, hold, up[::-1]])
    return np.concatenate([up, hold])


def generate_synthetic_corpus(cfg):
    """Build a corpus per `SynthConfig`; identical seeds give identical
    corpora bit for bit."""
    rng = np.random.default_rng(cfg.seed)
    label_names = ["neutral"] + ["class%d" % c
                                 for c in range(1, cfg.num_classes)]
    label_set = LabelSet(tuple(label_names))
    neutral = class_prototype(0, cfg.image_size)
    prototypes = [class_prototype(c, cfg.image_size)
                  for c in range(cfg.num_classes)]
    alphas = _alpha_ramp(cfg)

    sequences = []
    for s in range(cfg.num_subjects):
        subject_id = "subj%03d" % s
        bias_rng = np.random.default_rng([cfg.seed, 7, s])
        bias = cfg.subject_bias_scale * (
            _smooth_field(bias_rng, cfg.image_size, grid=2) * 2.0 - 1.0)
        for q in range(cfg.sequences_per_subject):
            c = int(rng.integers(1, cfg.num_classes))
            frames = []
            for t, alpha in enumerate(alphas):
                img = (1 - alpha) * neutral + alpha * prototypes[c] + bias
                if cfg.apex_noise > 0:
                    # low-frequency distortion, independent per frame:
                    # unlike pixel noise it does not average out spatially,
                    # so single frames stay genuinely ambiguous
                    img = img + cfg.apex_noise * (
                        _smooth_field(rng, cfg.image_size) * 2.0 - 1.0)
                img = np.clip(img, 0.0, 1.0)
                label = c if alpha >= 0.5 else 0
                frames.append(FrameRecord(img[:, :, None], label, t))
            sequences.append(LabeledSequence(
                frames, subject_id, "%s_seq%03d" % (subject_id, q)))
    return Corpus(cfg.name, label_set, sequences)


# ---------------------------------------------------------------------------
# split protocols


def subject_independent_folds(corpus, k, seed=0):
    """k-fold plan with subject-disjoint train/validation/test sets.

    Subjects are shuffled by `seed` and dealt round-robin into k groups;
    fold i tests on group i, takes roughly 10% of the remaining subjects
    for validation, and trains on the rest. k=1 yields a single
    80/10/10-style holdout.
    """
    subjects = corpus.subjects()
    if len(subjects) < k:
        raise ValueError("corpus has %d subjects but %d folds requested"
                         % (len(subjects), k))
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    by_subject = {}
    for seq in corpus.sequences:
        by_subject.setdefault(seq.subject_id, []).append(seq.sequence_id)

    def ids(subject_list):
        return frozenset(sid for s in subject_list for sid in by_subject[s])

    tenth = max(1, round(0.1 * len(order)))
    folds = []
    if k == 1:
        test, val, train = (order[:tenth], order[tenth:2 * tenth],
                            order[2 * tenth:])
        folds.append((ids(train), ids(val), ids(test)))
    else:
        groups = [order[i::k] for i in range(k)]
        for i in range(k):
            test = groups[i]
            rest = [s for s in order if s not in test]
            val, train = rest[:tenth], rest[tenth:]
            folds.append((ids(train), ids(val), ids(test)))
    return SplitPlan(tuple(folds))


def restrict_to_sequences(corpus, sequence_ids):
    seqs = [s for s in corpus.sequences if s.sequence_id in sequence_ids]
    return Corpus(corpus.name, corpus.label_set, seqs)


def cross_corpus_split(corpora, test_name):
    """Train on every corpus but `test_name`, test on it.

    Label sets are reconciled by name intersection (ordered as in the
    test corpus); sequences containing labels outside the shared set are
    dropped and the drop count logged.
    """
    names = [c.name for c in corpora]
    if test_name not in names:
        raise ValueError("unknown corpus %r; have %r" % (test_name, names))
    if len(corpora) < 2:
        raise ValueError("cross-corpus evaluation needs >= 2 corpora")
    test_corpus = corpora[names.index(test_name)]
    shared = set(test_corpus.label_set.names)
    for c in corpora:
        shared &= set(c.label_set.names)
    if not shared:
        raise CorpusError("corpora share no labels")
    shared_names = tuple(n for n in test_corpus.label_set.names
                         if n in shared)
    shared_set = LabelSet(shared_names)

    def remap(corpus):
        mapping = {}
        for old, name in enumerate(corpus.label_set.names):
            if name in shared:
                mapping[old] = shared_names.index(name)
        kept, dropped = [], 0
        for seq in corpus.sequences:
            if all(f.label in mapping for f in seq.frames):
                frames = [FrameRecord(f.image, mapping[f.label],
                                      f.frame_index) for f in seq.frames]
                kept.append(LabeledSequence(frames,
                                            "%s/%s" % (corpus.name,
                                                       seq.subject_id),
                                            "%s/%s" % (corpus.name,
                                                       seq.sequence_id)))
            else:
                dropped += 1
        if dropped:
            log.info("dropped %d sequences from %s with labels outside the "
                     "shared set", dropped, corpus.name)
        return kept, dropped

    train_seqs = []
    for c in corpora:
        if c.name == test_name:
            continue
        kept, _ = remap(c)
        train_seqs.extend(kept)
    test_seqs, _ = remap(test_corpus)
    if not train_seqs or not test_seqs:
        raise CorpusError("label reconciliation left an empty split")
    train = Corpus("train(-%s)" % test_name, shared_set, train_seqs)
    test = Corpus(test_name, shared_set, test_seqs)
    return train, test


# ---------------------------------------------------------------------------
# preprocessing


def resize_bilinear(image, target_size):
    """Corner-aligned bilinear resize of an H x W x C image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    H, W, C = image.shape
    if H < 1 or W < 1:
        raise ValueError("cannot resize a zero-dimension image")
    th, tw = target_size
    if th < 1 or tw < 1:
        raise ValueError("target size must be positive")
    ys = np.linspace(0, H - 1, th) if th > 1 else np.zeros(1)
    xs = np.linspace(0, W - 1, tw) if tw > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    out = ((1 - wy) * (1 - wx) * image[np.ix_(y0, x0)]
           + (1 - wy) * wx * image[np.ix_(y0, x1)]
           + wy * (1 - wx) * image[np.ix_(y1, x0)]
           + wy * wx * image[np.ix_(y1, x1)])
    return out


def preprocess_frame(image, target_size):
    """Resize to the extractor input grid, clamped to [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.shape[:2] == tuple(target_size):
        out = image
    else:
        out = resize_bilinear(image, target_size)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# feature-sequence interchange files

FEATURE_FILE_VERSION = 1


def save_feature_sequence(path, obs, labels):
    """Write one sequence of features + labels as a text interchange file.

    Header: '# framechain-features v1', then 'T d', then the label row,
    then T whitespace-separated feature rows with full float precision.
    """
    if labels.T != obs.T:
        raise ValueError("labels and features disagree on length")
    lines = ["# framechain-features v%d" % FEATURE_FILE_VERSION,
             "%d %d" % (obs.T, obs.d),
             " ".join(str(int(v)) for v in labels.labels)]
    for row in obs.features:
        lines.append(" ".join(repr(float(v)) for v in row))
    _atomic_write_text(path, "\n".join(lines) + "\n")


def load_feature_sequence(path):
    """Read a feature interchange file; returns (ObservationSequence,
    LabelSequence)."""
    from .crf import LabelSequence, ObservationSequence

    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("# framechain-features v"):
        raise ValueError("%s is not a feature interchange file" % path)
    version = int(lines[0].rsplit("v", 1)[1])
    if version != FEATURE_FILE_VERSION:
        raise ValueError("unsupported feature file version %d" % version)
    T, d = (int(v) for v in lines[1].split())
    labels = np.array([int(v) for v in lines[2].split()])
    if labels.shape != (T,):
        raise ValueError("label row length %d does not match T=%d"
                         % (labels.shape[0], T))
    rows = [np.array([float(v) for v in ln.split()]) for ln in lines[3:]]
    feats = np.stack(rows) if rows else np.empty((0, d))
    if feats.shape != (T, d):
        raise ValueError("feature block shape %r does not match header "
                         "(%d, %d)" % (feats.shape, T, d))
    return ObservationSequence(feats), LabelSequence(labels)
