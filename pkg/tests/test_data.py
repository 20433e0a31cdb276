import json

import numpy as np
import pytest

from framechain.crf import LabelSequence, LabelSet, ObservationSequence
from framechain.data import (
    Corpus,
    CorpusError,
    FrameRecord,
    LabeledSequence,
    SynthConfig,
    class_prototype,
    cross_corpus_split,
    generate_synthetic_corpus,
    load_corpus,
    load_feature_sequence,
    preprocess_frame,
    resize_bilinear,
    save_corpus,
    save_feature_sequence,
    subject_independent_folds,
)


def small_synth(**kw):
    defaults = dict(num_subjects=4, sequences_per_subject=2, num_classes=3,
                    image_size=(8, 8), apex_noise=0.05, transition_frames=3,
                    apex_frames=2, seed=5)
    defaults.update(kw)
    return generate_synthetic_corpus(SynthConfig(**defaults))


class TestTypes:
    def test_pixel_range_enforced(self):
        with pytest.raises(CorpusError, match=r"\[0, 1\]"):
            FrameRecord(np.full((2, 2, 1), 1.5), 0, 0)

    def test_frame_indices_strictly_increasing(self):
        frames = [FrameRecord(np.zeros((2, 2, 1)), 0, 1),
                  FrameRecord(np.zeros((2, 2, 1)), 0, 1)]
        with pytest.raises(CorpusError, match="strictly increasing"):
            LabeledSequence(frames, "s0", "q0")

    def test_duplicate_sequence_ids(self):
        frames = [FrameRecord(np.zeros((2, 2, 1)), 0, 0)]
        seq = LabeledSequence(frames, "s0", "q0")
        with pytest.raises(CorpusError, match="duplicate"):
            Corpus("c", LabelSet(("a", "b")), [seq, seq])

    def test_label_out_of_range(self):
        frames = [FrameRecord(np.zeros((2, 2, 1)), 3, 0)]
        seq = LabeledSequence(frames, "s0", "q0")
        with pytest.raises(CorpusError, match="out of range"):
            Corpus("c", LabelSet(("a", "b")), [seq])


class TestManifestRoundTrip:
    def test_round_trip(self, tmp_path):
        corpus = small_synth()
        manifest = save_corpus(corpus, str(tmp_path / "corpus"))
        loaded = load_corpus(manifest)
        assert loaded.name == corpus.name
        assert loaded.label_set == corpus.label_set
        assert len(loaded.sequences) == len(corpus.sequences)
        for a, b in zip(loaded.sequences, corpus.sequences):
            assert a.sequence_id == b.sequence_id
            assert a.subject_id == b.subject_id
            assert np.array_equal(a.labels(), b.labels())
            # lossless up to the 16-bit quantization step
            assert np.max(np.abs(a.images() - b.images())) <= 0.5 / 65535
        # a second round trip is exact
        manifest2 = save_corpus(loaded, str(tmp_path / "corpus2"))
        again = load_corpus(manifest2)
        for a, b in zip(again.sequences, loaded.sequences):
            assert np.array_equal(a.images(), b.images())

    def test_two_frame_manifest(self, tmp_path):
        frames = [FrameRecord(np.full((4, 4, 1), 0.25), 0, 0),
                  FrameRecord(np.full((4, 4, 1), 0.75), 1, 1)]
        corpus = Corpus("mini", LabelSet(("a", "b")),
                        [LabeledSequence(frames, "s0", "q0")])
        loaded = load_corpus(save_corpus(corpus, str(tmp_path)))
        assert loaded.sequences[0].T == 2
        imgs = loaded.sequences[0].images()
        assert imgs.min() >= 0 and imgs.max() <= 1

    def test_empty_sequence_list(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps({"version": 1, "name": "x",
                                    "labels": ["a", "b"], "sequences": []}))
        with pytest.raises(CorpusError, match="empty corpus"):
            load_corpus(str(path))

    def test_missing_file(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps({
            "version": 1, "name": "x", "labels": ["a", "b"],
            "sequences": [{"sequence_id": "q", "subject_id": "s",
                           "frames": [{"image_path": "nope.png",
                                       "label_index": 0,
                                       "frame_index": 0}]}]}))
        with pytest.raises(CorpusError, match="missing frame file"):
            load_corpus(str(path))

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps({"version": 99, "name": "x",
                                    "labels": ["a"], "sequences": []}))
        with pytest.raises(CorpusError, match="version"):
            load_corpus(str(path))


class TestSyntheticGenerator:
    def test_determinism(self):
        a = small_synth()
        b = small_synth()
        for sa, sb in zip(a.sequences, b.sequences):
            assert np.array_equal(sa.images(), sb.images())
            assert np.array_equal(sa.labels(), sb.labels())

    def test_label_alpha_consistency_noiseless(self):
        cfg = SynthConfig(num_subjects=2, sequences_per_subject=2,
                          num_classes=3, image_size=(8, 8), apex_noise=0.0,
                          transition_frames=4, apex_frames=2,
                          subject_bias_scale=0.0, seed=1)
        corpus = generate_synthetic_corpus(cfg)
        alphas = np.concatenate([np.arange(4) / 4, np.ones(2),
                                 (np.arange(4) / 4)[::-1]])
        for seq in corpus.sequences:
            labels = seq.labels()
            c = labels.max()
            assert c > 0
            assert np.array_equal(labels != 0, alphas >= 0.5)

    def test_noiseless_apex_nearest_prototype(self):
        cfg = SynthConfig(num_subjects=3, sequences_per_subject=3,
                          num_classes=4, image_size=(8, 8), apex_noise=0.0,
                          transition_frames=2, apex_frames=2,
                          subject_bias_scale=0.02, seed=2)
        corpus = generate_synthetic_corpus(cfg)
        protos = np.stack([class_prototype(c, (8, 8)) for c in range(4)])
        for seq in corpus.sequences:
            c = seq.labels().max()
            apex = seq.frames[cfg.transition_frames].image[:, :, 0]
            dists = [np.sum((apex - p) ** 2) for p in protos]
            assert int(np.argmin(dists)) == c

    def test_instant_apex_boundary(self):
        cfg = SynthConfig(num_subjects=1, sequences_per_subject=1,
                          num_classes=2, image_size=(4, 4), apex_noise=0.0,
                          transition_frames=0, apex_frames=3, seed=3)
        corpus = generate_synthetic_corpus(cfg)
        seq = corpus.sequences[0]
        assert seq.T == 3
        assert np.all(seq.labels() == 1)

    def test_onset_style_ends_at_apex(self):
        cfg = SynthConfig(num_subjects=1, sequences_per_subject=1,
                          num_classes=2, image_size=(4, 4),
                          transition_frames=3, apex_frames=2,
                          style="onset", seed=4)
        seq = generate_synthetic_corpus(cfg).sequences[0]
        assert seq.T == 5
        assert seq.labels()[-1] != 0
        assert seq.labels()[0] == 0


class TestFolds:
    def assert_plan_valid(self, corpus, plan):
        all_ids = {s.sequence_id for s in corpus.sequences}
        subject_of = {s.sequence_id: s.subject_id for s in corpus.sequences}
        for train, val, test in plan.folds:
            assert train | val | test == all_ids
            assert not train & test and not train & val and not val & test
            assert not ({subject_of[i] for i in train}
                        & {subject_of[i] for i in test})
            assert not ({subject_of[i] for i in train}
                        & {subject_of[i] for i in val})

    def test_five_folds_ten_subjects(self):
        corpus = small_synth(num_subjects=10)
        plan = subject_independent_folds(corpus, 5, seed=0)
        self.assert_plan_valid(corpus, plan)
        subject_of = {s.sequence_id: s.subject_id for s in corpus.sequences}
        seen = {}
        for _, _, test in plan.folds:
            for subj in {subject_of[i] for i in test}:
                seen[subj] = seen.get(subj, 0) + 1
        assert all(v == 1 for v in seen.values())
        assert len(seen) == 10

    def test_single_fold(self):
        corpus = small_synth(num_subjects=10)
        plan = subject_independent_folds(corpus, 1, seed=0)
        assert len(plan.folds) == 1
        self.assert_plan_valid(corpus, plan)

    def test_too_few_subjects(self):
        corpus = small_synth(num_subjects=3)
        with pytest.raises(ValueError, match="3 subjects"):
            subject_independent_folds(corpus, 5)

    def test_randomized_disjointness(self):
        rng = np.random.default_rng(6)
        for trial in range(25):
            n = int(rng.integers(5, 15))
            corpus = small_synth(num_subjects=n, sequences_per_subject=1,
                                 seed=trial)
            k = int(rng.integers(1, min(n, 6) + 1))
            plan = subject_independent_folds(corpus, k, seed=trial)
            self.assert_plan_valid(corpus, plan)


class TestCrossCorpus:
    def test_identical_label_sets(self):
        a = small_synth(seed=1)
        b = generate_synthetic_corpus(SynthConfig(
            num_subjects=4, sequences_per_subject=2, num_classes=3,
            image_size=(8, 8), seed=2, name="other"))
        train, test = cross_corpus_split([a, b], "other")
        assert {s.sequence_id.split("/", 1)[1] for s in train.sequences} \
            == {s.sequence_id for s in a.sequences}
        assert test.label_set == b.label_set

    def test_label_intersection_drops_sequences(self):
        def mk(name, labels, per_seq_labels):
            seqs = []
            for i, labs in enumerate(per_seq_labels):
                frames = [FrameRecord(np.zeros((2, 2, 1)), lab, t)
                          for t, lab in enumerate(labs)]
                seqs.append(LabeledSequence(frames, "s%d" % i, "q%d" % i))
            return Corpus(name, LabelSet(labels), seqs)

        a = mk("A", ("neutral", "anger", "happy"), [[0, 2], [0, 1]])
        b = mk("B", ("neutral", "happy", "fear"), [[0, 1], [0, 2]])
        train, test = cross_corpus_split([a, b], "B")
        assert set(train.label_set.names) == {"neutral", "happy"}
        # one sequence from each corpus contains an unshared label
        assert len(train.sequences) == 1
        assert len(test.sequences) == 1
        remapped = train.sequences[0].labels()
        assert set(remapped) <= {0, 1}

    def test_unknown_name(self):
        a = small_synth()
        with pytest.raises(ValueError, match="unknown corpus"):
            cross_corpus_split([a, a], "nope")

    def test_no_shared_labels(self):
        frames = [FrameRecord(np.zeros((2, 2, 1)), 0, 0)]
        a = Corpus("A", LabelSet(("x", "y")),
                   [LabeledSequence(frames, "s", "q")])
        b = Corpus("B", LabelSet(("u", "v")),
                   [LabeledSequence(frames, "s", "q")])
        with pytest.raises(CorpusError, match="share no labels"):
            cross_corpus_split([a, b], "B")


class TestPreprocess:
    def test_identity_resize(self):
        img = np.random.default_rng(7).uniform(size=(6, 6, 1))
        assert np.array_equal(preprocess_frame(img, (6, 6)), img)

    def test_constant_image(self):
        out = preprocess_frame(np.full((3, 5, 1), 0.4), (7, 7))
        assert np.allclose(out, 0.4, atol=1e-12)

    def test_checkerboard_bilinear(self):
        board = np.array([[0.0, 1.0], [1.0, 0.0]])[:, :, None]
        out = resize_bilinear(board, (4, 4))[:, :, 0]
        # corner-aligned: corners preserved
        assert out[0, 0] == 0.0 and out[0, 3] == 1.0
        assert out[3, 0] == 1.0 and out[3, 3] == 0.0
        # direct formula: positions 0, 1/3, 2/3, 1 along each axis
        xs = np.linspace(0, 1, 4)
        expected = np.empty((4, 4))
        for i, y in enumerate(xs):
            for j, x in enumerate(xs):
                expected[i, j] = ((1 - y) * ((1 - x) * 0 + x * 1)
                                  + y * ((1 - x) * 1 + x * 0))
        assert np.allclose(out, expected, atol=1e-12)

    def test_zero_dimension_rejected(self):
        with pytest.raises(ValueError, match="zero-dimension"):
            resize_bilinear(np.empty((0, 3, 1)), (4, 4))


class TestFeatureInterchange:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        obs = ObservationSequence(rng.normal(size=(5, 3)))
        labels = LabelSequence(rng.integers(0, 4, size=5))
        path = str(tmp_path / "seq0.features")
        save_feature_sequence(path, obs, labels)
        obs2, labels2 = load_feature_sequence(path)
        assert np.array_equal(obs2.features, obs.features)
        assert labels2 == labels

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "bad.features"
        path.write_text("not a feature file\n")
        with pytest.raises(ValueError, match="not a feature interchange"):
            load_feature_sequence(str(path))

    def test_length_mismatch(self, tmp_path):
        obs = ObservationSequence(np.zeros((3, 2)))
        labels = LabelSequence(np.zeros(2, dtype=int))
        with pytest.raises(ValueError, match="length"):
            save_feature_sequence(str(tmp_path / "x"), obs, labels)
