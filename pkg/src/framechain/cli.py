"""Command-line entry points.

Subcommands:
  gen-synth     generate a synthetic corpus and write it as a manifest
  train         two-step training on a corpus manifest
  predict       label every sequence of a corpus with a trained model
  eval          score a predictions file against a truth manifest
  ablate-si     subject-independent k-fold ablation (with vs without CRF)
  ablate-cross  cross-corpus ablation
  crf-train     fit only the CRF on feature interchange files
  check         run the randomized property suites

Configs are JSON files; any CLI flag overrides its config counterpart.
Exit codes: 0 ok, 2 usage/config, 3 data, 4 model format, 5 check failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import json
import os
import sys

import numpy as np

from . import checks, crf, data, metrics, optim, pipeline
from .extractor import ExtractorConfig

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_MODEL = 4
EXIT_CHECK = 5

PREDICTIONS_VERSION = 1


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise SystemExitError(EXIT_USAGE, "cannot read %s: %s" % (path, exc))


class SystemExitError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _pipeline_config(args):
    raw = _load_json(args.config) if args.config else {}
    if "extractor" not in raw:
        raw["extractor"] = {"num_classes": 2}
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "sigma2", None) is not None:
        raw["sigma2"] = args.sigma2
    if getattr(args, "feature_tap", None) is not None:
        raw["feature_tap"] = args.feature_tap
    try:
        return raw, pipeline.TwoStepConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise SystemExitError(EXIT_USAGE, "bad config: %s" % exc)


def _config_for_corpus(raw, corpus):
    raw = dict(raw)
    ex = dict(raw.get("extractor", {}))
    ex["num_classes"] = corpus.label_set.K
    raw["extractor"] = ex
    return pipeline.TwoStepConfig.from_dict(raw)


def cmd_gen_synth(args):
    raw = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    for key in ("image_size",):
        if key in raw:
            raw[key] = tuple(raw[key])
    try:
        cfg = data.SynthConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise SystemExitError(EXIT_USAGE, "bad synth config: %s" % exc)
    corpus = data.generate_synthetic_corpus(cfg)
    manifest = data.save_corpus(corpus, args.out)
    print("wrote %s (%d sequences, %d frames)"
          % (manifest, len(corpus.sequences), corpus.num_frames()))
    return 0


def cmd_train(args):
    raw, _ = _pipeline_config(args)
    corpus = data.load_corpus(args.corpus)
    config = _config_for_corpus(raw, corpus)
    trained = pipeline.train_two_step(corpus, config)
    metrics.save_model(trained, args.out_model)
    report = trained.crf_report
    print("trained on %d sequences; CRF objective %.6f after %d iterations "
          "(converged=%s)" % (len(corpus.sequences), report.final_objective,
                              report.iterations_used, report.converged))
    print("model written to %s (config hash %s)"
          % (args.out_model, trained.provenance["config_hash"]))
    return 0


def cmd_predict(args):
    trained = metrics.load_model(args.model)
    corpus = data.load_corpus(args.corpus)
    if corpus.label_set.K != trained.label_set.K:
        raise metrics.ModelFormatError(
            "model has %d labels but corpus has %d"
            % (trained.label_set.K, corpus.label_set.K))
    out = {"version": PREDICTIONS_VERSION,
           "model_config_hash": trained.provenance["config_hash"],
           "labels": list(trained.label_set.names),
           "sequences": []}
    for seq in corpus.sequences:
        pred = pipeline.predict_sequence(trained, seq)
        out["sequences"].append({"sequence_id": seq.sequence_id,
                                 "labels": [int(v) for v in pred.labels]})
    data._atomic_write_text(args.out, json.dumps(out, indent=1))
    print("wrote predictions for %d sequences to %s"
          % (len(corpus.sequences), args.out))
    return 0


def cmd_eval(args):
    pred_doc = _load_json(args.pred)
    if pred_doc.get("version") != PREDICTIONS_VERSION:
        raise SystemExitError(EXIT_USAGE, "unsupported predictions version")
    truth_corpus = data.load_corpus(args.truth)
    truth_by_id = {s.sequence_id: crf.LabelSequence(s.labels())
                   for s in truth_corpus.sequences}
    preds, truths = [], []
    for entry in pred_doc["sequences"]:
        sid = entry["sequence_id"]
        if sid not in truth_by_id:
            raise SystemExitError(EXIT_DATA,
                                  "sequence %r missing from truth" % sid)
        preds.append(crf.LabelSequence(np.array(entry["labels"])))
        truths.append(truth_by_id[sid])
    result = metrics.evaluate(preds, truths,
                              num_classes=truth_corpus.label_set.K)
    print(json.dumps(result.to_dict(), indent=1))
    return 0


def _emit_report(report, out_path):
    print(report.summary())
    if out_path:
        data._atomic_write_text(out_path, json.dumps(report.to_dict(),
                                                     indent=1))
        print("report written to %s" % out_path)


def cmd_ablate_si(args):
    raw, _ = _pipeline_config(args)
    corpus = data.load_corpus(args.corpus)
    config = _config_for_corpus(raw, corpus)
    report = metrics.run_subject_independent(corpus, config, k=args.folds,
                                              seed=args.seed or 0)
    _emit_report(report, args.out)
    return 0


def cmd_ablate_cross(args):
    raw, _ = _pipeline_config(args)
    corpora = [data.load_corpus(p) for p in args.corpora]
    train, _ = data.cross_corpus_split(corpora, args.test_name)
    config = _config_for_corpus(raw, train)
    report = metrics.run_cross_corpus(corpora, args.test_name, config,
                                       seed=args.seed or 0)
    _emit_report(report, args.out)
    return 0


def cmd_crf_train(args):
    paths = sorted(glob.glob(os.path.join(args.features_dir, "*.features")))
    if not paths:
        raise SystemExitError(EXIT_DATA, "no *.features files in %s"
                              % args.features_dir)
    items = [data.load_feature_sequence(p) for p in paths]
    K = 1 + max(int(labels.labels.max()) for _, labels in items)
    K = max(K, 2)
    d = items[0][0].d
    label_set = crf.LabelSet(tuple("label%d" % i for i in range(K)))
    dataset = crf.RegularizedDataset(items, sigma2=args.sigma2)
    model, report = optim.train_crf(dataset, crf.CrfModel.zeros(label_set, d))
    doc = {"format_version": 1, "kind": "crf",
           "labels": list(label_set.names), "d": d,
           "sigma2": args.sigma2,
           "W_state": model.W_state.tolist(),
           "b_state": model.b_state.tolist(),
           "A_trans": model.A_trans.tolist(),
           "final_objective": report.final_objective,
           "iterations": report.iterations_used,
           "converged": report.converged}
    data._atomic_write_text(args.out_model, json.dumps(doc, indent=1))
    print("CRF trained on %d sequences (d=%d, K=%d); objective %.6f; "
          "model written to %s" % (len(items), d, K,
                                   report.final_objective, args.out_model))
    return 0


def cmd_check(args):
    try:
        if args.suite == "oracle":
            stats = checks.run_crf_oracle_suite()
            print("oracle suite passed: %r" % stats)
        else:
            stats = checks.run_crf_gradient_suite()
            print("CRF gradient suite passed: %r" % stats)
            stats = checks.run_extractor_gradient_suite()
            print("extractor gradient suite passed: %r" % stats)
    except AssertionError as exc:
        raise SystemExitError(EXIT_CHECK, "check failed: %s" % exc)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="framechain",
        description="Two-step sequence labeling: convolutional features "
                    "plus a linear-chain CRF.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic corpus")
    p.add_argument("--config", help="JSON synth config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="two-step training")
    p.add_argument("--corpus", required=True, help="corpus manifest path")
    p.add_argument("--config", help="JSON pipeline config")
    p.add_argument("--out-model", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--sigma2", type=float)
    p.add_argument("--feature-tap", choices=("penultimate", "logits"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="label a corpus with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against truth")
    p.add_argument("--pred", required=True, help="predictions JSON")
    p.add_argument("--truth", required=True, help="truth corpus manifest")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-si", help="subject-independent ablation")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int)
    p.add_argument("--sigma2", type=float)
    p.add_argument("--feature-tap", choices=("penultimate", "logits"))
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_ablate_si)

    p = sub.add_parser("ablate-cross", help="cross-corpus ablation")
    p.add_argument("--corpora", nargs="+", required=True,
                   help="corpus manifest paths")
    p.add_argument("--test-name", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--sigma2", type=float)
    p.add_argument("--feature-tap", choices=("penultimate", "logits"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate_cross)

    p = sub.add_parser("crf-train",
                       help="train only the CRF on feature files")
    p.add_argument("--features-dir", required=True)
    p.add_argument("--sigma2", type=float, default=10.0)
    p.add_argument("--out-model", required=True)
    p.set_defaults(func=cmd_crf_train)

    p = sub.add_parser("check", help="run the property suites")
    p.add_argument("--suite", choices=("oracle", "grad"), required=True)
    p.set_defaults(func=cmd_check)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExitError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return exc.code
    except data.CorpusError as exc:
        print("data error: %s" % exc, file=sys.stderr)
        return EXIT_DATA
    except metrics.ModelFormatError as exc:
        print("model error: %s" % exc, file=sys.stderr)
        return EXIT_MODEL
    except (ValueError, RuntimeError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
