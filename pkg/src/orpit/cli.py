"""Command-line front end.

Exit codes: 0 success, 2 usage error, 3 data or format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .dominant import dominant_eval, write_rows
from .metrics import evaluate_set
from .recursion import (ClassifierStop, FixedIterations, NumericError, OracleCount,
                        separate_recursive, stems_from_trace)
from .separator import SeparatorConfig, load_checkpoint, save_checkpoint
from .stopper import (ClassifierTrainConfig, build_stop_training_set, evaluate_binary_counting,
                      evaluate_count_baseline, load_classifier, predict_is_source,
                      save_classifier, train_binary, train_count_baseline)
from .synth import DatasetConfig, make_dataset, read_manifest
from .training import TrainConfig, fine_tune_recursive, train_orpit
from .wavio import FormatError, read_wav, write_wav

log = logging.getLogger("orpit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO,
              "debug": logging.DEBUG}


class UsageError(Exception):
    pass


def _int_map(text: str) -> dict[int, int]:
    try:
        return {int(k): int(v) for k, v in (p.split(":") for p in text.split(","))}
    except ValueError as exc:
        raise UsageError(f"expected N:COUNT[,N:COUNT...], got {text!r}") from exc


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated integer list, got {text!r}") from exc


def _stopper_factory(args):
    """Return ``make(sample_or_none) -> stopper`` for the --stopper choice."""
    spec = args.stopper
    if spec.startswith("fixed:"):
        try:
            j = int(spec.split(":", 1)[1])
            stopper = FixedIterations(j)
        except ValueError as exc:
            raise UsageError(f"bad --stopper {spec!r}: {exc}") from exc
        return lambda sample: stopper
    if spec == "oracle":
        def make(sample):
            if sample is None:
                raise UsageError("--stopper oracle needs reference sources (use evaluate)")
            return OracleCount(sample.n)
        return make
    if spec == "classifier":
        if not args.classifier:
            raise UsageError("--stopper classifier needs --classifier")
        clf = load_classifier(args.classifier)
        if clf.head != "binary":
            raise UsageError("--classifier must hold a binary stop classifier")
        stopper = ClassifierStop(lambda w: predict_is_source(clf, w), args.threshold)
        return lambda sample: stopper
    raise UsageError(f"unknown --stopper {spec!r}")


STEM_PEAK = 0.9


def _writable(stem):
    """Stem levels are arbitrary; shrink any stem that would clip on 16-bit output."""
    peak = float(np.max(np.abs(stem.samples)))
    if peak > 1.0:
        log.info("rescaling stem with peak %.3g to %.1f", peak, STEM_PEAK)
        return stem.with_samples(stem.samples * (STEM_PEAK / peak))
    return stem


def _load_model(args):
    params = load_checkpoint(args.model)
    if getattr(args, "segment_len", None):
        cfg = dataclasses.replace(params.config, segment_len=args.segment_len)
        try:
            cfg.validate()
        except ValueError as exc:
            raise UsageError(f"bad --segment-len: {exc}") from exc
        params = dataclasses.replace(params, config=cfg)
    return params


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    cfg = DatasetConfig(counts=_int_map(args.counts), duration=args.duration, seed=args.seed,
                        split=args.split)
    manifest = make_dataset(cfg, args.out_dir)
    print(f"wrote {len(manifest)} mixtures to {args.out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    manifest = read_manifest(args.manifest)
    if args.mask_layers < 1:
        raise UsageError("--mask-layers must be >= 1")
    model = SeparatorConfig(n_basis=args.n_basis, mask_channels=args.mask_channels,
                            mask_layers=args.mask_layers,
                            dilations=tuple(2 ** i for i in range(args.mask_layers)))
    ratio = {2: 0.5, 3: 0.5}
    ns = {r.n for r in manifest.records}
    if ns == {2} or ns == {3}:
        ratio = {ns.pop(): 1.0}
    cfg = TrainConfig(epochs=args.epochs, seed=args.seed, lr=args.lr, model=model, n_ratio=ratio,
                      checkpoint_dir=args.out_dir, checkpoint_every=args.checkpoint_every)
    params, logbook = train_orpit(manifest, cfg)
    save_checkpoint(params, args.out)
    if args.report:
        logbook.write_csv(args.report)
    print(f"saved {args.out} (best epoch {logbook.best_epoch})")
    return EXIT_OK


def cmd_finetune(args) -> int:
    params = load_checkpoint(args.model)
    manifest = read_manifest(args.manifest)
    cfg = TrainConfig(epochs=args.epochs, seed=args.seed, n_ratio={3: 1.0},
                      stop_grad_recursion=args.stop_grad, model=params.config)
    params, logbook = fine_tune_recursive(params, manifest, cfg)
    save_checkpoint(params, args.out)
    if args.report:
        logbook.write_csv(args.report)
    print(f"saved {args.out}")
    return EXIT_OK


def cmd_separate(args) -> int:
    params = _load_model(args)
    stopper = _stopper_factory(args)(None)
    wav = read_wav(args.inp)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trace = separate_recursive(params, wav, stopper)
    stems = stems_from_trace(trace)
    paths = [out / f"stem_{k}.wav" for k in range(1, len(stems) + 1)]
    clash = [p for p in paths if p.exists()]
    if clash and not args.force:
        raise UsageError(f"{clash[0]} exists; pass --force to overwrite")
    for p, s in zip(paths, stems):
        write_wav(p, _writable(s))
    trace.write_json(out / "trace.json", [p.name for p in paths])
    print(f"estimated count {trace.estimated_count}; wrote {len(stems)} stems to {out}")
    return EXIT_OK


def cmd_count(args) -> int:
    params = _load_model(args)
    clf = load_classifier(args.classifier)
    if args.inp:
        trace = separate_recursive(params, read_wav(args.inp),
                                   ClassifierStop(lambda w: predict_is_source(clf, w), args.threshold))
        print(trace.estimated_count)
        if args.report:
            trace.write_json(args.report)
        return EXIT_OK
    if not args.manifest:
        raise UsageError("count needs --in or --manifest")
    result = evaluate_binary_counting(params, clf, read_manifest(args.manifest), args.threshold)
    summary = {"accuracy": result.accuracy, "per_class": result.per_class,
               "confusion": result.confusion.tolist()}
    print(json.dumps(summary))
    if args.report:
        Path(args.report).write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    params = _load_model(args)
    make = _stopper_factory(args)

    def separate(sample, _):
        return stems_from_trace(separate_recursive(params, sample.mixture, make(sample)))

    report = evaluate_set(read_manifest(args.manifest), separate, jobs=args.jobs)
    if args.report:
        report.write_csv(args.report)
        report.write_json(Path(args.report).with_suffix(".json"))
    print(json.dumps(report.summary()))
    return EXIT_OK


def cmd_dominant_eval(args) -> int:
    params = _load_model(args)
    rows = dominant_eval(params, _int_list(args.interferers), args.per_case, args.seed)
    if args.report:
        write_rows(rows, args.report)
    for r in rows:
        print(f"{r.interferers}\t{r.mixture_si_snr_db:.2f}\t{r.extracted_si_snr_db:.2f}")
    return EXIT_OK


def cmd_train_stopper(args) -> int:
    params = load_checkpoint(args.model)
    fs = build_stop_training_set(params, read_manifest(args.manifest), seed=args.seed)
    clf = train_binary(fs, ClassifierTrainConfig(epochs=args.epochs), seed=args.seed)
    save_classifier(clf, args.out)
    print(f"saved {args.out} (validation accuracy {clf.val_accuracy:.3f})")
    return EXIT_OK


def cmd_train_counter(args) -> int:
    clf = train_count_baseline(read_manifest(args.manifest), args.k_max,
                               ClassifierTrainConfig(epochs=args.epochs), seed=args.seed)
    save_classifier(clf, args.out)
    if args.report:
        result = evaluate_count_baseline(clf, read_manifest(args.report_manifest or args.manifest))
        Path(args.report).write_text(json.dumps({
            "accuracy": result.accuracy, "per_class": result.per_class,
            "confusion": result.confusion.tolist()}, indent=2) + "\n", encoding="utf-8")
    print(f"saved {args.out} (validation accuracy {clf.val_accuracy:.3f})")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="orpit", description="Recursive one-and-rest source separation.")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, fn, help_text):
        s = sub.add_parser(name, help=help_text)
        s.set_defaults(func=fn)
        s.add_argument("--seed", type=int, default=0)
        return s

    s = cmd("synth-data", cmd_synth_data, "write a synthetic mixture dataset")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--counts", default="2:100,3:100", help="N:COUNT pairs, e.g. 2:1000,3:1000")
    s.add_argument("--duration", type=float, default=1.0)
    s.add_argument("--split", default="train")

    s = cmd("train", cmd_train, "train a separator with the one-and-rest loss")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="checkpoint to write")
    s.add_argument("--out-dir", help="directory for periodic checkpoints")
    s.add_argument("--checkpoint-every", type=int, default=0)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--n-basis", type=int, default=64)
    s.add_argument("--mask-channels", type=int, default=64)
    s.add_argument("--mask-layers", type=int, default=4, help="dilations double per layer from 1")
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--report", help="per-epoch CSV log")

    s = cmd("finetune", cmd_finetune, "recursive fine-tuning on 3-source mixtures")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, default=5)
    s.add_argument("--stop-grad", action="store_true", help="treat the step-1 residual as constant")
    s.add_argument("--report")

    for name, fn, text in (("separate", cmd_separate, "separate one WAV file into stems"),
                           ("evaluate", cmd_evaluate, "score a manifest")):
        s = cmd(name, fn, text)
        s.add_argument("--model", required=True)
        s.add_argument("--stopper", default="oracle" if name == "evaluate" else "classifier",
                       help="fixed:J, oracle or classifier")
        s.add_argument("--classifier")
        s.add_argument("--threshold", type=float, default=0.5)
        s.add_argument("--segment-len", type=int)
        if name == "separate":
            s.add_argument("--in", dest="inp", required=True)
            s.add_argument("--out-dir", required=True)
            s.add_argument("--force", action="store_true")
        else:
            s.add_argument("--manifest", required=True)
            s.add_argument("--report")
            s.add_argument("--jobs", type=int, default=1)

    s = cmd("count", cmd_count, "estimate source counts with the stop classifier")
    s.add_argument("--model", required=True)
    s.add_argument("--classifier", required=True)
    s.add_argument("--in", dest="inp")
    s.add_argument("--manifest")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--segment-len", type=int)
    s.add_argument("--report")

    s = cmd("dominant-eval", cmd_dominant_eval, "dominant-source extraction experiment")
    s.add_argument("--model", required=True)
    s.add_argument("--interferers", default="1,5,10")
    s.add_argument("--per-case", type=int, default=50)
    s.add_argument("--segment-len", type=int)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--report")

    s = cmd("train-stopper", cmd_train_stopper, "train the binary stop classifier")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, default=20)

    s = cmd("train-counter", cmd_train_counter, "train the multiclass count baseline")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--k-max", type=int, default=3)
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--report")
    s.add_argument("--report-manifest", help="manifest to score for --report")
    return p


def _configure_logging() -> None:
    level = LOG_LEVELS.get(os.environ.get("ORPIT_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s")


def run(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        np.seterr(all="ignore")
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"orpit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"orpit: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError, ValueError) as exc:
        print(f"orpit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
