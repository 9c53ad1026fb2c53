"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Each command writes into a fresh ``--out-dir`` together with a
``run_meta.txt`` file recording what is needed to repeat the run.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import shlex
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .bagstore import BagLabel, load_dataset, monte_carlo_split, synth_generate, write_dataset, write_split
from .config import (
    RunConfig,
    config_hash,
    format_train_config,
    parse_run_config,
    parse_synth_config,
    preset_text,
    read_text,
)
from .errors import DataError, InvalidConfig, IoFailure, MilError, NumericFailure
from .evalkit import (
    attention_export,
    threshold_metrics,
    write_attention,
    write_heatmap,
    write_history,
    write_metrics,
    write_occ_report,
    write_predictions,
)
from .model import forward, load_params, refine, save_params
from .occ import load_ocsvm, occ_bag_proportions, save_ocsvm
from .t3a import adapt_evaluate
from .trainer import _labeled, _require_both, evaluate_bags, train_fold

log = logging.getLogger("occmil")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed {text} is outside [0, 2^64)")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="occmil", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"occmil {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text, *flags):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out-dir", required=True, help="fresh directory for all outputs")
        if "config" in flags:
            p.add_argument("--config", help="key=value config file, or preset:<name>")
        if "manifest" in flags:
            p.add_argument("--manifest", help="bag manifest CSV")
        if "model" in flags:
            p.add_argument("--model", required=True, help="model checkpoint (.mbhp)")
        if "seed" in flags:
            p.add_argument("--seed", type=_u64, help="override the configured seed")
        if "folds" in flags:
            group = p.add_mutually_exclusive_group()
            group.add_argument("--fold", type=int, help="run a single fold")
            group.add_argument("--folds", type=int, help="number of folds to run")
        if "t3a" in flags:
            p.add_argument("--t3a", action="store_true", help="adapt the bag classifier at test time")
            p.add_argument("--t3a-c", type=int, help="templates kept per class")
        if "threshold" in flags:
            p.add_argument("--threshold", type=float, help="decision threshold on the positive probability")
        return p

    command("synth", "generate a synthetic dataset", "config", "seed")
    command("split", "write case-grouped train/val/test splits", "config", "manifest", "seed", "folds")
    command("train", "train and test on Monte Carlo folds", "config", "manifest", "seed", "folds", "t3a", "threshold")
    command("eval", "metrics of a trained model on labeled bags", "config", "manifest", "model", "t3a", "threshold")
    command("predict", "bag predictions of a trained model", "config", "manifest", "model", "t3a", "threshold")
    command("export-attention", "attention scores and PGM heatmaps", "manifest", "model")
    command("occ-report", "per-bag OCSVM instance proportions", "manifest", "model")
    return parser


# ---------------------------------------------------------------- helpers


def _fresh_dir(path: str) -> Path:
    out = Path(path)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise IoFailure(f"--out-dir {out}: exists and is not empty; outputs are write-once")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"--out-dir {out}: {exc}") from exc
    return out


def _config_text(args) -> tuple[str, str]:
    """(text, label) of --config; an absent flag means built-in defaults."""
    spec = getattr(args, "config", None)
    if spec is None:
        return "", "defaults"
    if spec.startswith("preset:"):
        return preset_text(spec[len("preset:"):]), spec
    return read_text(spec), spec


def _run_config(args) -> RunConfig:
    text, label = _config_text(args)
    run = parse_run_config(text, label)
    train = run.train
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "threshold", None) is not None:
        changes["threshold"] = args.threshold
    if getattr(args, "t3a", False):
        changes["t3a_enabled"] = True
    if getattr(args, "t3a_c", None) is not None:
        changes["t3a_C"] = args.t3a_c
    if changes:
        try:
            train = replace(train, **changes)
        except InvalidConfig as exc:
            raise UsageError(f"command-line override: {exc}") from None
    return replace(run, train=train)


def _manifest(args, run: Optional[RunConfig] = None) -> str:
    path = getattr(args, "manifest", None) or (run.manifest if run else None)
    if path is None:
        raise UsageError("--manifest is required (or set manifest= in the config)")
    return path


def _sha256(path) -> str:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc


def _write_meta(out: Path, argv: Sequence[str], args, **items) -> None:
    text, label = _config_text(args) if hasattr(args, "config") else ("", "none")
    lines = {
        "command": args.command,
        "argv": shlex.join(["occmil", *argv]),
        "version": __version__,
        "config": label,
        "config_hash": config_hash(text),
    }
    lines.update({k: v for k, v in items.items() if v is not None})
    body = "".join(f"{k}={v}\n" for k, v in lines.items())
    (out / "run_meta.txt").write_text(body, encoding="utf-8")


def _load_model(path: str):
    try:
        return load_params(path)
    except MilError as exc:
        raise type(exc)(f"--model: {exc}") from exc


def _fold_list(args, run: RunConfig) -> list[int]:
    if args.fold is not None:
        if args.fold < 0:
            raise UsageError("--fold must be >= 0")
        return [args.fold]
    n = args.folds if args.folds is not None else run.folds
    if n < 1:
        raise UsageError("--folds must be >= 1")
    return list(range(n))


def _labeled_bags(dataset, source: str):
    bags = [b for b in dataset.bags if b.label is not BagLabel.UNKNOWN]
    if not bags:
        raise DataError(f"{source}: no labeled bags")
    return bags


# ---------------------------------------------------------------- commands


def cmd_synth(args, argv) -> None:
    text, label = _config_text(args)
    cfg = parse_synth_config(text, label)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = _fresh_dir(args.out_dir)
    dataset = synth_generate(cfg)
    write_dataset(dataset, out)
    _write_meta(out, argv, args, seed=cfg.seed, n_bags=len(dataset.bags))


def cmd_split(args, argv) -> None:
    run = _run_config(args)
    manifest = _manifest(args, run)
    dataset = load_dataset(manifest)
    folds = _fold_list(args, run)
    out = _fresh_dir(args.out_dir)
    for fold in folds:
        write_split(monte_carlo_split(dataset, fold, run.train.seed, run.ratios), out / f"split_fold{fold}.csv")
    _write_meta(out, argv, args, seed=run.train.seed, manifest=manifest, manifest_hash=_sha256(manifest))


def cmd_train(args, argv) -> None:
    run = _run_config(args)
    cfg = run.train
    manifest = _manifest(args, run)
    truth = Path(manifest).with_name("truth.csv")
    dataset = load_dataset(manifest, truth if truth.exists() else None)
    folds = _fold_list(args, run)
    out = _fresh_dir(args.out_dir)
    rows = []
    for fold in folds:
        try:
            split = monte_carlo_split(dataset, fold, cfg.seed, run.ratios)
            model = train_fold(dataset, split, cfg)
            test_idx = _labeled(dataset, split.test_cases)
            _require_both(dataset, test_idx, "test")
            bags = [dataset.bags[i] for i in test_idx]
            raw = evaluate_bags(model, bags, t3a=False)
            t3a_labels, scores = None, raw
            if cfg.t3a_enabled:
                t3a_labels, scores = adapt_evaluate(model, bags, cfg.t3a_C)
            report = threshold_metrics(scores, [int(b.label) for b in bags], cfg.threshold)
        except MilError as exc:
            raise type(exc)(f"fold {fold}: {exc}") from exc
        log.info("fold %d: best epoch %d, test auroc %.4f", fold, model.best_epoch, report.auroc)
        rows.append((fold, report))
        write_split(split, out / f"split_fold{fold}.csv")
        write_history(out / f"history_fold{fold}.csv", model.history)
        save_params(model.params, out / f"model_fold{fold}.mbhp")
        save_ocsvm(model.ocsvm, out / f"model_fold{fold}.ocsvm")
        write_predictions(
            out / f"predictions_fold{fold}.csv",
            [
                (b.bag_id, s, int(s >= cfg.threshold), None if t3a_labels is None else t3a_labels[j])
                for j, (b, s) in enumerate(zip(bags, raw))
            ],
        )
    write_metrics(out / "metrics.csv", rows, summary=len(rows) > 1)
    (out / "config_effective.cfg").write_text(format_train_config(cfg), encoding="utf-8")
    _write_meta(
        out,
        argv,
        args,
        seed=cfg.seed,
        folds=",".join(map(str, folds)),
        ratios=",".join(map(repr, run.ratios)),
        manifest=manifest,
        manifest_hash=_sha256(manifest),
    )


def _model_run(args):
    run = _run_config(args)
    manifest = _manifest(args, run)
    dataset = load_dataset(manifest)
    params = _load_model(args.model)
    if params.dims[0] != dataset.feature_dim:
        raise DataError(f"--model {args.model}: expects {params.dims[0]}-dim features, {manifest} has {dataset.feature_dim}")
    return run.train, manifest, dataset, params


def cmd_eval(args, argv) -> None:
    cfg, manifest, dataset, params = _model_run(args)
    bags = _labeled_bags(dataset, manifest)
    labels = [int(b.label) for b in bags]
    out = _fresh_dir(args.out_dir)
    raw = np.array([forward(params, b).bag_prob[1] for b in bags])
    rows = [("raw", threshold_metrics(raw, labels, cfg.threshold))]
    t3a_labels = None
    if cfg.t3a_enabled:
        t3a_labels, t3a_scores = adapt_evaluate(params, bags, cfg.t3a_C)
        rows.append(("t3a", threshold_metrics(t3a_scores, labels, cfg.threshold)))
    write_metrics(out / "metrics.csv", rows, summary=False)
    write_predictions(
        out / "predictions.csv",
        [
            (b.bag_id, s, int(s >= cfg.threshold), None if t3a_labels is None else t3a_labels[j])
            for j, (b, s) in enumerate(zip(bags, raw))
        ],
    )
    _write_meta(out, argv, args, seed=cfg.seed, model=args.model, manifest=manifest, manifest_hash=_sha256(manifest))


def cmd_predict(args, argv) -> None:
    cfg, manifest, dataset, params = _model_run(args)
    bags = dataset.bags
    out = _fresh_dir(args.out_dir)
    raw = np.array([forward(params, b).bag_prob[1] for b in bags])
    t3a_labels = adapt_evaluate(params, bags, cfg.t3a_C)[0] if cfg.t3a_enabled else None
    write_predictions(
        out / "predictions.csv",
        [
            (b.bag_id, s, int(s >= cfg.threshold), None if t3a_labels is None else t3a_labels[j])
            for j, (b, s) in enumerate(zip(bags, raw))
        ],
    )
    _write_meta(out, argv, args, model=args.model, manifest=manifest, manifest_hash=_sha256(manifest))


def cmd_export_attention(args, argv) -> None:
    manifest = _manifest(args)
    dataset = load_dataset(manifest)
    params = _load_model(args.model)
    out = _fresh_dir(args.out_dir)
    reports = [attention_export(params, b) for b in dataset.bags]
    write_attention(out / "attention.csv", reports)
    heat = out / "heatmaps"
    for rep in reports:
        if rep.coords is not None:
            heat.mkdir(exist_ok=True)
            write_heatmap(heat / f"{rep.bag_id}.pgm", rep)
    _write_meta(out, argv, args, model=args.model, manifest=manifest, manifest_hash=_sha256(manifest))


def cmd_occ_report(args, argv) -> None:
    manifest = _manifest(args)
    dataset = load_dataset(manifest)
    params = _load_model(args.model)
    sidecar = Path(args.model).with_suffix(".ocsvm")
    state = load_ocsvm(sidecar)
    out = _fresh_dir(args.out_dir)
    rows = []
    for bag in dataset.bags:
        pos, neg = occ_bag_proportions(state, refine(params, bag.features))
        rows.append((bag.bag_id, bag.n_instances, pos, neg))
    write_occ_report(out / "occ_report.csv", rows)
    _write_meta(out, argv, args, model=args.model, ocsvm=str(sidecar), manifest=manifest, manifest_hash=_sha256(manifest))


COMMANDS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "export-attention": cmd_export_attention,
    "occ-report": cmd_occ_report,
}


def run(argv: Sequence[str]) -> int:
    argv = list(argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MilError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    return run(sys.argv[1:] if argv is None else argv)
