"""Metrics, attention export and report writers."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, SingleClass

METRIC_COLUMNS = ["fold", "auroc", "accuracy", "precision", "recall", "f1", "threshold", "n_pos", "n_neg", "recall_pos"]


def _split_labels(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape:
        raise DataError(f"{scores.shape[0]} scores for {labels.shape[0]} labels")
    n_pos = int((labels == 1).sum())
    if n_pos == 0 or n_pos == len(labels):
        raise SingleClass("metrics need at least one positive and one negative label")
    return scores, labels


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks, tied values sharing the mean of their positions."""
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    # Boundaries of runs of equal values.
    starts = np.flatnonzero(np.r_[True, sx[1:] != sx[:-1]])
    ends = np.r_[starts[1:], len(sx)]
    run_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(len(x))
    ranks[order] = np.repeat(run_rank, ends - starts)
    return ranks


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with ties counted one half."""
    scores, labels = _split_labels(scores, labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    rank_sum = average_ranks(scores)[pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class MetricsReport:
    auroc: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    threshold: float
    n_pos: int
    n_neg: int
    recall_pos: float

    def row(self, fold) -> list:
        return [fold, self.auroc, self.accuracy, self.precision, self.recall, self.f1, self.threshold, self.n_pos, self.n_neg, self.recall_pos]


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def threshold_metrics(scores, labels, threshold: float) -> MetricsReport:
    """Micro accuracy; precision, recall and F1 averaged over both class views.

    A sample is predicted positive when its score is >= threshold.
    """
    scores, labels = _split_labels(scores, labels)
    pred = (scores >= threshold).astype(np.int64)
    per_class = []
    for c in (0, 1):
        tp = int(((pred == c) & (labels == c)).sum())
        prec = _ratio(tp, int((pred == c).sum()))
        rec = _ratio(tp, int((labels == c).sum()))
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        per_class.append((prec, rec, f1))
    prec, rec, f1 = (float(np.mean([pc[k] for pc in per_class])) for k in range(3))
    n_pos = int(labels.sum())
    return MetricsReport(
        auroc=auroc(scores, labels),
        accuracy=float((pred == labels).mean()),
        precision=prec,
        recall=rec,
        f1=f1,
        threshold=float(threshold),
        n_pos=n_pos,
        n_neg=len(labels) - n_pos,
        recall_pos=per_class[1][1],
    )


def summarize(reports: Sequence[MetricsReport]) -> tuple[list[float], list[float]]:
    """Mean and population std (ddof=0) of every numeric metric column."""
    table = np.array([r.row(0)[1:] for r in reports], dtype=np.float64)
    return table.mean(axis=0).tolist(), table.std(axis=0).tolist()


def write_metrics(path, rows: Sequence[tuple[object, MetricsReport]], summary: bool = True) -> None:
    """Metrics CSV; with ``summary`` a ``mean`` row and a ``std_pop`` row follow the folds."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for fold, rep in rows:
            w.writerow(rep.row(fold))
        if summary and rows:
            mean, std = summarize([rep for _, rep in rows])
            w.writerow(["mean", *mean])
            w.writerow(["std_pop", *std])


def write_history(path, history) -> None:
    """Per-epoch CSV; pseudo-label precision columns appear when any epoch has them."""
    with_pl = any(rec.pl_precision_pos is not None or rec.pl_precision_neg is not None for rec in history)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_auroc"] + (["pl_precision_pos", "pl_precision_neg"] if with_pl else []))
        for rec in history:
            row = [rec.epoch, rec.train_loss, rec.val_auroc]
            if with_pl:
                row += ["" if v is None else v for v in (rec.pl_precision_pos, rec.pl_precision_neg)]
            w.writerow(row)


# ---------------------------------------------------------------- attention


@dataclass
class AttentionReport:
    bag_id: str
    raw: np.ndarray
    minmax: np.ndarray
    top10: np.ndarray  # bool mask
    coords: Optional[np.ndarray] = None


def minmax_normalize(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def top_fraction_mask(values: np.ndarray, fraction: float = 0.1) -> np.ndarray:
    n = math.ceil(fraction * len(values))
    mask = np.zeros(len(values), dtype=bool)
    mask[np.argsort(-values, kind="stable")[:n]] = True
    return mask


def attention_export(model, bag) -> AttentionReport:
    from .model import attention, refine

    params = getattr(model, "params", model)
    raw, _ = attention(params, refine(params, bag.features))
    norm = minmax_normalize(raw)
    return AttentionReport(bag.bag_id, raw, norm, top_fraction_mask(norm), bag.coords)


def write_attention(path, reports: Sequence[AttentionReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bag_id", "instance_index", "col", "row", "raw_score", "minmax_score", "top10"])
        for rep in reports:
            for j in range(len(rep.raw)):
                col, row = ("", "") if rep.coords is None else (int(rep.coords[j, 0]), int(rep.coords[j, 1]))
                w.writerow([rep.bag_id, j, col, row, float(rep.raw[j]), float(rep.minmax[j]), int(rep.top10[j])])


def heatmap_pgm(rep: AttentionReport) -> bytes:
    """Binary PGM (P5) with one pixel per patch; empty cells are black."""
    if rep.coords is None:
        raise DataError(f"bag {rep.bag_id!r} has no coordinates for a heatmap")
    cols = rep.coords[:, 0] - rep.coords[:, 0].min()
    rows = rep.coords[:, 1] - rep.coords[:, 1].min()
    grid = np.zeros((int(rows.max()) + 1, int(cols.max()) + 1), dtype=np.uint8)
    grid[rows, cols] = np.rint(255.0 * rep.minmax).astype(np.uint8)
    header = f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode("ascii")
    return header + grid.tobytes()


def write_heatmap(path, rep: AttentionReport) -> None:
    Path(path).write_bytes(heatmap_pgm(rep))


def write_predictions(path, rows) -> None:
    """rows: (bag_id, score_pos, label_raw, label_t3a or None)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bag_id", "score_pos", "label_raw", "label_t3a"])
        for bag_id, score, raw, t3a in rows:
            w.writerow([bag_id, float(score), int(raw), "" if t3a is None else int(t3a)])


def write_occ_report(path, rows) -> None:
    """rows: (bag_id, n_instances, pos_fraction, neg_fraction)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bag_id", "n_instances", "pos_fraction", "neg_fraction"])
        for row in rows:
            w.writerow(row)
