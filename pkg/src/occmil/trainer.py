"""Losses, Adam, and the training loop with per-epoch OCSVM refits."""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from .bagstore import BagLabel, Dataset, SplitSpec, Truth, monte_carlo_split
from .errors import BadProbability, DegenerateSplit, InvalidConfig, MilError, MissingInstanceProbs, NumericFailure
from .evalkit import MetricsReport, auroc, threshold_metrics
from .mathkern import Prng
from .model import (
    PROB_FLOOR,
    Confident,
    ForwardTrace,
    ModelParams,
    attach_instances,
    backward,
    forward,
    init_params,
    zeros_like,
)
from .occ import OcsvmState, anomaly_score, confident_negatives, fit_ocsvm, pseudo_label_positive_bag

log = logging.getLogger(__name__)

# Substream tags for the run generator.
TAG_FOLD = 0x464F_4C44_0000_0000
TAG_INIT = 1
TAG_OCSVM = 0x4F43_0000
TAG_SHUFFLE = 0x5348_0000


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    alpha1: float = 0.7
    M: int = 8
    r: float = 20.0
    nu: float = 0.25
    patience: int = 10
    max_epochs: int = 200
    threshold: float = 0.5
    t3a_enabled: bool = False
    t3a_C: int = 10
    seed: int = 0
    d_ref: int = 512
    D: int = 128
    ocsvm_tol: float = 1e-4
    ocsvm_max_epochs: int = 100

    def __post_init__(self):
        problems = []
        if not 0.0 <= self.alpha1 <= 1.0:
            problems.append("alpha1 must be in [0, 1]")
        if not 0.0 < self.nu <= 1.0:
            problems.append("nu must be in (0, 1]")
        if not 0.0 <= self.r < 100.0:
            problems.append("r must be in [0, 100)")
        if not 0.0 < self.threshold < 1.0:
            problems.append("threshold must be in (0, 1)")
        if min(self.M, self.patience, self.max_epochs, self.t3a_C, self.d_ref, self.D, self.ocsvm_max_epochs) < 1:
            problems.append("M, patience, max_epochs, t3a_C, d_ref, D, ocsvm_max_epochs must be positive")
        if self.learning_rate <= 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.weight_decay < 0:
            problems.append("bad optimizer settings")
        if problems:
            raise InvalidConfig("; ".join(problems))

    @property
    def alpha2(self) -> float:
        return 1.0 - self.alpha1


# ---------------------------------------------------------------- losses


class Direction(enum.Enum):
    NEG = "neg"
    POS = "pos"


def _check_prob(prob) -> np.ndarray:
    prob = np.asarray(prob, dtype=np.float64)
    if prob.shape != (2,) or (prob < 0).any() or abs(prob.sum() - 1.0) > 1e-9:
        raise BadProbability(f"not a two-class distribution: {prob}")
    return prob


def _nll(p: float) -> float:
    return -math.log(max(p, PROB_FLOOR))


def instance_loss(direction: Direction, prob, pseudo_label: int) -> float:
    prob = _check_prob(prob)
    y = int(pseudo_label)
    if direction is Direction.NEG:
        return (1 - y) * _nll(prob[1]) + y * _nll(prob[0])
    return y * _nll(prob[1]) + (1 - y) * _nll(prob[0])


def bag_loss(prob, Y: int) -> float:
    prob = _check_prob(prob)
    return int(Y) * _nll(prob[1]) + (1 - int(Y)) * _nll(prob[0])


def total_loss(trace: ForwardTrace, Y: int, alpha1: float) -> float:
    """Bag loss plus the averaged instance losses of the confident set carried by ``trace``."""
    loss = alpha1 * bag_loss(trace.bag_prob, Y)
    conf = trace.confident
    if len(conf) == 0:
        return loss
    if trace.prob_neg is None or len(trace.prob_neg) != len(conf):
        raise MissingInstanceProbs("trace has no instance probabilities for its confident set")
    inst = sum(
        instance_loss(Direction.NEG, pn, y) + instance_loss(Direction.POS, pp, y)
        for pn, pp, y in zip(trace.prob_neg, trace.prob_pos, conf.labels)
    )
    return loss + (1.0 - alpha1) / (2.0 * len(conf)) * inst


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: ModelParams
    v: ModelParams
    t: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(zeros_like(params), zeros_like(params), 0)


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState, cfg: TrainConfig):
    """One Adam update with L2 weight decay folded into the gradient."""
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, theta in params.tensors().items():
        g = getattr(grads, name)
        if g.shape != theta.shape:
            raise ValueError(f"gradient {name} has shape {g.shape}, expected {theta.shape}")
        if cfg.weight_decay:
            g = g + cfg.weight_decay * theta
        m = b1 * getattr(state.m, name) + (1.0 - b1) * g
        v = b2 * getattr(state.v, name) + (1.0 - b2) * g * g
        new_p[name] = theta - cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + 1e-8)
        new_m[name] = m
        new_v[name] = v
    return ModelParams(**new_p), AdamState(ModelParams(**new_m), ModelParams(**new_v), t)


# ---------------------------------------------------------------- training


class EarlyStopping:
    """Tracks the best validation AUROC; only a strict increase counts."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record one epoch; return True when training should stop."""
        if value > self.best:
            self.best, self.best_epoch, self.stale = value, epoch, 0
            return False
        self.stale += 1
        return self.stale >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_auroc: float
    pl_precision_pos: Optional[float] = None
    pl_precision_neg: Optional[float] = None


@dataclass
class TrainedModel:
    params: ModelParams
    ocsvm: OcsvmState
    config: TrainConfig
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def best_record(self) -> EpochRecord:
        return self.history[self.best_epoch - 1]


def pseudo_label(params: ModelParams, trace: ForwardTrace, label: BagLabel, ocsvm: OcsvmState, cfg: TrainConfig) -> Confident:
    if label is BagLabel.POSITIVE:
        pl = pseudo_label_positive_bag(anomaly_score(ocsvm, trace.z), cfg.M, cfg.r)
    else:
        pl = confident_negatives(trace.logits, cfg.M)
    return Confident.from_sets(pl.positives, pl.negatives)


def bag_scores(params: ModelParams, bags) -> np.ndarray:
    """Positive-class probability of the bag classifier for each bag."""
    return np.array([forward(params, b).bag_prob[1] for b in bags])


def _labeled(dataset: Dataset, cases) -> list[int]:
    return [i for i in dataset.subset(cases) if dataset.bags[i].label is not BagLabel.UNKNOWN]


def _require_both(dataset: Dataset, idx: list[int], what: str) -> None:
    labels = {dataset.bags[i].label for i in idx}
    if labels != {BagLabel.NEGATIVE, BagLabel.POSITIVE}:
        raise DegenerateSplit(f"{what} set lacks one of the two classes")


def _refined_negatives(params: ModelParams, dataset: Dataset, idx: list[int]) -> np.ndarray:
    feats = [dataset.bags[i].features for i in idx if dataset.bags[i].label is BagLabel.NEGATIVE]
    h = np.concatenate(feats).astype(np.float64)
    return np.maximum(h @ params.W_refine + params.b_refine, 0.0)


def train_fold(dataset: Dataset, split: SplitSpec, cfg: TrainConfig, prng: Optional[Prng] = None) -> TrainedModel:
    """Train on the split's training cases, early-stopping on validation AUROC.

    Each epoch refits the OCSVM from scratch on the refined instances of the
    training negative bags (the first fit happens before any update), then
    visits the training bags one at a time in a freshly shuffled order.
    """
    train_idx = _labeled(dataset, split.train_cases)
    val_idx = _labeled(dataset, split.val_cases)
    _require_both(dataset, train_idx, "training")
    _require_both(dataset, val_idx, "validation")
    prng = prng if prng is not None else Prng(cfg.seed).derive(TAG_FOLD + split.fold)

    params = init_params(dataset.feature_dim, cfg.d_ref, cfg.D, prng.derive(TAG_INIT))
    adam = AdamState.zeros(params)
    val_bags = [dataset.bags[i] for i in val_idx]
    val_labels = [int(b.label) for b in val_bags]
    stopper = EarlyStopping(cfg.patience)
    history: list[EpochRecord] = []
    best_params = params.copy()
    ocsvm = None

    for epoch in range(1, cfg.max_epochs + 1):
        ocsvm = fit_ocsvm(
            _refined_negatives(params, dataset, train_idx),
            cfg.nu,
            cfg.ocsvm_tol,
            cfg.ocsvm_max_epochs,
            prng.derive(TAG_OCSVM + epoch),
        )
        order = prng.derive(TAG_SHUFFLE + epoch).permutation(len(train_idx))
        losses = []
        hits = {0: [0, 0], 1: [0, 0]}  # pseudo-label -> [correct, total]
        for pos in order:
            i = train_idx[pos]
            bag = dataset.bags[i]
            trace = forward(params, bag)
            conf = pseudo_label(params, trace, bag.label, ocsvm, cfg)
            attach_instances(params, trace, conf)
            loss = total_loss(trace, int(bag.label), cfg.alpha1)
            if not math.isfinite(loss):
                raise NumericFailure(f"non-finite loss at epoch {epoch}, bag {bag.bag_id!r}")
            grads = backward(params, trace, int(bag.label), cfg.alpha1)
            params, adam = adam_step(params, grads, adam, cfg)
            losses.append(loss)
            if dataset.truths is not None and len(conf):
                truth = dataset.truths[i][conf.indices]
                for y, t in zip(conf.labels, truth):
                    ok = t == Truth.POSITIVE if y == 1 else t != Truth.POSITIVE
                    hits[int(y)][0] += int(ok)
                    hits[int(y)][1] += 1
        if not all(np.isfinite(v).all() for v in params.tensors().values()):
            raise NumericFailure(f"parameters became non-finite at epoch {epoch}")

        val = auroc(bag_scores(params, val_bags), val_labels)
        rec = EpochRecord(epoch, float(np.mean(losses)), val)
        if dataset.truths is not None:
            rec.pl_precision_pos = hits[1][0] / hits[1][1] if hits[1][1] else None
            rec.pl_precision_neg = hits[0][0] / hits[0][1] if hits[0][1] else None
        history.append(rec)
        log.debug("fold %d epoch %d loss %.5f val_auroc %.4f", split.fold, epoch, rec.train_loss, val)
        improved = val > stopper.best
        stop = stopper.update(epoch, val)
        if improved:
            best_params = params.copy()
        if stop:
            break

    # Refit so the stored OCSVM lives in the returned parameters' feature space.
    ocsvm = fit_ocsvm(
        _refined_negatives(best_params, dataset, train_idx),
        cfg.nu,
        cfg.ocsvm_tol,
        cfg.ocsvm_max_epochs,
        prng.derive(TAG_OCSVM + stopper.best_epoch),
    )
    return TrainedModel(best_params, ocsvm, cfg, history, stopper.best_epoch)


def evaluate_bags(model: TrainedModel, bags, t3a: Optional[bool] = None, C: Optional[int] = None) -> np.ndarray:
    """Positive-class scores, adapted with T3A when enabled."""
    from .t3a import adapt_evaluate

    use_t3a = model.config.t3a_enabled if t3a is None else t3a
    if use_t3a:
        _, scores = adapt_evaluate(model, bags, C if C is not None else model.config.t3a_C)
        return scores
    return bag_scores(model.params, bags)


@dataclass
class FoldResult:
    fold: int
    split: SplitSpec
    model: TrainedModel
    report: MetricsReport


def run_cv(dataset: Dataset, cfg: TrainConfig, n_folds: int = 10, ratios=(0.8, 0.1, 0.1)) -> list[FoldResult]:
    if n_folds < 1:
        raise InvalidConfig("n_folds must be >= 1")
    results = []
    for fold in range(n_folds):
        try:
            split = monte_carlo_split(dataset, fold, cfg.seed, ratios)
            model = train_fold(dataset, split, cfg)
            test_idx = _labeled(dataset, split.test_cases)
            _require_both(dataset, test_idx, "test")
            bags = [dataset.bags[i] for i in test_idx]
            scores = evaluate_bags(model, bags)
            report = threshold_metrics(scores, [int(b.label) for b in bags], cfg.threshold)
        except MilError as exc:
            raise type(exc)(f"fold {fold}: {exc}") from exc
        log.info("fold %d: best epoch %d, test auroc %.4f", fold, model.best_epoch, report.auroc)
        results.append(FoldResult(fold, split, model, report))
    return results


def config_from_mapping(values: dict) -> TrainConfig:
    known = {f.name: f for f in fields(TrainConfig)}
    unknown = set(values) - set(known)
    if unknown:
        raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
    return replace(TrainConfig(), **values)
