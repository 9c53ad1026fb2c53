"""Test-time template adjustment of the bag classifier.

Each class keeps a support list seeded with its bag-classifier column.
Bags are processed one at a time: a bag is scored against the current
class centroids, then its unit-normalised feature joins the support list
of the class the trained bag classifier assigns it to. Centroids average
the seed with the C non-seed templates of lowest stored entropy.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import EmptyInput, ZeroVector
from .mathkern import softmax_stable
from .model import ModelParams, forward


@dataclass
class Template:
    vector: np.ndarray
    entropy: float
    is_seed: bool = False


@dataclass
class SupportSets:
    classes: tuple[list[Template], list[Template]]
    C: int

    def retained(self, c: int) -> list[Template]:
        members = self.classes[c]
        seeds = [t for t in members if t.is_seed]
        # sorted() is stable, so equal entropies keep insertion order.
        extra = sorted((t for t in members if not t.is_seed), key=lambda t: t.entropy)[: self.C]
        return seeds + extra

    def centroid(self, c: int) -> np.ndarray:
        return np.mean([t.vector for t in self.retained(c)], axis=0)

    def centroids(self) -> np.ndarray:
        """(2, d_ref) array, row i the centroid of class i."""
        return np.stack([self.centroid(0), self.centroid(1)])


def init_support(params: ModelParams, C: int) -> SupportSets:
    if C < 1:
        raise ValueError(f"C must be >= 1, got {C}")
    return SupportSets(
        ([Template(params.W_bag[:, 0].copy(), 0.0, True)], [Template(params.W_bag[:, 1].copy(), 0.0, True)]),
        C,
    )


def entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def adapt_predict(
    support: SupportSets, Z: np.ndarray, raw_prob: Optional[np.ndarray] = None
) -> tuple[int, SupportSets, np.ndarray]:
    """Classify one bag feature against the current centroids, then file it.

    ``raw_prob`` is the trained bag classifier's output for the same bag; it
    picks the support list that receives Z/||Z|| and supplies the stored
    entropy. Without it the centroid probabilities play that role.
    Returns (label, support, centroid probabilities); ``support`` is updated
    in place. Ties go to class 0.
    """
    Z = np.asarray(Z, dtype=np.float64)
    norm = np.linalg.norm(Z)
    if norm == 0.0:
        raise ZeroVector("cannot normalise a zero bag feature")
    prob = softmax_stable(support.centroids() @ Z)
    label = int(prob[1] > prob[0])
    raw_prob = prob if raw_prob is None else np.asarray(raw_prob, dtype=np.float64)
    raw_label = int(raw_prob[1] > raw_prob[0])
    support.classes[raw_label].append(Template(Z / norm, entropy(raw_prob)))
    return label, support, prob


def adapt_evaluate(model, bags, C: int) -> tuple[np.ndarray, np.ndarray]:
    """Sequential adaptation over ``bags`` in the given order.

    Returns per-bag labels and class-1 probabilities.
    """
    if len(bags) == 0:
        raise EmptyInput("no bags to adapt on")
    params = getattr(model, "params", model)
    support = init_support(params, C)
    labels, scores = [], []
    for bag in bags:
        trace = forward(params, bag)
        label, support, prob = adapt_predict(support, trace.Z, trace.bag_prob)
        labels.append(label)
        scores.append(prob[1])
    return np.array(labels, dtype=np.int64), np.array(scores)
