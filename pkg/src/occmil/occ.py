"""Linear one-class SVM and the confident-instance pseudo-labeling policy.

The SVM minimises the hinge form of the one-class objective

    J(w, rho) = 0.5*||w||^2 - rho + 1/(nu*N) * sum_i max(0, rho - <w, z_i>)

by per-sample subgradient steps over shuffled epochs. The step on ``w`` is
1/(t + 1/nu); the step on ``rho`` is the same multiplied by the mean squared
feature norm so that the fit is equivariant to feature scale. The returned
solution is the linearly weighted average of the iterates.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from .errors import BadMagic, BadNu, CorruptHeader, DimMismatch, EmptyBag, EmptyTrainingSet, IoFailure
from .mathkern import Prng

NO_CHANGE_EPOCHS = 5


@dataclass(frozen=True)
class OcsvmState:
    w_occ: np.ndarray
    rho: float
    nu: float
    epochs_run: int = 0
    final_objective: float = float("nan")

    def decision(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) @ self.w_occ - self.rho


def ocsvm_objective(X: np.ndarray, w: np.ndarray, rho: float, nu: float) -> float:
    hinge = np.maximum(0.0, rho - X @ w)
    return 0.5 * float(w @ w) - rho + float(hinge.sum()) / (nu * X.shape[0])


@numba.njit(cache=True)
def _sgd_epoch(X, order, w, rho, w_avg, rho_avg, t, nu, rho_scale):
    d = X.shape[1]
    t0 = 1.0 / nu
    for i in order:
        eta = 1.0 / (t + t0)
        score = 0.0
        for k in range(d):
            score += w[k] * X[i, k]
        violated = rho - score > 0.0
        for k in range(d):
            w[k] *= 1.0 - eta
        if violated:
            c = eta / nu
            for k in range(d):
                w[k] += c * X[i, k]
            rho -= eta * rho_scale * (1.0 / nu - 1.0)
        else:
            rho += eta * rho_scale
        t += 1
        mix = 2.0 / (t + 1.0)
        for k in range(d):
            w_avg[k] += mix * (w[k] - w_avg[k])
        rho_avg += mix * (rho - rho_avg)
    return rho, rho_avg, t


def fit_ocsvm(
    features: np.ndarray | Sequence[np.ndarray],
    nu: float,
    tol: float = 1e-4,
    max_epochs: int = 100,
    prng: Prng | None = None,
    trace: list | None = None,
) -> OcsvmState:
    """Fit from scratch (w = 0, rho = 0).

    Stops once the full-batch objective of the averaged iterate has failed
    to improve on its best value by ``tol`` for five consecutive epochs, or
    after ``max_epochs``. If ``trace`` is given, the per-epoch objective is
    appended to it.
    """
    if not 0.0 < nu <= 1.0:
        raise BadNu(f"nu must be in (0, 1], got {nu}")
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyTrainingSet("OCSVM needs at least one training feature")
    X = np.ascontiguousarray(X)
    prng = prng if prng is not None else Prng(0)
    n, d = X.shape
    rho_scale = float(np.mean(np.einsum("ij,ij->i", X, X)))
    if rho_scale == 0.0:
        rho_scale = 1.0
    w = np.zeros(d)
    w_avg = np.zeros(d)
    rho = rho_avg = 0.0
    t = 0
    best = ocsvm_objective(X, w_avg, rho_avg, nu)
    stale = 0
    epoch = 0
    obj = best
    for epoch in range(1, max_epochs + 1):
        order = prng.permutation(n)
        rho, rho_avg, t = _sgd_epoch(X, order, w, rho, w_avg, rho_avg, t, nu, rho_scale)
        obj = ocsvm_objective(X, w_avg, rho_avg, nu)
        if trace is not None:
            trace.append(obj)
        if obj > best - tol:
            stale += 1
            if stale >= NO_CHANGE_EPOCHS:
                break
        else:
            stale = 0
        best = min(best, obj)
    return OcsvmState(w_avg.copy(), float(rho_avg), float(nu), epoch, float(obj))


def _check_dim(state: OcsvmState, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != state.w_occ.shape[0]:
        raise DimMismatch(f"feature dim {z.shape[-1]} != OCSVM dim {state.w_occ.shape[0]}")
    return z


def anomaly_score(state: OcsvmState, z: np.ndarray) -> np.ndarray | float:
    """Negated distance to the hyperplane direction, intercept excluded."""
    return -(_check_dim(state, z) @ state.w_occ)


def occ_classify(state: OcsvmState, z: np.ndarray) -> np.ndarray | int:
    """1 (positive/outlier) where <w, z> < rho, else 0; the boundary is negative."""
    z = _check_dim(state, z)
    out = (z @ state.w_occ - state.rho < 0.0).astype(np.int64)
    return int(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class PseudoLabelSet:
    positives: frozenset
    negatives: frozenset
    excluded: frozenset = frozenset()


def _order_desc(values: np.ndarray) -> np.ndarray:
    # Larger first, smaller index first among ties. The low end of a bag is
    # read off the tail of this same order, which keeps top and bottom
    # picks disjoint when scores tie.
    return np.argsort(-values, kind="stable")


def pseudo_label_positive_bag(scores: np.ndarray, M: int, r: float) -> PseudoLabelSet:
    """Confident instances of a positive bag from its anomaly scores.

    The floor(K*r/100) highest scores are excluded as noise; of the rest,
    the M_eff highest become positives and the M_eff lowest negatives, with
    M_eff = min(M, floor(K'/2)).
    """
    scores = np.asarray(scores, dtype=np.float64)
    k = scores.shape[0]
    if k == 0:
        raise EmptyBag("cannot pseudo-label an empty bag")
    if M < 1 or not 0 <= r < 100:
        raise ValueError(f"need M >= 1 and r in [0, 100), got M={M}, r={r}")
    order = _order_desc(scores)
    n_excl = int(np.floor(k * r / 100.0))
    rest = order[n_excl:]
    m_eff = min(M, len(rest) // 2)
    return PseudoLabelSet(
        positives=frozenset(int(i) for i in rest[:m_eff]),
        negatives=frozenset(int(i) for i in rest[len(rest) - m_eff :]),
        excluded=frozenset(int(i) for i in order[:n_excl]),
    )


def confident_negatives(attention_logits: np.ndarray, M: int) -> PseudoLabelSet:
    """Top-M and bottom-M attended instances of a negative bag, all labeled negative."""
    logits = np.asarray(attention_logits, dtype=np.float64)
    k = logits.shape[0]
    if k == 0:
        raise EmptyBag("cannot pseudo-label an empty bag")
    if M < 1:
        raise ValueError(f"need M >= 1, got {M}")
    m_eff = min(M, k // 2)
    order = _order_desc(logits)
    picked = np.concatenate([order[:m_eff], order[k - m_eff :]])
    return PseudoLabelSet(positives=frozenset(), negatives=frozenset(int(i) for i in picked))


def occ_bag_proportions(state: OcsvmState, refined: np.ndarray) -> tuple[float, float]:
    refined = np.atleast_2d(np.asarray(refined, dtype=np.float64))
    if refined.shape[0] == 0:
        raise EmptyBag("no instances to classify")
    n_pos = int(np.sum(occ_classify(state, refined)))
    pos = n_pos / refined.shape[0]
    return pos, 1.0 - pos


# ---------------------------------------------------------------- sidecar file

OCSVM_MAGIC = b"MBHO"
OCSVM_VERSION = 1


def encode_ocsvm(state: OcsvmState) -> bytes:
    w = np.ascontiguousarray(state.w_occ, dtype="<f8")
    head = struct.pack("<HIddId", OCSVM_VERSION, w.size, state.rho, state.nu, state.epochs_run, state.final_objective)
    return OCSVM_MAGIC + head + w.tobytes()


def decode_ocsvm(buf: bytes, source: str = "<bytes>") -> OcsvmState:
    if buf[:4] != OCSVM_MAGIC:
        raise BadMagic(f"{source}: not an OCSVM file")
    try:
        version, d, rho, nu, epochs, obj = struct.unpack_from("<HIddId", buf, 4)
    except struct.error as exc:
        raise CorruptHeader(f"{source}: truncated OCSVM header") from exc
    pos = 4 + struct.calcsize("<HIddId")
    if version != OCSVM_VERSION or len(buf) != pos + 8 * d:
        raise CorruptHeader(f"{source}: bad version or length")
    w = np.frombuffer(buf, dtype="<f8", count=d, offset=pos).astype(np.float64)
    return OcsvmState(w, rho, nu, epochs, obj)


def save_ocsvm(state: OcsvmState, path) -> None:
    try:
        Path(path).write_bytes(encode_ocsvm(state))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_ocsvm(path) -> OcsvmState:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return decode_ocsvm(buf, str(path))
