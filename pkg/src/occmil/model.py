"""Gated-attention MIL network with two instance heads.

Shapes: a bag is a (K, d_in) feature matrix, refined to (K, d_ref) by a
ReLU layer; gated attention (hidden width D) pools it to one d_ref vector
that the bag head classifies. The negative/positive instance heads only
see confident instances.

Gradients are derived by hand; ``tests/test_model.py`` checks them
against central finite differences.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import BadMagic, CorruptHeader, DimMismatch, EmptyBag, IoFailure, TraceMismatch
from .mathkern import Prng, affine, sigmoid, softmax_stable

PROB_FLOOR = 1e-12


@dataclass
class ModelParams:
    W_refine: np.ndarray
    b_refine: np.ndarray
    V_att: np.ndarray
    U_att: np.ndarray
    w_att: np.ndarray
    W_neg: np.ndarray
    b_neg: np.ndarray
    W_pos: np.ndarray
    b_pos: np.ndarray
    W_bag: np.ndarray
    b_bag: np.ndarray

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.W_refine.shape[0], self.W_refine.shape[1], self.V_att.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def map(self, fn) -> "ModelParams":
        return ModelParams(**{k: fn(v) for k, v in self.tensors().items()})

    def copy(self) -> "ModelParams":
        return self.map(np.copy)


# Gradients mirror the parameter layout exactly.
Gradients = ModelParams

PARAM_NAMES = tuple(f.name for f in fields(ModelParams))


def zeros_like(params: ModelParams) -> ModelParams:
    return params.map(np.zeros_like)


def init_params(d_in: int, d_ref: int, D: int, prng: Prng) -> ModelParams:
    """Glorot-uniform weights, zero biases, drawn in field order."""
    if min(d_in, d_ref, D) < 1:
        raise DimMismatch("model dims must be positive")

    def glorot(n_in, n_out):
        bound = np.sqrt(6.0 / (n_in + n_out))
        return (2.0 * prng.uniform(n_in * n_out) - 1.0).reshape(n_in, n_out) * bound

    return ModelParams(
        W_refine=glorot(d_in, d_ref),
        b_refine=np.zeros(d_ref),
        V_att=glorot(d_ref, D),
        U_att=glorot(d_ref, D),
        w_att=glorot(D, 1)[:, 0],
        W_neg=glorot(d_ref, 2),
        b_neg=np.zeros(2),
        W_pos=glorot(d_ref, 2),
        b_pos=np.zeros(2),
        W_bag=glorot(d_ref, 2),
        b_bag=np.zeros(2),
    )


class Head(enum.Enum):
    BAG = "bag"
    INST_NEG = "neg"
    INST_POS = "pos"


def _head(params: ModelParams, head: Head):
    if head is Head.BAG:
        return params.W_bag, params.b_bag
    if head is Head.INST_NEG:
        return params.W_neg, params.b_neg
    return params.W_pos, params.b_pos


def refine(params: ModelParams, h: np.ndarray) -> np.ndarray:
    """ReLU refinement of one instance (or a (K, d_in) stack)."""
    return np.maximum(affine(params.W_refine, params.b_refine, h), 0.0)


def attention(params: ModelParams, zs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Raw gated-attention logits and their softmax over the bag."""
    zs = np.atleast_2d(np.asarray(zs, dtype=np.float64))
    if zs.shape[0] == 0:
        raise EmptyBag("attention over an empty bag")
    if zs.shape[1] != params.V_att.shape[0]:
        raise DimMismatch(f"attention expects d_ref={params.V_att.shape[0]}, got {zs.shape[1]}")
    gate = np.tanh(zs @ params.V_att) * sigmoid(zs @ params.U_att)
    logits = gate @ params.w_att
    return logits, softmax_stable(logits)


def aggregate(a: np.ndarray, zs: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    zs = np.atleast_2d(np.asarray(zs, dtype=np.float64))
    if a.shape != (zs.shape[0],):
        raise DimMismatch(f"{a.shape[0]} weights for {zs.shape[0]} instances")
    return a @ zs


def classify(head: Head, params: ModelParams, x: np.ndarray) -> np.ndarray:
    W, b = _head(params, head)
    return softmax_stable(affine(W, b, x))


@dataclass
class Confident:
    """Confident instance indices with their 0/1 pseudo-labels, in index order."""

    indices: np.ndarray
    labels: np.ndarray

    @classmethod
    def empty(cls) -> "Confident":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))

    @classmethod
    def from_sets(cls, positives, negatives) -> "Confident":
        pairs = sorted([(int(i), 1) for i in positives] + [(int(i), 0) for i in negatives])
        if not pairs:
            return cls.empty()
        idx, lab = zip(*pairs)
        return cls(np.array(idx, dtype=np.int64), np.array(lab, dtype=np.int64))

    def __len__(self):
        return len(self.indices)


@dataclass
class ForwardTrace:
    params_id: int
    h: np.ndarray  # (K, d_in) input, float64
    pre: np.ndarray  # (K, d_ref) pre-ReLU
    z: np.ndarray  # (K, d_ref) refined
    tanh_v: np.ndarray  # (K, D)
    sig_u: np.ndarray  # (K, D)
    logits: np.ndarray  # (K,) raw attention
    a: np.ndarray  # (K,) attention weights
    Z: np.ndarray  # (d_ref,) bag feature
    bag_prob: np.ndarray  # (2,)
    confident: Confident
    prob_neg: Optional[np.ndarray] = None  # (|C|, 2)
    prob_pos: Optional[np.ndarray] = None  # (|C|, 2)


def forward(params: ModelParams, bag, confident: Optional[Confident] = None) -> ForwardTrace:
    """Full forward pass over one bag (a Bag or a (K, d_in) array)."""
    h = np.asarray(getattr(bag, "features", bag), dtype=np.float64)
    if h.ndim != 2 or h.shape[0] == 0:
        raise EmptyBag("forward needs K >= 1 instances")
    if h.shape[1] != params.W_refine.shape[0]:
        raise DimMismatch(f"bag feature_dim {h.shape[1]} != model d_in {params.W_refine.shape[0]}")
    pre = h @ params.W_refine + params.b_refine
    z = np.maximum(pre, 0.0)
    tanh_v = np.tanh(z @ params.V_att)
    sig_u = sigmoid(z @ params.U_att)
    logits = (tanh_v * sig_u) @ params.w_att
    a = softmax_stable(logits)
    Z = a @ z
    bag_prob = softmax_stable(Z @ params.W_bag + params.b_bag)
    trace = ForwardTrace(id(params), h, pre, z, tanh_v, sig_u, logits, a, Z, bag_prob, Confident.empty())
    if confident is not None and len(confident):
        attach_instances(params, trace, confident)
    return trace


def attach_instances(params: ModelParams, trace: ForwardTrace, confident: Confident) -> ForwardTrace:
    """Add instance-head probabilities for the confident set to an existing trace."""
    if trace.params_id != id(params):
        raise TraceMismatch("trace was produced with different parameters")
    trace.confident = confident
    if len(confident) == 0:
        trace.prob_neg = trace.prob_pos = None
        return trace
    zc = trace.z[confident.indices]
    trace.prob_neg = softmax_stable(zc @ params.W_neg + params.b_neg)
    trace.prob_pos = softmax_stable(zc @ params.W_pos + params.b_pos)
    return trace


def _xent_grad(prob: np.ndarray, target: np.ndarray) -> np.ndarray:
    """d/dlogits of -log(max(prob[target], floor)) for softmax outputs (row-wise)."""
    prob = np.atleast_2d(prob)
    target = np.atleast_1d(target)
    g = prob.copy()
    rows = np.arange(len(target))
    g[rows, target] -= 1.0
    # Clamped probabilities contribute a flat loss, hence no gradient.
    g[prob[rows, target] < PROB_FLOOR] = 0.0
    return g


def backward(params: ModelParams, trace: ForwardTrace, bag_label: int, alpha1: float) -> ModelParams:
    """Gradient of alpha1*L_bag + alpha2/(2|C|) * sum_C (L_neg + L_pos).

    The pseudo-labels travel with ``trace.confident``. The negative head's
    target class is ``1 - y`` (index 1 means "negative evidence"); the
    positive head's target is ``y``.
    """
    if trace.params_id != id(params):
        raise TraceMismatch("trace was produced with different parameters")
    grads = zeros_like(params)
    alpha2 = 1.0 - alpha1
    conf = trace.confident

    d_logit_bag = alpha1 * _xent_grad(trace.bag_prob, np.array([int(bag_label)]))[0]
    grads.W_bag = np.outer(trace.Z, d_logit_bag)
    grads.b_bag = d_logit_bag
    dZ = params.W_bag @ d_logit_bag

    # Attention path.
    dz = np.outer(trace.a, dZ)
    da = trace.z @ dZ
    de = trace.a * (da - trace.a @ da)
    gate = trace.tanh_v * trace.sig_u
    grads.w_att = gate.T @ de
    dgate = np.outer(de, params.w_att)
    dv = dgate * trace.sig_u * (1.0 - trace.tanh_v**2)
    du = dgate * trace.tanh_v * trace.sig_u * (1.0 - trace.sig_u)
    grads.V_att = trace.z.T @ dv
    grads.U_att = trace.z.T @ du
    dz += dv @ params.V_att.T + du @ params.U_att.T

    if len(conf) and alpha2 != 0.0:
        if trace.prob_neg is None or len(trace.prob_neg) != len(conf):
            raise TraceMismatch("trace lacks instance probabilities for the confident set")
        scale = alpha2 / (2.0 * len(conf))
        zc = trace.z[conf.indices]
        g_neg = scale * _xent_grad(trace.prob_neg, 1 - conf.labels)
        g_pos = scale * _xent_grad(trace.prob_pos, conf.labels)
        grads.W_neg = zc.T @ g_neg
        grads.b_neg = g_neg.sum(axis=0)
        grads.W_pos = zc.T @ g_pos
        grads.b_pos = g_pos.sum(axis=0)
        np.add.at(dz, conf.indices, g_neg @ params.W_neg.T + g_pos @ params.W_pos.T)

    dpre = dz * (trace.pre > 0)
    grads.W_refine = trace.h.T @ dpre
    grads.b_refine = dpre.sum(axis=0)
    return grads


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"MBHP"
CKPT_VERSION = 1


def encode_params(params: ModelParams) -> bytes:
    d_in, d_ref, D = params.dims
    parts = [CKPT_MAGIC, struct.pack("<HIII", CKPT_VERSION, d_in, d_ref, D)]
    for name in PARAM_NAMES:
        arr = np.ascontiguousarray(getattr(params, name), dtype="<f8")
        parts.append(struct.pack("<I", arr.size))
        parts.append(arr.tobytes())
    return b"".join(parts)


def _shapes(d_in, d_ref, D):
    return {
        "W_refine": (d_in, d_ref),
        "b_refine": (d_ref,),
        "V_att": (d_ref, D),
        "U_att": (d_ref, D),
        "w_att": (D,),
        "W_neg": (d_ref, 2),
        "b_neg": (2,),
        "W_pos": (d_ref, 2),
        "b_pos": (2,),
        "W_bag": (d_ref, 2),
        "b_bag": (2,),
    }


def decode_params(buf: bytes, source: str = "<bytes>") -> ModelParams:
    if buf[:4] != CKPT_MAGIC:
        raise BadMagic(f"{source}: not a model checkpoint")
    try:
        version, d_in, d_ref, D = struct.unpack_from("<HIII", buf, 4)
        pos = 18
        tensors = {}
        for name, shape in _shapes(d_in, d_ref, D).items():
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            if n != int(np.prod(shape)) or pos + 8 * n > len(buf):
                raise CorruptHeader(f"{source}: tensor {name} has bad length {n}")
            tensors[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
    except struct.error as exc:
        raise CorruptHeader(f"{source}: truncated checkpoint") from exc
    if version != CKPT_VERSION or pos != len(buf):
        raise CorruptHeader(f"{source}: bad version or trailing bytes")
    return ModelParams(**tensors)


def save_params(params: ModelParams, path) -> None:
    try:
        Path(path).write_bytes(encode_params(params))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_params(path) -> ModelParams:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return decode_params(buf, str(path))
