"""Bags of instance features: in-memory types, the BAGF file format,
manifests, case-grouped Monte Carlo splits and the synthetic generator."""
from __future__ import annotations

import csv
import enum
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    BadMagic,
    CorruptHeader,
    DataError,
    EmptyBag,
    InvalidConfig,
    IoFailure,
    NonFinite,
    TooFewCases,
)
from .mathkern import Prng

BAGF_MAGIC = b"MBHB"
BAGF_VERSION = 1
_FLAG_COORDS = 0x1


class BagLabel(enum.IntEnum):
    UNKNOWN = -1
    NEGATIVE = 0
    POSITIVE = 1


class Truth(enum.IntEnum):
    NEGATIVE = 0
    POSITIVE = 1
    NOISE = 2


_LABEL_TEXT = {BagLabel.NEGATIVE: "neg", BagLabel.POSITIVE: "pos", BagLabel.UNKNOWN: "unknown"}
_TEXT_LABEL = {v: k for k, v in _LABEL_TEXT.items()}
_TRUTH_TEXT = {Truth.NEGATIVE: "neg", Truth.POSITIVE: "pos", Truth.NOISE: "noise"}
_TEXT_TRUTH = {v: k for k, v in _TRUTH_TEXT.items()}


@dataclass(frozen=True, eq=False)
class Bag:
    """A labeled bag of K instance feature vectors.

    ``features`` is a (K, dim) float32 array; ``coords`` an optional (K, 2)
    int32 array of (column, row) patch grid indices.
    """

    bag_id: str
    case_id: str
    label: BagLabel
    features: np.ndarray
    coords: Optional[np.ndarray] = None

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise EmptyBag(f"bag {self.bag_id!r}: need K >= 1 instances of dim >= 1, got {feats.shape}")
        if not np.isfinite(feats).all():
            raise NonFinite(f"bag {self.bag_id!r}: non-finite feature values")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "label", BagLabel(self.label))
        if self.coords is not None:
            coords = np.ascontiguousarray(self.coords, dtype=np.int32)
            if coords.shape != (feats.shape[0], 2):
                raise DataError(f"bag {self.bag_id!r}: coords shape {coords.shape} != ({feats.shape[0]}, 2)")
            coords.setflags(write=False)
            object.__setattr__(self, "coords", coords)

    @property
    def n_instances(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Bag):
            return NotImplemented
        same_coords = (self.coords is None and other.coords is None) or (
            self.coords is not None and other.coords is not None and np.array_equal(self.coords, other.coords)
        )
        return (
            self.bag_id == other.bag_id
            and self.case_id == other.case_id
            and self.label == other.label
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
            and same_coords
        )


@dataclass
class Dataset:
    bags: list[Bag]
    truths: Optional[list[np.ndarray]] = None
    feature_dim: int = 0

    def __post_init__(self):
        if not self.bags:
            raise DataError("dataset has no bags")
        dims = {b.feature_dim for b in self.bags}
        if len(dims) != 1:
            raise DataError(f"bags disagree on feature_dim: {sorted(dims)}")
        dim = dims.pop()
        if self.feature_dim and self.feature_dim != dim:
            raise DataError(f"declared feature_dim {self.feature_dim} but bags have {dim}")
        self.feature_dim = dim
        ids = [b.bag_id for b in self.bags]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate bag_id in dataset")
        if self.truths is not None:
            if len(self.truths) != len(self.bags):
                raise DataError("truths do not align with bags")
            for b, t in zip(self.bags, self.truths):
                if len(t) != b.n_instances:
                    raise DataError(f"truth length mismatch for bag {b.bag_id!r}")
        case_labels: dict[str, BagLabel] = {}
        for b in self.bags:
            if b.label is BagLabel.UNKNOWN:
                continue
            prev = case_labels.setdefault(b.case_id, b.label)
            if prev is not b.label:
                raise DataError(f"case {b.case_id!r} has conflicting bag labels")

    def case_ids(self) -> list[str]:
        """Distinct case ids in order of first appearance."""
        return list(dict.fromkeys(b.case_id for b in self.bags))

    def index(self) -> dict[str, int]:
        return {b.bag_id: i for i, b in enumerate(self.bags)}

    def subset(self, cases) -> list[int]:
        cases = set(cases)
        return [i for i, b in enumerate(self.bags) if b.case_id in cases]


# ---------------------------------------------------------------- BAGF


def encode_bag(bag: Bag) -> bytes:
    bag_id = bag.bag_id.encode("utf-8")
    case_id = bag.case_id.encode("utf-8")
    if len(bag_id) > 0xFFFF or len(case_id) > 0xFFFF:
        raise DataError("bag_id/case_id longer than 65535 bytes")
    flags = _FLAG_COORDS if bag.coords is not None else 0
    parts = [
        BAGF_MAGIC,
        struct.pack("<HHH", BAGF_VERSION, flags, len(bag_id)),
        bag_id,
        struct.pack("<H", len(case_id)),
        case_id,
        struct.pack("<bBII", int(bag.label), 0, bag.n_instances, bag.feature_dim),
    ]
    if bag.coords is not None:
        parts.append(bag.coords.astype("<i4").tobytes())
    parts.append(bag.features.astype("<f4").tobytes())
    return b"".join(parts)


def decode_bag(buf: bytes, source: str = "<bytes>") -> Bag:
    if buf[:4] != BAGF_MAGIC:
        raise BadMagic(f"{source}: not a BAGF file")
    try:
        version, flags, n = struct.unpack_from("<HHH", buf, 4)
        pos = 10
        bag_id = buf[pos : pos + n].decode("utf-8")
        pos += n
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        case_id = buf[pos : pos + n].decode("utf-8")
        pos += n
        label, _reserved, k, dim = struct.unpack_from("<bBII", buf, pos)
        pos += 10
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptHeader(f"{source}: truncated or malformed header") from exc
    if version != BAGF_VERSION:
        raise CorruptHeader(f"{source}: unsupported version {version}")
    if k == 0 or dim == 0:
        raise CorruptHeader(f"{source}: header declares K={k}, dim={dim}")
    if label not in (-1, 0, 1):
        raise CorruptHeader(f"{source}: bad label byte {label}")
    coords = None
    need = k * dim * 4 + (k * 8 if flags & _FLAG_COORDS else 0)
    if len(buf) - pos != need:
        raise CorruptHeader(f"{source}: payload is {len(buf) - pos} bytes, header implies {need}")
    if flags & _FLAG_COORDS:
        coords = np.frombuffer(buf, dtype="<i4", count=2 * k, offset=pos).reshape(k, 2)
        pos += 8 * k
    feats = np.frombuffer(buf, dtype="<f4", count=k * dim, offset=pos).reshape(k, dim)
    if not np.isfinite(feats).all():
        raise NonFinite(f"{source}: NaN/Inf in feature payload")
    return Bag(bag_id, case_id, BagLabel(label), feats.astype(np.float32), coords)


def write_bag(bag: Bag, path) -> None:
    data = encode_bag(bag)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_bag(path) -> Bag:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return decode_bag(buf, str(path))


# ---------------------------------------------------------------- manifests


def write_manifest(rows: Sequence[tuple[Bag, str]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bag_id", "case_id", "label", "path"])
        for bag, rel in rows:
            w.writerow([bag.bag_id, bag.case_id, _LABEL_TEXT[bag.label], rel])


def read_manifest(path) -> list[dict]:
    """Rows of the manifest CSV; paths are resolved against its directory."""
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["bag_id", "case_id", "label", "path"]:
            raise DataError(f"{path}: header must be bag_id,case_id,label,path")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if row["label"] not in _TEXT_LABEL:
                raise DataError(f"{path}:{lineno}: label {row['label']!r} not in neg/pos/unknown")
            row["label"] = _TEXT_LABEL[row["label"]]
            row["path"] = str(path.parent / row["path"])
            rows.append(row)
    return rows


def load_dataset(manifest, truth_path=None) -> Dataset:
    bags = []
    for row in read_manifest(manifest):
        bag = read_bag(row["path"])
        if (bag.bag_id, bag.case_id, bag.label) != (row["bag_id"], row["case_id"], row["label"]):
            raise DataError(f"{row['path']}: header disagrees with manifest row for {row['bag_id']!r}")
        bags.append(bag)
    truths = None
    if truth_path is not None:
        truths = read_truth(truth_path, bags)
    return Dataset(bags, truths)


def write_truth(dataset: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bag_id", "instance_index", "truth"])
        for bag, truth in zip(dataset.bags, dataset.truths):
            for j, t in enumerate(truth):
                w.writerow([bag.bag_id, j, _TRUTH_TEXT[Truth(int(t))]])


def read_truth(path, bags: Sequence[Bag]) -> list[np.ndarray]:
    out = {b.bag_id: np.full(b.n_instances, -1, dtype=np.int8) for b in bags}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out[row["bag_id"]][int(row["instance_index"])] = _TEXT_TRUTH[row["truth"]]
    for bag_id, t in out.items():
        if (t < 0).any():
            raise DataError(f"{path}: missing truth rows for bag {bag_id!r}")
    return [out[b.bag_id] for b in bags]


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class SplitSpec:
    fold: int
    seed: int
    train_cases: frozenset
    val_cases: frozenset
    test_cases: frozenset

    def subset_of(self, case_id: str) -> str:
        for name in ("train", "val", "test"):
            if case_id in getattr(self, f"{name}_cases"):
                return name
        raise KeyError(case_id)


SPLIT_TAG = 0x5350_4C49_5400_0000


def monte_carlo_split(dataset: Dataset, fold: int, seed: int, ratios=(0.8, 0.1, 0.1)) -> SplitSpec:
    """Shuffle case ids with a (seed, fold) stream and cut them train/val/test.

    Validation and test sizes are rounded to the nearest integer with a floor
    of one case each; training receives the remainder.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise InvalidConfig(f"ratios must be three non-negative reals summing to 1, got {ratios}")
    cases = sorted(dataset.case_ids())
    n = len(cases)
    n_val = max(1, round(ratios[1] * n))
    n_test = max(1, round(ratios[2] * n))
    if n < 3 or n - n_val - n_test < 1:
        raise TooFewCases(f"{n} cases cannot fill train/val/test")
    prng = Prng(seed).derive(SPLIT_TAG + fold)
    order = [cases[i] for i in prng.permutation(n)]
    return SplitSpec(
        fold=fold,
        seed=seed,
        test_cases=frozenset(order[:n_test]),
        val_cases=frozenset(order[n_test : n_test + n_val]),
        train_cases=frozenset(order[n_test + n_val :]),
    )


def write_split(split: SplitSpec, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", "subset"])
        for name in ("train", "val", "test"):
            for case in sorted(getattr(split, f"{name}_cases")):
                w.writerow([case, name])


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SynthConfig:
    feature_dim: int = 32
    n_neg_bags: int = 100
    n_pos_bags: int = 100
    k_min: int = 20
    k_max: int = 60
    pos_fraction: float = 0.2
    separation: float = 4.0
    sigma: float = 1.0
    noise_fraction: float = 0.0
    seed: int = 0
    bags_per_case: int = 1
    shift: float = 0.0  # mean shift (in sigma units) applied to every instance
    stream: int = 0  # instance-sampling stream; class directions depend on seed only

    def validate(self) -> None:
        problems = []
        if self.feature_dim < 1:
            problems.append("feature_dim must be positive")
        if self.n_neg_bags < 1 or self.n_pos_bags < 1:
            problems.append("n_neg_bags and n_pos_bags must be positive")
        if not 1 <= self.k_min <= self.k_max:
            problems.append("need 1 <= k_min <= k_max")
        if not 0 < self.pos_fraction <= 1:
            problems.append("pos_fraction must be in (0, 1]")
        if self.separation < 0 or self.sigma <= 0:
            problems.append("separation >= 0 and sigma > 0 required")
        if not 0 <= self.noise_fraction < 1:
            problems.append("noise_fraction must be in [0, 1)")
        if self.bags_per_case < 1:
            problems.append("bags_per_case must be positive")
        if self.stream < 0:
            problems.append("stream must be non-negative")
        if not problems:
            for k in (self.k_min, self.k_max):
                if _n_noise(self, k) + math.ceil(self.pos_fraction * k) > k:
                    problems.append(f"K={k}: positives plus noise exceed the bag size")
                    break
        if problems:
            raise InvalidConfig("; ".join(problems))


def _n_noise(cfg: SynthConfig, k: int) -> int:
    return int(math.floor(cfg.noise_fraction * k + 0.5))


def synth_generate(cfg: SynthConfig) -> Dataset:
    """Gaussian bags with instance-level ground truth.

    Negative instances come from N(0, s^2 I), positive instances from
    N(separation*s*u, s^2 I) and noise instances from
    N(10*separation*s*v, s^2 I), where u and v are orthonormal and seed-derived.
    Every bag holds round(noise_fraction*K) noise instances; positive bags
    additionally hold ceil(pos_fraction*K) positives. Instance order within a
    bag and bag order within the dataset are both shuffled.
    """
    cfg.validate()
    root = Prng(cfg.seed)
    dirs = root.derive(1)
    u = dirs.gauss(cfg.feature_dim)
    u /= np.linalg.norm(u)
    v = dirs.gauss(cfg.feature_dim)
    v -= (v @ u) * u
    if cfg.feature_dim == 1 or np.linalg.norm(v) < 1e-12:
        v = np.zeros(cfg.feature_dim)
    else:
        v /= np.linalg.norm(v)
    s = cfg.sigma
    pos_mean = cfg.separation * s * u
    noise_mean = 10.0 * cfg.separation * s * v
    shift = cfg.shift * s * np.ones(cfg.feature_dim) / math.sqrt(cfg.feature_dim)

    draw = root.derive(2 + cfg.stream)
    labels = [BagLabel.NEGATIVE] * cfg.n_neg_bags + [BagLabel.POSITIVE] * cfg.n_pos_bags
    bags, truths = [], []
    counters = {BagLabel.NEGATIVE: 0, BagLabel.POSITIVE: 0}
    for label in labels:
        idx = counters[label]
        counters[label] += 1
        k = cfg.k_min + int(draw.integers(1, cfg.k_max - cfg.k_min + 1)[0])
        n_noise = _n_noise(cfg, k)
        n_pos = math.ceil(cfg.pos_fraction * k) if label is BagLabel.POSITIVE else 0
        truth = np.full(k, Truth.NEGATIVE, dtype=np.int8)
        truth[:n_pos] = Truth.POSITIVE
        truth[n_pos : n_pos + n_noise] = Truth.NOISE
        truth = truth[draw.permutation(k)]
        means = np.zeros((k, cfg.feature_dim))
        means[truth == Truth.POSITIVE] = pos_mean
        means[truth == Truth.NOISE] = noise_mean
        feats = means + shift + s * draw.gauss(k * cfg.feature_dim).reshape(k, cfg.feature_dim)
        width = math.ceil(math.sqrt(k))
        coords = np.stack([np.arange(k) % width, np.arange(k) // width], axis=1)
        tag = "neg" if label is BagLabel.NEGATIVE else "pos"
        case = f"{tag}_case_{idx // cfg.bags_per_case:04d}"
        bags.append(Bag(f"{tag}_{idx:04d}", case, label, feats, coords))
        truths.append(truth)
    order = draw.permutation(len(bags))
    return Dataset([bags[i] for i in order], [truths[i] for i in order])


def write_dataset(dataset: Dataset, out_dir, truth: bool = True) -> Path:
    """Write BAGF files, ``manifest.csv`` and (if present) ``truth.csv``; return the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "bags").mkdir(parents=True, exist_ok=True)
    rows = []
    for bag in dataset.bags:
        rel = os.path.join("bags", f"{bag.bag_id}.bagf")
        write_bag(bag, out_dir / rel)
        rows.append((bag, rel))
    manifest = out_dir / "manifest.csv"
    write_manifest(rows, manifest)
    if truth and dataset.truths is not None:
        write_truth(dataset, out_dir / "truth.csv")
    return manifest
