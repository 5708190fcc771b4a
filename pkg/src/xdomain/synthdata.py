"""Synthetic source/target datasets with a controllable domain shift.

Each class is a Gaussian over ``tokens x patch_dim`` values.  Some token
positions are "background": their mean is shared by every class, so two
samples of different classes still have similar patches there.  The
target domain applies one affine map (rotation in coordinate planes,
scaling, translation) to every token of every sample.
"""
from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numcore import Rng
from .pseudolabel import PairSet

SOURCE, TARGET = "source", "target"


@dataclass(frozen=True)
class ShiftSpec:
    class_count: int = 4
    tokens: int = 16
    patch_dim: int = 12
    samples_per_class: int = 200
    noise_sigma: float = 0.5
    mean_scale: float = 0.5
    shared_tokens: int = 8
    rotation: float = math.pi / 6
    translation: float = 1.0
    scale: float = 1.0
    layout_seed: int = 2

    def validate(self):
        if self.class_count < 1 or self.tokens < 1 or self.patch_dim < 1 or self.samples_per_class < 1:
            raise ValueError("ShiftSpec counts must be >= 1")
        if not 0 <= self.shared_tokens < self.tokens:
            raise ValueError("shared_tokens must leave at least one class-specific token")
        if not self.noise_sigma > 0:
            raise ValueError("noise_sigma must be > 0")
        if not 0 <= self.rotation < math.pi:
            raise ValueError("rotation must lie in [0, pi)")
        if not self.scale > 0 or self.mean_scale < 0:
            raise ValueError("scale must be > 0 and mean_scale >= 0")


@dataclass
class DomainDataset:
    samples: np.ndarray          # (count, tokens*patch_dim)
    labels: np.ndarray           # (count,)
    domain: str
    classes: int
    tokens: int
    patch_dim: int
    spec: ShiftSpec | None = field(default=None, compare=False)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 2 or self.samples.shape[1] != self.tokens * self.patch_dim:
            raise ValueError(f"samples shape {self.samples.shape} inconsistent with {self.tokens}x{self.patch_dim}")
        if len(self.labels) != len(self.samples):
            raise ValueError("labels and samples disagree on count")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError("class index out of range")

    def __len__(self):
        return len(self.labels)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("label," + ",".join(f"x{j}" for j in range(self.samples.shape[1])) + "\n")
            for y, x in zip(self.labels, self.samples):
                fh.write(f"{int(y)}," + ",".join(repr(float(v)) for v in x) + "\n")


def class_means(spec: ShiftSpec) -> np.ndarray:
    """(K, tokens, patch_dim) means, fixed by ``spec.layout_seed``.

    Object positions of class k all carry the class prototype; background
    positions carry a per-position mean shared by every class.
    """
    rng = Rng(spec.layout_seed, "layout")
    shared = np.zeros(spec.tokens, bool)
    shared[rng.child("background").permutation(spec.tokens)[:spec.shared_tokens]] = True
    protos = rng.child("class").normal((spec.class_count, spec.patch_dim), spec.mean_scale)
    background = rng.child("shared").normal((spec.tokens, spec.patch_dim), spec.mean_scale)
    means = np.repeat(protos[:, None, :], spec.tokens, axis=1)
    means[:, shared] = background[shared]
    return means


def shift_map(spec: ShiftSpec) -> tuple[np.ndarray, np.ndarray]:
    """(A, b) with target token = A @ source token + b."""
    rng = Rng(spec.layout_seed, "layout")
    d = spec.patch_dim
    c, s = math.cos(spec.rotation), math.sin(spec.rotation)
    rot = np.eye(d)
    for i in range(0, d - 1, 2):
        rot[i:i + 2, i:i + 2] = [[c, -s], [s, c]]
    direction = rng.child("translation").normal(d)
    direction /= np.linalg.norm(direction)
    return spec.scale * rot, spec.translation * direction


def _draw(spec: ShiftSpec, means: np.ndarray, rng: Rng):
    k, n = spec.class_count, spec.samples_per_class
    labels = np.repeat(np.arange(k), n)
    noise = rng.child("noise").normal((k * n, spec.tokens, spec.patch_dim), spec.noise_sigma)
    x = means[labels] + noise
    order = rng.child("order").permutation(k * n)
    return x[order], labels[order]


def generate_domain_pair(spec: ShiftSpec, rng: Rng) -> tuple[DomainDataset, DomainDataset]:
    spec.validate()
    means = class_means(spec)
    xs, ys = _draw(spec, means, rng.child(SOURCE))
    xt, yt = _draw(spec, means, rng.child(TARGET))
    a, b = shift_map(spec)
    xt = xt @ a.T + b
    flat = spec.tokens * spec.patch_dim
    mk = lambda x, y, dom: DomainDataset(x.reshape(len(y), flat), y, dom, spec.class_count,
                                         spec.tokens, spec.patch_dim, spec)
    return mk(xs, ys, SOURCE), mk(xt, yt, TARGET)


# --------------------------------------------------------------------- pairs


def true_positive_pairs(source: DomainDataset, target: DomainDataset, rng: Rng) -> PairSet:
    """Every target sample paired with a random same-class source sample."""
    by_class = [np.flatnonzero(source.labels == c) for c in range(source.classes)]
    gen = rng.generator
    src = np.array([by_class[y][gen.integers(len(by_class[y]))] for y in target.labels], dtype=np.int64)
    tgt = np.arange(len(target))
    return PairSet(src, tgt, source.labels[src], np.ones(len(tgt), bool), ["GT"] * len(tgt),
                   len(source), len(target))


def corrupt_pairs(pairs: PairSet, ratio: float, rng: Rng, target_labels) -> PairSet:
    """Swap the target of ``ceil(ratio * len)`` random pairs for a different-class target."""
    if not 0 <= ratio <= 1:
        raise ValueError("ratio must lie in [0, 1]")
    target_labels = np.asarray(target_labels)
    n = len(pairs)
    count = min(n, math.ceil(ratio * n - 1e-9))
    chosen = rng.child("which").permutation(n)[:count]
    gen = rng.child("partner").generator
    tgt = pairs.target_idx.copy()
    for i in np.sort(chosen):
        pool = np.flatnonzero(target_labels != pairs.label[i])
        if len(pool) == 0:
            raise ValueError("no different-class target available for corruption")
        tgt[i] = pool[gen.integers(len(pool))]
    return PairSet(pairs.source_idx.copy(), tgt, pairs.label.copy(), pairs.kept.copy(),
                   list(pairs.provenance), pairs.n_source, pairs.n_target)


# ---------------------------------------------------------------------- I/O

_MAGIC = b"XDDATA\x00\x00"
_VERSION = 1
_HEADER = struct.Struct("<8sIIIIIQ")  # magic, version, domain, K, N, patch_dim, count
_DOMAINS = (SOURCE, TARGET)


class DatasetError(ValueError):
    pass


class DatasetFormatError(DatasetError):
    """Wrong magic bytes: not a dataset file."""


class DatasetVersionError(DatasetError):
    pass


class DatasetTruncatedError(DatasetError):
    pass


def save_dataset(path, ds: DomainDataset) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, _DOMAINS.index(ds.domain), ds.classes, ds.tokens,
                              ds.patch_dim, len(ds)))
        fh.write(np.ascontiguousarray(ds.labels, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(ds.samples, dtype="<f8").tobytes())


def load_dataset(path) -> DomainDataset:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:8] != _MAGIC:
        raise DatasetFormatError(f"{path}: bad magic, not a dataset file")
    if len(raw) < _HEADER.size:
        raise DatasetTruncatedError(f"{path}: header truncated")
    _, version, dom, k, n, pdim, count = _HEADER.unpack_from(raw)
    if version != _VERSION:
        raise DatasetVersionError(f"{path}: unsupported dataset version {version}")
    if dom >= len(_DOMAINS):
        raise DatasetFormatError(f"{path}: unknown domain code {dom}")
    off = _HEADER.size
    need = off + 8 * count + 8 * count * n * pdim
    if len(raw) < need:
        raise DatasetTruncatedError(f"{path}: expected {need} bytes, found {len(raw)}")
    labels = np.frombuffer(raw, dtype="<i8", count=count, offset=off).astype(np.int64)
    samples = np.frombuffer(raw, dtype="<f8", count=count * n * pdim, offset=off + 8 * count)
    return DomainDataset(samples.reshape(count, n * pdim).astype(np.float64), labels, _DOMAINS[dom], k, n, pdim)


def spec_dict(spec: ShiftSpec) -> dict:
    return asdict(spec)
