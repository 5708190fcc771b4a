"""Two-way pair construction and center-aware pseudo-label filtering.

Pairs come from nearest neighbours in feature space in both directions
(every source sample gets its closest target, every target sample its
closest source).  Target pseudo labels come from one round of weighted
k-means seeded by the classifier probabilities; a pair survives filtering
only if its target's pseudo label equals its source label.

Ties are always broken towards the lowest index.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

METRICS = ("cosine", "euclidean")


class PairingError(ValueError):
    pass


@dataclass
class FeatureBank:
    features: np.ndarray
    labels: np.ndarray | None = None
    probs: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.probs is not None:
            self.probs = np.atleast_2d(np.asarray(self.probs, dtype=np.float64))
            if not np.allclose(self.probs.sum(axis=1), 1.0, atol=1e-9, rtol=0):
                raise ValueError("probs rows must sum to 1")
            if len(self.probs) != len(self.features):
                raise ValueError("probs and features disagree on sample count")

    def __len__(self):
        return len(self.features)

    def to_csv(self, path):
        d = self.features.shape[1]
        k = 0 if self.probs is None else self.probs.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "label"] + [f"f{j}" for j in range(d)] + [f"p{j}" for j in range(k)])
            for i in range(len(self)):
                lab = "" if self.labels is None else int(self.labels[i])
                row = [i, lab] + [repr(float(x)) for x in self.features[i]]
                if k:
                    row += [repr(float(x)) for x in self.probs[i]]
                w.writerow(row)

    @classmethod
    def from_csv(cls, path) -> "FeatureBank":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        head, body = rows[0], rows[1:]
        fcols = [j for j, h in enumerate(head) if h.startswith("f")]
        pcols = [j for j, h in enumerate(head) if h.startswith("p")]
        feats = np.array([[float(r[j]) for j in fcols] for r in body])
        labels = None if not body or body[0][1] == "" else np.array([int(r[1]) for r in body])
        probs = np.array([[float(r[j]) for j in pcols] for r in body]) if pcols else None
        return cls(feats, labels, probs)


@dataclass
class PairSet:
    """Training pairs; ``label`` is always the source sample's label."""

    source_idx: np.ndarray
    target_idx: np.ndarray
    label: np.ndarray
    kept: np.ndarray
    provenance: list[str]
    n_source: int
    n_target: int

    def __post_init__(self):
        self.source_idx = np.asarray(self.source_idx, dtype=np.int64)
        self.target_idx = np.asarray(self.target_idx, dtype=np.int64)
        self.label = np.asarray(self.label, dtype=np.int64)
        self.kept = np.asarray(self.kept, dtype=bool)
        self.provenance = list(self.provenance)

    def __len__(self):
        return len(self.source_idx)

    def kept_only(self) -> "PairSet":
        m = self.kept
        return PairSet(self.source_idx[m], self.target_idx[m], self.label[m], self.kept[m],
                       [p for p, k in zip(self.provenance, m) if k], self.n_source, self.n_target)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source_idx", "target_idx", "label", "kept", "provenance"])
            for s, t, y, k, p in zip(self.source_idx, self.target_idx, self.label, self.kept, self.provenance):
                w.writerow([int(s), int(t), int(y), int(k), p])

    @classmethod
    def from_csv(cls, path, n_source: int, n_target: int) -> "PairSet":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([int(r["source_idx"]) for r in rows], [int(r["target_idx"]) for r in rows],
                   [int(r["label"]) for r in rows], [r["kept"] == "1" for r in rows],
                   [r["provenance"] for r in rows], n_source, n_target)


@dataclass
class Centers:
    vectors: np.ndarray            # (K, D); rows of undefined centers are zero
    defined: np.ndarray            # (K,) bool
    counts: np.ndarray = field(default=None)  # per-class weight or membership

    def __len__(self):
        return len(self.vectors)


# ----------------------------------------------------------------- distances


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(n, 1e-12)


def distance_matrix(a: np.ndarray, b: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """Pairwise distances; cosine distance is ``1 - cos`` on L2-normalised rows."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    if metric == "cosine":
        return 1.0 - _unit(a) @ _unit(b).T
    if metric == "euclidean":
        sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
        return np.sqrt(np.maximum(sq, 0.0))
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def _require(bank: FeatureBank, what: str):
    if len(bank) == 0:
        raise PairingError(f"{what} feature bank is empty")


def build_pairs_source(src: FeatureBank, tgt: FeatureBank, metric: str = "cosine") -> PairSet:
    """One pair per source sample, partnered with its nearest target."""
    _require(src, "source")
    _require(tgt, "target")
    t = np.argmin(distance_matrix(src.features, tgt.features, metric), axis=1)
    s = np.arange(len(src))
    return PairSet(s, t, _source_labels(src)[s], np.ones(len(s), bool), ["S"] * len(s), len(src), len(tgt))


def build_pairs_target(src: FeatureBank, tgt: FeatureBank, metric: str = "cosine") -> PairSet:
    """One pair per target sample, partnered with its nearest source."""
    _require(src, "source")
    _require(tgt, "target")
    s = np.argmin(distance_matrix(tgt.features, src.features, metric), axis=1)
    t = np.arange(len(tgt))
    return PairSet(s, t, _source_labels(src)[s], np.ones(len(t), bool), ["T"] * len(t), len(src), len(tgt))


def _source_labels(src: FeatureBank) -> np.ndarray:
    if src.labels is None:
        return np.full(len(src), -1, dtype=np.int64)
    return src.labels


def union_pairs(ps: PairSet, pt: PairSet) -> PairSet:
    """Set union on (source, target); a pair found both ways is tagged ``S+T``."""
    order: dict[tuple[int, int], int] = {}
    src, tgt, lab, kept, prov = [], [], [], [], []
    for pairs in (ps, pt):
        for s, t, y, k, p in zip(pairs.source_idx, pairs.target_idx, pairs.label, pairs.kept, pairs.provenance):
            key = (int(s), int(t))
            if key in order:
                j = order[key]
                if p not in prov[j].split("+"):
                    prov[j] = prov[j] + "+" + p
                kept[j] = kept[j] or bool(k)
                continue
            order[key] = len(src)
            src.append(key[0]), tgt.append(key[1]), lab.append(int(y)), kept.append(bool(k)), prov.append(p)
    return PairSet(src, tgt, lab, kept, prov, max(ps.n_source, pt.n_source), max(ps.n_target, pt.n_target))


# ------------------------------------------------------------------- centers


def _prepared(tgt: FeatureBank, metric: str) -> np.ndarray:
    return _unit(tgt.features) if metric == "cosine" else tgt.features


def initial_centers(tgt: FeatureBank, metric: str = "cosine") -> Centers:
    """Probability-weighted class means of the target features.

    With the cosine metric the features are L2-normalised first.  A class
    whose total weight is zero gets no center (``defined`` is False).
    """
    if tgt.probs is None:
        raise PairingError("initial_centers needs classifier probabilities for every target sample")
    f = _prepared(tgt, metric)
    w = tgt.probs                        # (n, K)
    mass = w.sum(axis=0)                 # (K,)
    defined = mass > 0
    vec = np.zeros((w.shape[1], f.shape[1]))
    vec[defined] = (w[:, defined].T @ f) / mass[defined, None]
    return Centers(vec, defined, mass)


def assign_labels(tgt: FeatureBank, centers: Centers, metric: str = "cosine") -> np.ndarray:
    """Nearest defined center per target sample (lowest class on ties)."""
    if not centers.defined.any():
        raise PairingError("no defined class centers to assign labels against")
    f = _prepared(tgt, metric)
    d = distance_matrix(f, centers.vectors, metric)
    d[:, ~centers.defined] = np.inf
    return np.argmin(d, axis=1)


def recompute_centers(tgt: FeatureBank, labels, previous: Centers | None = None,
                      metric: str = "cosine", classes: int | None = None) -> Centers:
    """Unweighted means of each pseudo-labelled class.

    A class with no members keeps its ``previous`` center, or is undefined
    when there is none.
    """
    labels = np.asarray(labels)
    f = _prepared(tgt, metric)
    k = classes if classes is not None else (len(previous) if previous is not None else int(labels.max()) + 1)
    vec = np.zeros((k, f.shape[1]))
    defined = np.zeros(k, bool)
    counts = np.bincount(labels, minlength=k)[:k].astype(np.float64)
    for c in range(k):
        if counts[c] > 0:
            vec[c] = f[labels == c].mean(axis=0)
            defined[c] = True
        elif previous is not None and previous.defined[c]:
            vec[c] = previous.vectors[c]
            defined[c] = True
    return Centers(vec, defined, counts)


def center_aware_labels(tgt: FeatureBank, metric: str = "cosine") -> np.ndarray:
    """Weighted centers -> nearest-center labels -> recomputed centers -> final labels."""
    c0 = initial_centers(tgt, metric)
    y0 = assign_labels(tgt, c0, metric)
    c1 = recompute_centers(tgt, y0, previous=c0, metric=metric, classes=len(c0))
    return assign_labels(tgt, c1, metric)


def filter_pairs(pairs: PairSet, src_labels, pseudo_labels) -> PairSet:
    """Keep a pair iff its target pseudo label equals its source label."""
    src_labels = np.asarray(src_labels)
    pseudo_labels = np.asarray(pseudo_labels)
    ok = pseudo_labels[pairs.target_idx] == src_labels[pairs.source_idx]
    return replace(pairs, kept=pairs.kept & ok, provenance=list(pairs.provenance))


def pair_metrics(pairs: PairSet, true_tgt_labels, true_src_labels=None) -> tuple[float, float, float | None]:
    """(Rec_s, Rec_t, Prec) in percent over the kept pairs.

    ``Prec`` compares each pair's label with the target's true label and is
    ``None`` when nothing is kept.
    """
    true_tgt_labels = np.asarray(true_tgt_labels)
    k = pairs.kept
    rec_s = 100.0 * len(np.unique(pairs.source_idx[k])) / pairs.n_source if pairs.n_source else 0.0
    rec_t = 100.0 * len(np.unique(pairs.target_idx[k])) / pairs.n_target if pairs.n_target else 0.0
    if not k.any():
        return rec_s, rec_t, None
    lab = pairs.label[k] if true_src_labels is None else np.asarray(true_src_labels)[pairs.source_idx[k]]
    prec = 100.0 * float(np.mean(lab == true_tgt_labels[pairs.target_idx[k]]))
    return rec_s, rec_t, prec


def two_way_center_aware(src: FeatureBank, tgt: FeatureBank, metric: str = "cosine") -> dict[str, PairSet]:
    """All four pair-set variants: one-way-source, one-way-target, two-way, Tw+Ca."""
    ps = build_pairs_source(src, tgt, metric)
    pt = build_pairs_target(src, tgt, metric)
    both = union_pairs(ps, pt)
    pseudo = center_aware_labels(tgt, metric)
    return {
        "one-way-source": ps,
        "one-way-target": pt,
        "two-way": both,
        "tw+ca": filter_pairs(both, _source_labels(src), pseudo),
    }
