"""Monte-Carlo checks that attention-style averaging denoises Gaussian mixtures.

Samples ``x_i = u_{k_i} + h_i`` with unit-norm centers ``u_k`` and
``h_i ~ N(0, sigma^2/d I)``.  Two smoothers are compared against the raw
samples: the mean of the K nearest samples, and the softmax-weighted mean
with weights ``exp(lam <x_j, x_i>)``.

Coordinates.  Every statistic used here (norms, inner products, distances,
and the smoothers, which are linear combinations of the samples) is
invariant under rotations of R^d.  When ``d > C + m`` an instance is
therefore stored in an orthonormal basis of span{u_k, x_i}, of dimension
``C + m``: centers are drawn sequentially (each new Gaussian candidate has
N(0, 1) components along the current basis plus a chi-distributed
component along a fresh axis) and the residuals' orthogonal part uses the
Bartlett factor of the Wishart Gram matrix.  Both are exact in
distribution, so ``d`` in the millions costs nothing extra.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from statistics import NormalDist

import numpy as np

from .numcore import Rng

TOL = 1e-12


class CentersInfeasibleError(RuntimeError):
    pass


@dataclass(frozen=True)
class GmmSpec:
    d: int = 512
    m: int = 512
    C: int = 4
    sigma: float = 0.05
    r_lower: float = 1.2
    r_upper: float = 1.6
    delta: float = 0.05
    K: int = 84
    lam: float = 13.0
    universal_const: float = 1.0
    max_retries: int = 10_000

    def __post_init__(self):
        if min(self.d, self.m, self.C, self.K) < 1:
            raise ValueError("d, m, C and K must be >= 1")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(np.arange(self.m) % self.C, minlength=self.C)


@dataclass
class GmmInstance:
    centers: np.ndarray        # (C, r)
    samples: np.ndarray        # (m, r)
    assignments: np.ndarray    # (m,)
    ambient_dim: int

    @property
    def residuals(self) -> np.ndarray:
        return self.samples - self.centers[self.assignments]

    @property
    def own_centers(self) -> np.ndarray:
        return self.centers[self.assignments]


# ----------------------------------------------------------------- sampling


def _pairwise_ok(cands: np.ndarray, accepted: np.ndarray, lo: float, hi: float) -> tuple[bool, float, float]:
    if len(accepted) == 0:
        return True, math.inf, -math.inf
    dist = np.linalg.norm(accepted - cands, axis=1)
    return bool(dist.min() >= lo - TOL and dist.max() <= hi + TOL), float(dist.min()), float(dist.max())


def sample_centers(spec: GmmSpec, rng: Rng) -> np.ndarray:
    """C unit vectors with pairwise distances in [r_lower, r_upper].

    Returned in a basis whose first ``min(d, C)`` axes span the centers,
    shape ``(C, min(d, C))``.  Rejection sampling over random unit vectors;
    every eighth proposal is orthogonal to the accepted centers, which is
    what makes the tight ``r_lower = r_upper = sqrt(2)`` case reachable.
    """
    p = min(spec.d, spec.C)
    out = np.zeros((spec.C, p))
    basis = 0          # axes in use so far
    gen = rng.generator
    attempts = 0
    seen_lo, seen_hi = math.inf, -math.inf
    k = 0
    while k < spec.C:
        attempts += 1
        if attempts > spec.max_retries:
            raise CentersInfeasibleError(
                f"could not place center {k + 1}/{spec.C} within [{spec.r_lower}, {spec.r_upper}] "
                f"after {spec.max_retries} proposals in d={spec.d}; observed distances "
                f"{seen_lo:.4f}..{seen_hi:.4f}")
        cand = np.zeros(p)
        fresh = basis < spec.d and basis < p
        if attempts % 8 == 0 and fresh:
            cand[basis] = 1.0
        else:
            cand[:basis] = gen.normal(size=basis)
            if fresh:
                cand[basis] = math.sqrt(gen.chisquare(spec.d - basis))
            cand /= np.linalg.norm(cand)
        ok, lo, hi = _pairwise_ok(cand, out[:k], spec.r_lower, spec.r_upper)
        seen_lo, seen_hi = min(seen_lo, lo), max(seen_hi, hi)
        if ok:
            out[k] = cand
            if fresh and cand[basis] != 0.0:
                basis += 1
            k += 1
    return out


def balanced_assignments(m: int, C: int, rng: Rng) -> np.ndarray:
    return (np.arange(m) % C)[rng.permutation(m)]


def sample_instance(spec: GmmSpec, centers: np.ndarray, rng: Rng) -> GmmInstance:
    """Draw m samples around ``centers`` with per-coordinate variance sigma^2/d."""
    d, m, C = spec.d, spec.m, spec.C
    r = d if d <= C + m else C + m
    u = np.zeros((C, r))
    u[:, :centers.shape[1]] = centers
    k = balanced_assignments(m, C, rng.child("assign"))
    s = spec.sigma / math.sqrt(d)
    gen = rng.child("noise").generator
    if r == d:
        h = gen.normal(0.0, 1.0, size=(m, d)) * s
    else:
        h = np.zeros((m, r))
        h[:, :C] = gen.normal(size=(m, C))
        low = np.tril(gen.normal(size=(m, m)), -1)
        low[np.diag_indices(m)] = np.sqrt(gen.chisquare(d - C - np.arange(m)))
        h[:, C:] = low
        h *= s
    return GmmInstance(u, u[k] + h, k, d)


# ---------------------------------------------------------------- smoothing


def knn_average(inst: GmmInstance, K: int) -> np.ndarray:
    """Mean of the K nearest samples to each sample (itself included).

    Ties in distance go to the lower index.
    """
    x = inst.samples
    m = len(x)
    if K > m:
        raise ValueError(f"K={K} exceeds the sample count m={m}")
    sq = (x * x).sum(axis=1)
    dist = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(dist, 0.0)
    dist = np.maximum(dist, 0.0)
    nbr = np.argsort(dist, axis=1, kind="stable")[:, :K]
    w = np.zeros((m, m))
    np.put_along_axis(w, nbr, 1.0, axis=1)
    return (w @ x) / K


def softmax_smooth(inst: GmmInstance, lam: float) -> np.ndarray:
    """``x'_i = sum_j exp(lam <x_j, x_i>) x_j / sum_j exp(lam <x_j, x_i>)``."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    x = inst.samples
    if lam == 0:
        return np.broadcast_to(x.mean(axis=0), x.shape).copy()
    s = lam * (x @ x.T)
    w = np.exp(s - s.max(axis=1, keepdims=True))
    return (w @ x) / w.sum(axis=1, keepdims=True)


# ------------------------------------------------------------- verification


def wilson_interval(failures: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    z = NormalDist().inv_cdf(0.5 + confidence / 2)
    p = failures / n
    den = 1 + z * z / n
    mid = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return max(0.0, mid - half), min(1.0, mid + half)


def _cond(name: str, lhs: float, op: str, rhs: float) -> dict:
    holds = lhs >= rhs if op == ">=" else lhs <= rhs
    return {"name": name, "lhs": float(lhs), "op": op, "rhs": float(rhs), "holds": bool(holds)}


def theorem1_conditions(spec: GmmSpec) -> list[dict]:
    L = math.log(spec.m / spec.delta)
    gap = spec.r_lower - 2 * spec.sigma
    ratio = 2 * spec.sigma ** 2 / gap ** 2 if gap > 0 else math.inf
    return [
        _cond("r_lower > 2 sigma", gap, ">=", 0.0) | {"holds": gap > 0},
        _cond("d >= max(8, 2 sigma^2/(r_lower - 2 sigma)^2) log(m/delta)", spec.d, ">=", max(8.0, ratio) * L),
        _cond("K >= max(C_univ, 9 log(m/delta))", spec.K, ">=", max(spec.universal_const, 9 * L)),
        _cond("K <= smallest cluster size", spec.K, "<=", int(spec.cluster_sizes.min())),
    ]


def theorem2_conditions(spec: GmmSpec) -> list[dict]:
    m, d, s, dl, lam = spec.m, spec.d, spec.sigma, spec.delta, spec.lam
    m_i = int(spec.cluster_sizes.min())
    return [
        _cond("sigma <= 1", s, "<=", 1.0),
        _cond("20 lam sqrt(log(2m/(delta sigma))/d) <= 1/4",
              20 * lam * math.sqrt(math.log(2 * m / (dl * s)) / d), "<=", 0.25),
        _cond("(6m/m_i) exp(-lam/2) <= sigma/4", 6 * m / m_i * math.exp(-lam / 2), "<=", s / 4),
        _cond("|sqrt(2) - r_lower| <= 1/2", abs(math.sqrt(2) - spec.r_lower), "<=", 0.5),
        _cond("log(m/(2 delta sigma^2)) <= d", math.log(m / (2 * dl * s * s)), "<=", d),
    ]


@dataclass
class Report:
    theorem: str
    spec: dict
    conditions: list[dict]
    conditions_met: bool
    trials: int = 0
    failures: int = 0
    failure_rate: float = 0.0
    wilson: tuple[float, float] = (0.0, 1.0)
    budget: float = 0.0
    passed: bool | None = None
    per_trial: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    @property
    def status(self) -> str:
        if not self.conditions_met:
            return "conditions unmet"
        return "passed" if self.passed else "assertion failed"

    def as_dict(self) -> dict:
        return asdict(self) | {"status": self.status}

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=2, sort_keys=True)


def _run(name, spec, conds, trials, rng, budget, trial_fn, enforce) -> Report:
    met = all(c["holds"] for c in conds)
    rep = Report(name, asdict(spec), conds, met, budget=budget)
    if not met and enforce:
        return rep
    fails = 0
    for t in range(trials):
        r = rng.child("trial", t)
        centers = sample_centers(spec, r.child("centers"))
        inst = sample_instance(spec, centers, r.child("instance"))
        stats = trial_fn(inst)
        fails += not stats["event"]
        rep.per_trial.append(stats)
    rep.trials, rep.failures = trials, fails
    rep.failure_rate = fails / trials if trials else 0.0
    rep.wilson = wilson_interval(fails, trials)
    if met:
        rep.passed = rep.wilson[0] <= budget
    return rep


def _norms(a: np.ndarray) -> np.ndarray:
    return np.linalg.norm(a, axis=1)


def verify_theorem1(spec: GmmSpec, trials: int, rng: Rng, enforce_conditions: bool = True) -> Report:
    """kNN averaging moves every sample strictly closer to its own center."""
    def trial(inst):
        before = _norms(inst.residuals)
        after = _norms(knn_average(inst, spec.K) - inst.own_centers)
        return {"event": bool(np.all(after < before)),
                "noise_ratio": float(after.mean() / before.mean()),
                "mean_residual": float(before.mean()),
                "max_smoothed": float(after.max())}

    rep = _run("theorem1", spec, theorem1_conditions(spec), trials, rng, 3 * spec.delta, trial,
               enforce_conditions)
    if rep.per_trial:
        rep.summary = {"mean_noise_ratio": float(np.mean([p["noise_ratio"] for p in rep.per_trial])),
                       "mean_residual": float(np.mean([p["mean_residual"] for p in rep.per_trial]))}
    return rep


def verify_theorem2(spec: GmmSpec, trials: int, rng: Rng, enforce_conditions: bool = True) -> Report:
    """Softmax smoothing lands every sample within sigma/2 of its center."""
    def trial(inst):
        after = _norms(softmax_smooth(inst, spec.lam) - inst.own_centers)
        before = _norms(inst.residuals)
        return {"event": bool(after.max() <= spec.sigma / 2),
                "max_smoothed": float(after.max()),
                "max_residual": float(before.max()),
                "smoothing_ratio": float(after.max() / before.max())}

    rep = _run("theorem2", spec, theorem2_conditions(spec), trials, rng, 4 * spec.delta, trial,
               enforce_conditions)
    if rep.per_trial:
        rep.summary = {"mean_smoothing_ratio": float(np.mean([p["smoothing_ratio"] for p in rep.per_trial])),
                       "mean_max_smoothed": float(np.mean([p["max_smoothed"] for p in rep.per_trial]))}
    return rep


def sweep(spec: GmmSpec, param: str, values, trials: int, rng: Rng) -> list[dict]:
    """Per-value averages of the smoothing statistics, conditions evaluated per point.

    ``param`` is ``"K"`` (kNN averaging) or ``"lam"`` (softmax smoothing).
    """
    rows = []
    for v in values:
        s = GmmSpec(**(asdict(spec) | {param: v}))
        if param == "K":
            rep = verify_theorem1(s, trials, rng.child("sweep", param, str(v)), enforce_conditions=False)
            ratio = rep.summary["mean_noise_ratio"]
        else:
            rep = verify_theorem2(s, trials, rng.child("sweep", param, str(v)), enforce_conditions=False)
            ratio = rep.summary["mean_smoothing_ratio"]
        rows.append({param: v, "ratio": ratio, "failure_rate": rep.failure_rate,
                     "conditions_met": rep.conditions_met})
    return rows


def write_sweep_csv(path, rows: list[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
