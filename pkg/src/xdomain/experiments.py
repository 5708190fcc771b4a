"""End-to-end experiment drivers shared by the CLI and the acceptance suite."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .numcore import Rng
from .pseudolabel import FeatureBank, PairSet, pair_metrics, two_way_center_aware
from .synthdata import DomainDataset, ShiftSpec, corrupt_pairs, generate_domain_pair, true_positive_pairs
from .training import TrainConfig, evaluate, pretrain_source, train_cdtrans
from .vitmodel import ModelConfig, ModelParams, features_of

log = logging.getLogger(__name__)

VARIANTS = ("one-way-source", "one-way-target", "two-way", "tw+ca")

# (row name, L_s, L_{s+t}, L_t) with "-" for a disabled loss
ABLATION_ROWS = (
    ("cls/-/-", "cls", "-", "-"),
    ("cls/-/cls", "cls", "-", "cls"),
    ("cls/cls/cls", "cls", "cls", "cls"),
    ("cls/dtl/cls", "cls", "dtl", "cls"),
    ("cls/dtl/-", "cls", "dtl", "-"),
)


def row_config(base: TrainConfig, row) -> TrainConfig:
    _, ls, lst, lt = row
    return replace(base, use_source=ls == "cls", use_target=lt == "cls",
                   cross_loss="none" if lst == "-" else lst)


def feature_banks(params: ModelParams, src: DomainDataset, tgt: DomainDataset) -> tuple[FeatureBank, FeatureBank]:
    fs, ps = features_of(src.samples, params)
    ft, pt = features_of(tgt.samples, params)
    return FeatureBank(fs, src.labels, ps), FeatureBank(ft, None, pt)


def pair_table(sets: dict[str, PairSet], true_target_labels) -> list[dict]:
    rows = []
    for name in VARIANTS:
        r_s, r_t, prec = pair_metrics(sets[name], true_target_labels)
        rows.append({"variant": name, "Rec_s": r_s, "Rec_t": r_t, "Prec": prec,
                     "pairs": int(sets[name].kept.sum())})
    return rows


@dataclass
class Prepared:
    source: DomainDataset
    target: DomainDataset
    params: ModelParams
    baseline: float
    pairs: dict[str, PairSet]
    table: list[dict]


def prepare(seed: int, shift: ShiftSpec, model: ModelConfig, pretrain: TrainConfig,
            metric: str = "cosine") -> Prepared:
    """Generate data, pretrain on source, build all pair-set variants."""
    src, tgt = generate_domain_pair(shift, Rng(seed, "data"))
    params, hist = pretrain_source(src, replace(pretrain, seed=seed), model, target=tgt)
    base = hist[-1].target_accuracy if hist else evaluate(params, tgt).accuracy
    sets = two_way_center_aware(*feature_banks(params, src, tgt), metric=metric)
    return Prepared(src, tgt, params, base, sets, pair_table(sets, tgt.labels))


def run_ablation(prep: Prepared, train: TrainConfig, seed: int, pair_variant: str = "tw+ca",
                 rows=ABLATION_ROWS) -> list[dict]:
    out = []
    for row in rows:
        cfg = replace(row_config(train, row), seed=seed)
        params, hist = train_cdtrans(prep.pairs[pair_variant], prep.source, prep.target, prep.params, cfg,
                                     eval_every=0)
        acc = evaluate(params, prep.target).accuracy
        log.info("ablation %s seed %d: %.4f", row[0], seed, acc)
        out.append({"row": row[0], "L_s": row[1], "L_st": row[2], "L_t": row[3], "seed": seed,
                    "target_accuracy": acc})
    return out


# ------------------------------------------------------------- noise sweep

SWEEP_MODELS = ("cross", "direct", "oracle")


def sweep_configs(train: TrainConfig) -> dict[str, TrainConfig]:
    """The cross-attention model is the full three-branch objective; the direct model drops the
    source-target branch and trains the target branch on the pair label alone. The oracle runs
    the cross-attention model on the true pairs only."""
    cross = replace(train, use_source=True, use_target=True, cross_loss="dtl")
    direct = replace(train, use_source=True, use_target=True, cross_loss="none")
    return {"cross": cross, "direct": direct, "oracle": cross}


def subsample_pairs(pairs: PairSet, fraction: float, rng: Rng) -> PairSet:
    """Keep a uniformly drawn ``fraction`` of the pairs (at least one when any exist)."""
    if not 0 < fraction <= 1:
        raise ValueError("pair fraction must be in (0, 1]")
    if fraction == 1 or len(pairs) == 0:
        return pairs
    keep = np.zeros(len(pairs), bool)
    keep[rng.permutation(len(pairs))[:max(1, int(fraction * len(pairs)))]] = True
    return replace(pairs, kept=pairs.kept & keep).kept_only()


def noise_sweep(prep: Prepared, train: TrainConfig, ratios, seed: int, pair_fraction: float = 1.0) -> list[dict]:
    """Target accuracy of the three models at each false-positive ratio.

    The clean pair set is every target sample matched to a same-class source sample, thinned to
    ``pair_fraction``; each ratio then relabels that share of pairs to a wrong class."""
    rng = Rng(seed, "noise-sweep")
    clean = subsample_pairs(true_positive_pairs(prep.source, prep.target, rng.child("pairs")),
                            pair_fraction, rng.child("subset"))
    cfgs = sweep_configs(replace(train, seed=seed))
    rows = []
    for ratio in ratios:
        noisy = corrupt_pairs(clean, ratio, rng.child("corrupt", repr(float(ratio))), prep.target.labels)
        true_pair = noisy.label == prep.target.labels[noisy.target_idx]
        row = {"ratio": float(ratio), "seed": seed,
               "false_positive_rate": float(1.0 - true_pair.mean()) if len(noisy) else 0.0}
        for name in SWEEP_MODELS:
            pairs = replace(noisy, kept=noisy.kept & true_pair) if name == "oracle" else noisy
            params, _ = train_cdtrans(pairs, prep.source, prep.target, prep.params, cfgs[name], eval_every=0)
            row[name] = evaluate(params, prep.target).accuracy
        log.info("noise sweep seed %d ratio %.2f: %s", seed, ratio, row)
        rows.append(row)
    return rows


def mean_by(rows: list[dict], key: str, fields) -> list[dict]:
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r)
    return [{key: k, **{f: float(np.mean([r[f] for r in g])) for f in fields}, "n": len(g)}
            for k, g in groups.items()]
