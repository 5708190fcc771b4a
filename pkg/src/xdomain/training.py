"""Losses, SGD with momentum, source-only pretraining and three-branch training."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .numcore import Rng, Tape, Tensor
from .pseudolabel import PairSet
from .synthdata import DomainDataset
from .vitmodel import ModelConfig, ModelParams, forward_branch, forward_cross_branch, logits_of, patchify

log = logging.getLogger(__name__)

CROSS_MODES = ("dtl", "cls", "none")
LOG_EPS = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    use_source: bool = True       # L_s
    use_target: bool = True       # L_t
    cross_loss: str = "dtl"       # L_{s+t}: distillation, classification or off
    teacher_gradient: bool = True  # let the distillation term also train the source-target branch

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.cross_loss not in CROSS_MODES:
            raise ValueError(f"cross_loss must be one of {CROSS_MODES}")


@dataclass
class MetricsRecord:
    epoch: int
    losses: dict[str, float]
    target_accuracy: float | None = None
    source_accuracy: float | None = None
    pair_metrics: dict[str, float | None] | None = None

    def as_dict(self) -> dict:
        return asdict(self)


# -------------------------------------------------------------------- losses


def _onehot(labels, k: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range for {k} classes: {labels}")
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(logits, label) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the batch."""
    logits = nc.as_tensor(logits)
    if logits.ndim == 1:
        logits = nc.reshape(logits, (1, logits.shape[0]))
    y = _onehot(label, logits.shape[-1])
    if len(y) != logits.shape[0]:
        raise ValueError("one label per row of logits required")
    return nc.mul(nc.sum(nc.mul(nc.log_softmax(logits), Tensor(y))), -1.0 / len(y))


def distillation_loss(q, p) -> float:
    """Soft cross-entropy ``-sum_k q_k log p_k`` on probability vectors."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    val = -(q * np.log(np.maximum(p, LOG_EPS))).sum(axis=-1)
    return float(np.mean(val))


def distillation_from_logits(teacher_logits: Tensor, student_logits: Tensor, detach_teacher: bool = True) -> Tensor:
    """Batch-mean soft cross-entropy of the student against the teacher's softmax.

    With ``detach_teacher`` the teacher probabilities are constants;
    otherwise the gradient also reaches the teacher logits.
    """
    if detach_teacher:
        q = Tensor(nc._softmax_np(teacher_logits.data))
    else:
        q = nc.softmax(teacher_logits)
    b = student_logits.shape[0] if student_logits.ndim > 1 else 1
    return nc.mul(nc.sum(nc.mul(nc.log_softmax(student_logits), q)), -1.0 / b)


# ----------------------------------------------------------------- optimiser


@dataclass
class SgdState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: ModelParams | dict, grads, state: SgdState, cfg: TrainConfig) -> None:
    """v <- momentum*v + grad + weight_decay*param;  param <- param - lr*v (in place)."""
    tensors = params.tensors if isinstance(params, ModelParams) else params
    for name, p in tensors.items():
        g = grads.get(p) if isinstance(grads, nc.GradTable) else grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise nc.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        v = state.velocity.get(name)
        step = g + cfg.weight_decay * p.data
        v = step if v is None else cfg.momentum * v + step
        state.velocity[name] = v
        p.data = p.data - cfg.learning_rate * v


# ---------------------------------------------------------------- evaluation


@dataclass
class Evaluation:
    accuracy: float
    per_class: list[float]
    average: float          # macro average over classes present

    def as_dict(self):
        return asdict(self)


def accuracy_from_predictions(pred, labels, classes: int) -> Evaluation:
    pred, labels = np.asarray(pred), np.asarray(labels)
    acc = float(np.mean(pred == labels)) if len(labels) else 0.0
    per = []
    for c in range(classes):
        m = labels == c
        per.append(float(np.mean(pred[m] == c)) if m.any() else float("nan"))
    present = [a for a in per if a == a]
    return Evaluation(acc, per, float(np.mean(present)) if present else 0.0)


def evaluate(params: ModelParams, dataset: DomainDataset) -> Evaluation:
    pred = np.argmax(logits_of(dataset.samples, params), axis=-1)
    return accuracy_from_predictions(pred, dataset.labels, params.cfg.classes)


# ------------------------------------------------------------------ training


def _tokens(ds: DomainDataset, idx, cfg: ModelConfig) -> np.ndarray:
    return patchify(ds.samples[idx], cfg)


def pretrain_source(src: DomainDataset, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
                    init: ModelParams | None = None, target: DomainDataset | None = None):
    """Cross-entropy training on labelled source data only.

    Returns ``(params, history)``; with ``target`` given each record also
    carries the target accuracy (the source-only baseline).
    """
    if init is None:
        if model_cfg is None:
            raise ValueError("need model_cfg or init")
        init = ModelParams.init(model_cfg, Rng(cfg.seed, "init"))
    params = init.copy()
    mcfg = params.cfg
    state = SgdState()
    rng = Rng(cfg.seed, "pretrain")
    history = []
    n = len(src)
    for epoch in range(cfg.epochs):
        order = rng.child("epoch", epoch).permutation(n)
        tot, nb = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            with Tape() as tape:
                logits, _ = forward_branch(_tokens(src, idx, mcfg), params)
                loss = cross_entropy(logits, src.labels[idx])
            sgd_step(params, nc.backward(tape, loss, wrt=params.leaves()), state, cfg)
            tot += loss.item()
            nb += 1
        rec = MetricsRecord(epoch, {"L_s": tot / nb}, source_accuracy=evaluate(params, src).accuracy)
        if target is not None:
            rec.target_accuracy = evaluate(params, target).accuracy
        log.info("pretrain epoch %d: %s", epoch, rec)
        history.append(rec)
    return params, history


def cdtrans_loss(params: ModelParams, xs: np.ndarray, xt: np.ndarray, labels: np.ndarray,
                 cfg: TrainConfig) -> tuple[Tensor, dict[str, float]]:
    """Sum of the enabled branch losses for one batch of pairs (call inside a Tape)."""
    terms: dict[str, Tensor] = {}
    need_s = cfg.use_source or cfg.cross_loss != "none"
    need_t = cfg.use_target or cfg.cross_loss != "none"
    if need_s:
        logit_s, tr_s = forward_branch(xs, params)
        if cfg.use_source:
            terms["L_s"] = cross_entropy(logit_s, labels)
    if need_t:
        logit_t, tr_t = forward_branch(xt, params)
        if cfg.use_target:
            terms["L_t"] = cross_entropy(logit_t, labels)
    if cfg.cross_loss != "none":
        logit_st = forward_cross_branch(tr_s, tr_t, params)
        if cfg.cross_loss == "cls":
            terms["L_st"] = cross_entropy(logit_st, labels)
        else:
            terms["L_st"] = distillation_from_logits(logit_st, logit_t, detach_teacher=not cfg.teacher_gradient)
    if not terms:
        raise ValueError("all losses are disabled")
    total = None
    for t in terms.values():
        total = t if total is None else total + t
    return total, {k: v.item() for k, v in terms.items()}


def train_cdtrans(pairs: PairSet, src: DomainDataset, tgt: DomainDataset, init: ModelParams,
                  cfg: TrainConfig, eval_every: int = 1, true_target_labels=None):
    """Three-branch training over the kept pairs; returns ``(params, history)``.

    The target branch is supervised with the pair label (the source label,
    which agrees with the target pseudo label for kept pairs).
    """
    kept = pairs.kept_only()
    if len(kept) == 0:
        raise ValueError("no kept pairs to train on; relax the center-aware filtering or use the two-way set")
    params = init.copy()
    mcfg = params.cfg
    state = SgdState()
    rng = Rng(cfg.seed, "cdtrans")
    history = []
    n = len(kept)
    pm = None
    if true_target_labels is not None:
        from .pseudolabel import pair_metrics
        r_s, r_t, prec = pair_metrics(pairs, true_target_labels)
        pm = {"Rec_s": r_s, "Rec_t": r_t, "Prec": prec}
    for epoch in range(cfg.epochs):
        order = rng.child("epoch", epoch).permutation(n)
        sums: dict[str, float] = {}
        nb = 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            xs = _tokens(src, kept.source_idx[idx], mcfg)
            xt = _tokens(tgt, kept.target_idx[idx], mcfg)
            with Tape() as tape:
                loss, parts = cdtrans_loss(params, xs, xt, kept.label[idx], cfg)
            sgd_step(params, nc.backward(tape, loss, wrt=params.leaves()), state, cfg)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            sums["total"] = sums.get("total", 0.0) + loss.item()
            nb += 1
        rec = MetricsRecord(epoch, {k: v / nb for k, v in sums.items()}, pair_metrics=pm)
        if eval_every and ((epoch + 1) % eval_every == 0 or epoch == cfg.epochs - 1):
            rec.target_accuracy = evaluate(params, tgt).accuracy
        log.info("cdtrans epoch %d: %s", epoch, rec)
        history.append(rec)
    return params, history
