"""Miniature patch transformer and the three weight-sharing branches.

All three branches (source, target, source-target) read one
:class:`ModelParams`.  The source and target branches are ordinary pre-norm
transformer passes; the source-target branch consumes the per-layer
queries of a source trace and keys/values of a target trace.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .attention import AttentionParams, attend, attend_and_project, project_qkv
from .numcore import Tensor


@dataclass(frozen=True)
class ModelConfig:
    patch_count: int = 16
    patch_dim: int = 12
    width: int = 64
    layers: int = 4
    heads: int = 4
    classes: int = 4
    use_cls_token: bool = True
    mlp_ratio: int = 2
    ln_eps: float = 1e-6
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("patch_count", "patch_dim", "width", "heads", "classes", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1")
        if self.layers < 0:
            raise ValueError("ModelConfig.layers must be >= 0")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")

    @property
    def sequence_length(self) -> int:
        return self.patch_count + int(self.use_cls_token)

    @property
    def sample_length(self) -> int:
        return self.patch_count * self.patch_dim


def _layer_names(i: int) -> list[str]:
    p = f"layer{i}."
    return [p + n for n in ("ln1_g", "ln1_b", "w_q", "w_k", "w_v", "w_o",
                            "ln2_g", "ln2_b", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")]


@dataclass
class ModelParams:
    """The single shared weight set.  ``tensors`` keeps insertion order."""

    cfg: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: ModelConfig, rng: nc.Rng) -> "ModelParams":
        w, k, hidden, std = cfg.width, cfg.classes, cfg.width * cfg.mlp_ratio, cfg.init_std
        shapes: dict[str, tuple[tuple[int, ...], str]] = {
            "patch_w": ((cfg.patch_dim, w), "normal"),
            "patch_b": ((1, w), "zeros"),
        }
        if cfg.use_cls_token:
            shapes["cls_token"] = ((1, w), "normal")
        shapes["pos"] = ((cfg.sequence_length, w), "normal")
        for i in range(cfg.layers):
            a, b, q, kk, v, o, c, d, w1, b1, w2, b2 = _layer_names(i)
            shapes.update({
                a: ((1, w), "ones"), b: ((1, w), "zeros"),
                q: ((w, w), "normal"), kk: ((w, w), "normal"),
                v: ((w, w), "normal"), o: ((w, w), "normal"),
                c: ((1, w), "ones"), d: ((1, w), "zeros"),
                w1: ((w, hidden), "normal"), b1: ((1, hidden), "zeros"),
                w2: ((hidden, w), "normal"), b2: ((1, w), "zeros"),
            })
        shapes.update({
            "lnf_g": ((1, w), "ones"), "lnf_b": ((1, w), "zeros"),
            "head_w": ((w, k), "normal"), "head_b": ((1, k), "zeros"),
        })
        tensors = {}
        for name, (shape, kind) in shapes.items():
            if kind == "normal":
                data = rng.child(name).normal(shape, std)
            elif kind == "ones":
                data = np.ones(shape)
            else:
                data = np.zeros(shape)
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        return cls(cfg, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def leaves(self) -> list[Tensor]:
        return list(self.tensors.values())

    def attn(self, i: int) -> AttentionParams:
        p = f"layer{i}."
        t = self.tensors
        return AttentionParams(t[p + "w_q"], t[p + "w_k"], t[p + "w_v"], t[p + "w_o"], heads=self.cfg.heads)

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: Tensor(v.data.copy(), requires_grad=True, name=k)
                                      for k, v in self.tensors.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def equals(self, other: "ModelParams") -> bool:
        return (self.cfg == other.cfg and list(self.tensors) == list(other.tensors)
                and all(np.array_equal(v.data, other.tensors[k].data) for k, v in self.tensors.items()))


@dataclass
class BranchTrace:
    """Per-layer record of one source or target branch pass."""

    layer_inputs: list[Tensor]
    queries: list[Tensor]
    keys: list[Tensor]
    values: list[Tensor]
    attn_out: list[Tensor]
    feature: Tensor
    logits: Tensor

    def __len__(self):
        return len(self.queries)


def patchify(sample, cfg: ModelConfig) -> np.ndarray:
    """Reshape flat sample(s) into token rows of width ``patch_dim``."""
    x = np.asarray(sample, dtype=np.float64)
    if x.shape[-1] != cfg.sample_length:
        raise nc.ShapeError(f"sample length {x.shape[-1]} != patch_count*patch_dim = {cfg.sample_length}")
    return x.reshape(*x.shape[:-1], cfg.patch_count, cfg.patch_dim)


def flatten(tokens: np.ndarray) -> np.ndarray:
    t = np.asarray(tokens)
    return t.reshape(*t.shape[:-2], t.shape[-2] * t.shape[-1])


def _as_batch(tokens, cfg: ModelConfig) -> Tensor:
    t = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    if t.ndim == 2:
        t = nc.reshape(t, (1, *t.shape))
    if t.ndim != 3 or t.shape[1:] != (cfg.patch_count, cfg.patch_dim):
        raise nc.ShapeError(f"tokens of shape {t.shape} do not match ({cfg.patch_count}, {cfg.patch_dim})")
    return t


def _ln(x: Tensor, params: ModelParams, g: str, b: str) -> Tensor:
    return nc.layernorm(x, params[g], params[b], params.cfg.ln_eps)


def _mlp(x: Tensor, params: ModelParams, i: int) -> Tensor:
    p = f"layer{i}."
    h = _ln(x, params, p + "ln2_g", p + "ln2_b")
    h = nc.gelu(h @ params[p + "mlp_w1"] + params[p + "mlp_b1"])
    return h @ params[p + "mlp_w2"] + params[p + "mlp_b2"]


def embed(tokens: Tensor, params: ModelParams) -> Tensor:
    cfg = params.cfg
    x = tokens @ params["patch_w"] + params["patch_b"]
    if cfg.use_cls_token:
        cls = nc.broadcast_to(nc.reshape(params["cls_token"], (1, 1, cfg.width)), (x.shape[0], 1, cfg.width))
        x = nc.concat([cls, x], axis=1)
    return x + params["pos"]


def _head(x: Tensor, params: ModelParams) -> tuple[Tensor, Tensor]:
    h = _ln(x, params, "lnf_g", "lnf_b")
    feat = h[:, 0, :] if params.cfg.use_cls_token else nc.mean(h, axis=1)
    return feat, feat @ params["head_w"] + params["head_b"]


def forward_branch(tokens, params: ModelParams, cfg: ModelConfig | None = None) -> tuple[Tensor, BranchTrace]:
    """Source/target branch: pre-norm blocks with self-attention.

    ``tokens`` is ``(N, patch_dim)`` or ``(B, N, patch_dim)``; logits are
    always ``(B, classes)``.
    """
    cfg = cfg or params.cfg
    x = embed(_as_batch(tokens, cfg), params)
    ins, qs, ks, vs, outs = [], [], [], [], []
    for i in range(cfg.layers):
        p = f"layer{i}."
        ins.append(x)
        q, k, v = project_qkv(_ln(x, params, p + "ln1_g", p + "ln1_b"), params.attn(i))
        a = attend_and_project(q, k, v, params.attn(i))
        qs.append(q), ks.append(k), vs.append(v), outs.append(a)
        x = x + a
        x = x + _mlp(x, params, i)
    feat, logits = _head(x, params)
    return logits, BranchTrace(ins, qs, ks, vs, outs, feat, logits)


def forward_cross_branch(trace_s: BranchTrace, trace_t: BranchTrace, params: ModelParams,
                         cfg: ModelConfig | None = None, return_feature: bool = False):
    """Source-target branch built from the two traces.

    Layer ``n`` attends with source-layer-``n`` queries over target-layer-``n``
    keys/values, adds the result to this branch's layer ``n-1`` output (no
    addition at the first layer) and applies the shared MLP sub-block.
    """
    cfg = cfg or params.cfg
    if len(trace_s) != len(trace_t) or len(trace_s) != cfg.layers:
        raise nc.ShapeError(f"trace lengths {len(trace_s)}/{len(trace_t)} do not match layers={cfg.layers}")
    if cfg.layers == 0:
        raise ValueError("the source-target branch needs at least one layer")
    z = None
    for i in range(cfg.layers):
        a = attend_and_project(trace_s.queries[i], trace_t.keys[i], trace_t.values[i], params.attn(i))
        z = a if z is None else z + a
        z = z + _mlp(z, params, i)
    feat, logits = _head(z, params)
    return (logits, feat) if return_feature else logits


def cross_attention_map(sample_s, sample_t, params: ModelParams, layer: int = -1) -> np.ndarray:
    """(heads, M, N) source-target attention weights for one pair of flat samples."""
    _, tr_s = forward_branch(patchify(sample_s, params.cfg), params)
    _, tr_t = forward_branch(patchify(sample_t, params.cfg), params)
    q, k = tr_s.queries[layer], tr_t.keys[layer]
    _, w = attend(q, k, tr_t.values[layer])
    return w.data[0]


def _batched(samples, cfg, batch_size):
    x = patchify(samples, cfg)
    if x.ndim == 2:
        x = x[None]
    for lo in range(0, x.shape[0], batch_size):
        yield x[lo:lo + batch_size]


def logits_of(samples, params: ModelParams, batch_size: int = 256) -> np.ndarray:
    """Target-branch logits for flat samples, no tape."""
    return np.concatenate([forward_branch(b, params)[0].data for b in _batched(samples, params.cfg, batch_size)])


def features_of(samples, params: ModelParams, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Pooled features (the classifier input) and softmax probabilities."""
    feats, probs = [], []
    for b in _batched(samples, params.cfg, batch_size):
        logits, tr = forward_branch(b, params)
        feats.append(tr.feature.data)
        probs.append(nc._softmax_np(logits.data))
    return np.concatenate(feats), np.concatenate(probs)


def predict(sample, params: ModelParams, cfg: ModelConfig | None = None) -> np.ndarray | int:
    """Target-branch argmax; ties go to the lowest class index."""
    x = np.asarray(sample, dtype=np.float64)
    pred = np.argmax(logits_of(x, params), axis=-1)
    return int(pred[0]) if x.ndim == 1 else pred


# --------------------------------------------------------------- checkpoint

_CKPT_MAGIC = b"XDMODEL\x00"
_CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ModelParams) -> None:
    header = {
        "config": asdict(params.cfg),
        "arrays": [[k, list(v.shape)] for k, v in params.tensors.items()],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(hb)))
        fh.write(hb)
        for v in params.tensors.values():
            fh.write(np.ascontiguousarray(v.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:8] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    cfg = ModelConfig(**header["config"])
    off = 16 + hlen
    tensors = {}
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        chunk = raw[off:off + 8 * n]
        if len(chunk) != 8 * n:
            raise CheckpointError(f"{path}: truncated at array {name}")
        tensors[name] = Tensor(np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64),
                               requires_grad=True, name=name)
        off += 8 * n
    return ModelParams(cfg, tensors)
