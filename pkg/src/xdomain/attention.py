"""Multi-head scaled dot-product self- and cross-attention.

Inputs are token sequences of shape ``(..., tokens, width)``; leading axes
are batch axes.  Per head the output is ``softmax(Q K^T / sqrt(d_k)) V``;
heads are concatenated and projected by ``w_o``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int

    def __post_init__(self):
        width = self.w_q.shape[0]
        if self.heads < 1 or width % self.heads:
            raise ValueError(f"width {width} not divisible by heads {self.heads}")
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).shape != (width, width):
                raise nc.ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {(width, width)}")

    @property
    def width(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_k(self) -> int:
        return self.width // self.heads

    d_v = d_k

    @classmethod
    def init(cls, width: int, heads: int, rng: nc.Rng, std: float = 0.02) -> "AttentionParams":
        mats = [Tensor(rng.normal((width, width), std), requires_grad=True) for _ in range(4)]
        return cls(*mats, heads=heads)


def _check_width(x: Tensor, p: AttentionParams):
    if x.shape[-1] != p.width:
        raise nc.ShapeError(f"token width {x.shape[-1]} does not match attention width {p.width}")
    if x.ndim < 2 or x.shape[-2] < 1:
        raise nc.ShapeError(f"need at least one token, got shape {x.shape}")


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., n, width) -> (..., heads, n, width // heads)."""
    *lead, n, width = x.shape
    y = nc.reshape(x, (*lead, n, heads, width // heads))
    k = len(lead)
    return nc.transpose(y, (*range(k), k + 1, k, k + 2))


def merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    k = len(lead)
    y = nc.transpose(x, (*range(k), k + 1, k, k + 2))
    return nc.reshape(y, (*lead, n, h * dh))


def project_qkv(x: Tensor, p: AttentionParams) -> tuple[Tensor, Tensor, Tensor]:
    """Per-head queries, keys and values of a token sequence."""
    _check_width(x, p)
    return (split_heads(x @ p.w_q, p.heads),
            split_heads(x @ p.w_k, p.heads),
            split_heads(x @ p.w_v, p.heads))


def attend(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Head-wise ``softmax(q k^T / sqrt(d_k)) v``; returns (output, weights)."""
    d_k = q.shape[-1]
    scores = (q @ nc.swap_last(k)) * (1.0 / math.sqrt(d_k))
    w = nc.softmax(scores)
    return w @ v, w


def attend_and_project(q: Tensor, k: Tensor, v: Tensor, p: AttentionParams) -> Tensor:
    out, _ = attend(q, k, v)
    return merge_heads(out) @ p.w_o


def self_attention(x: Tensor, p: AttentionParams) -> Tensor:
    q, k, v = project_qkv(x, p)
    return attend_and_project(q, k, v, p)


def cross_attention(x_s: Tensor, x_t: Tensor, p: AttentionParams) -> Tensor:
    """Queries from ``x_s`` (M tokens), keys and values from ``x_t`` (N tokens)."""
    _check_width(x_s, p)
    _check_width(x_t, p)
    q = split_heads(x_s @ p.w_q, p.heads)
    k = split_heads(x_t @ p.w_k, p.heads)
    v = split_heads(x_t @ p.w_v, p.heads)
    return attend_and_project(q, k, v, p)


def attention_weights(x_s, x_t, p: AttentionParams) -> np.ndarray:
    """Softmax weights of the cross-attention, shape (..., heads, M, N)."""
    x_s, x_t = nc.as_tensor(x_s), nc.as_tensor(x_t)
    _check_width(x_s, p)
    _check_width(x_t, p)
    q = split_heads(x_s @ p.w_q, p.heads)
    k = split_heads(x_t @ p.w_k, p.heads)
    scores = (q @ nc.swap_last(k)) * (1.0 / math.sqrt(p.d_k))
    return nc.softmax(scores).data


def write_weights_csv(path, weights: np.ndarray, head: int = 0):
    """Dump one head's M x N weight matrix as CSV (row = query token)."""
    w = np.asarray(weights)
    while w.ndim > 3:
        w = w[0]
    if w.ndim == 3:
        w = w[head]
    m, n = w.shape
    with open(path, "w") as fh:
        fh.write("query," + ",".join(f"key{j}" for j in range(n)) + "\n")
        for i in range(m):
            fh.write(f"{i}," + ",".join(repr(float(x)) for x in w[i]) + "\n")
