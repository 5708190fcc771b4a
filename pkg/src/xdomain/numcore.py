"""Dense float64 arrays with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array.  Operations executed inside an active
:class:`Tape` are recorded together with a closure that maps the output
adjoint to the input adjoints; :func:`backward` replays the tape in reverse.
Outside a tape every operation is a plain numpy evaluation, which is what the
inference paths use.

Matrices are the 2-D case; the model code works on batched 3-D/4-D tensors so
that a whole batch shares one tape.
"""
from __future__ import annotations

import hashlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_ACTIVE: list["Tape"] = []


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """Float64 array, optionally a node on the active tape."""

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn = None
        self.name = name

    # DenseMatrix view
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[-1]

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records differentiable operations executed while it is active.

    Nodes are appended in execution order, so the list is topologically
    sorted by construction.  Use as a context manager::

        with Tape() as tape:
            loss = f(params)
        grads = backward(tape, loss)
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def _record(out: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError("operation produced NaN or Inf")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.name = None
    if _ACTIVE and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t.parents = tuple(parents)
        t.backward_fn = fn
        _ACTIVE[-1].nodes.append(t)
    else:
        t.requires_grad = False
        t.parents = ()
        t.backward_fn = None
    return t


class GradTable(dict):
    """Mapping from leaf tensor to its adjoint array."""

    def of(self, t: Tensor) -> np.ndarray:
        g = self.get(t)
        return np.zeros_like(t.data) if g is None else g


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> GradTable:
    """Reverse sweep from a scalar ``loss``.

    Returns adjoints for every leaf reached (or for ``wrt``; unreached leaves
    in ``wrt`` get zero arrays).
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves = GradTable()

    def push(p: Tensor, g: np.ndarray):
        if p.backward_fn is None:
            if p in leaves:
                leaves[p] = leaves[p] + g
            else:
                leaves[p] = g
            return
        k = id(p)
        if k in adj:
            adj[k] = adj[k] + g
        else:
            adj[k] = g

    if loss.backward_fn is None:
        if loss.requires_grad:
            leaves[loss] = np.ones_like(loss.data)
    else:
        for node in reversed(tape.nodes):
            g = adj.pop(id(node), None)
            if g is None:
                continue
            for p, pg in zip(node.parents, node.backward_fn(g)):
                if pg is not None and p.requires_grad:
                    push(p, pg)

    if wrt is not None:
        out = GradTable()
        for p in wrt:
            out[p] = leaves.get(p, np.zeros_like(p.data))
        return out
    return leaves


# ---------------------------------------------------------------- primitives


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _record(a.data * c, (a,), lambda g: (g * c,))
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _record(out, (a,), lambda g: (-g * out * out,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record(ad @ bd, (a, b), fn)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def fn(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _record(np.array(a.data[idx], dtype=DTYPE), (a,), fn)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return _record(np.concatenate([p.data for p in parts], axis=axis), parts,
                   lambda g: tuple(np.split(g, cuts, axis=axis)))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _record(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, old),))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=DTYPE), (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _record(out, (a,), lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU (smooth, so finite differences stay clean)."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _record(out, (a,), fn)


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row maximum."""
    a = as_tensor(a)
    p = _softmax_np(a.data)
    return _record(p, (a,), lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


def softmax_rows(m: Tensor) -> Tensor:
    m = as_tensor(m)
    if m.data.size == 0:
        raise ShapeError("softmax_rows: empty matrix")
    return softmax(m)


def log_softmax(a: Tensor) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _record(out, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layernorm(m: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``.

    ``eps`` is added to the variance, so a constant row maps to ``bias``.
    """
    m, gain, bias = as_tensor(m), as_tensor(gain), as_tensor(bias)
    width = m.shape[-1]
    if gain.data.size != width or bias.data.size != width:
        raise ShapeError(f"layernorm: gain {gain.shape} / bias {bias.shape} do not match width {width}")
    x = m.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data.reshape(-1)
    out = xhat * gd + bias.data.reshape(-1)

    def fn(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=red).reshape(gain.shape)
        dbias = g.sum(axis=red).reshape(bias.shape)
        return dx, dgain, dbias

    return _record(out, (m, gain, bias), fn)


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


# ------------------------------------------------------------------- checks


def finite_diff_check(f: Callable[[], Tensor], params, step: float = 1e-5,
                      max_entries: int | None = None, rng: "Rng | None" = None,
                      floor: float = 1e-8) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` takes no arguments and reads ``params`` (leaf tensors, mutated in
    place during probing and restored afterwards).  The relative error of
    each entry is ``|num - g| / max(|g|, floor)``, ``g`` being the tape
    gradient.  Central-difference round-off is about 1e-11 at step 1e-5, so
    entries with ``|g|`` far below 1e-7 need larger-scale inputs to be
    meaningful.  ``max_entries`` caps the probed entries per tensor (sampled
    with ``rng``).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if isinstance(params, Tensor):
        params = [params]
    params = list(params)
    with Tape() as tape:
        loss = f()
    grads = backward(tape, loss, wrt=params)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        g = grads[p].reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or Rng(0)).generator.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = f().item()
            flat[i] = orig - step
            fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            err = abs(num - g[i]) / max(abs(g[i]), floor)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------- rng


class Rng:
    """Counter-based (Philox) generator with label-derived child streams.

    ``Rng(seed).child("source")`` is a pure function of the seed and the
    label, so the order in which streams are consumed never matters.
    """

    def __init__(self, seed: int, *path: str | int):
        self.seed = int(seed)
        self.path = tuple(path)
        digest = hashlib.sha256(repr((self.seed, self.path)).encode()).digest()
        key = np.frombuffer(digest[:16], dtype="<u8")
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def child(self, *labels: str | int) -> "Rng":
        return Rng(self.seed, *self.path, *labels)

    def normal(self, size=None, scale: float = 1.0):
        return self.generator.normal(0.0, scale, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size=size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.generator.choice(a, size=size, replace=replace)

    def chisquare(self, df, size=None):
        return self.generator.chisquare(df, size=size)
