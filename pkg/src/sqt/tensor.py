"""Minimal reverse-mode autodiff over numpy arrays.

Just enough differentiable ops for an encoder-decoder transformer:
matmul, elementwise arithmetic, reshapes, row softmax (with masking),
layer norm, cross entropy, embedding lookup, dropout, and a
straight-through hook for quantized values. Forward math runs in
float32 by default; gradient verification builds float64 graphs.

Graphs are recorded through closures on each result tensor and walked
in reverse topological order by ``backward``. Gradients accumulate, so
a tensor used in several branches (shared parameters included) receives
the sum of its branch gradients.
"""

from __future__ import annotations

import math

import numpy as np

from . import kernels

DEFAULT_DTYPE = np.float32

LOG_FLOOR = 1e-12  # probability clamp applied before any log


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested op."""


class NonFiniteError(ArithmeticError):
    """A NaN/Inf appeared where the contract requires finite values."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that skips graph recording (fast inference path)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False, dtype=None):
    arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=requires_grad)


def constant(data, dtype=None):
    return tensor(data, requires_grad=False, dtype=dtype)


def _node(data, parents, backward):
    """Result tensor; records the graph only if some parent needs grads."""
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward=backward)
    return Tensor(data)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def backward(loss):
    """Reverse-mode sweep from a scalar; populates .grad on reachable leaves."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def _reduce_to(g, shape):
    """Sum g down to `shape` (undo broadcasting in add)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(g, b.data.shape))

    return _node(data, (a, b), bwd)


def sub(a, b):
    data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g, a.data.shape))
        if b.requires_grad:
            _accum(b, -_reduce_to(g, b.data.shape))

    return _node(data, (a, b), bwd)


def mul(a, b):
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(g * a.data, b.data.shape))

    return _node(data, (a, b), bwd)


def scale(a, s):
    s = a.data.dtype.type(s)
    data = a.data * s

    def bwd(g):
        _accum(a, g * s)

    return _node(data, (a,), bwd)


def matmul(a, b):
    """Matrix product; 2-d x 2-d or stacked with identical leading dims."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.ndim != bd.ndim or ad.shape[-1] != bd.shape[-2] \
            or ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul shapes incompatible: {ad.shape} x {bd.shape}")
    data = np.matmul(ad, bd)

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.matmul(g, bd.swapaxes(-1, -2)))
        if b.requires_grad:
            _accum(b, np.matmul(ad.swapaxes(-1, -2), g))

    return _node(data, (a, b), bwd)


def reshape(a, shape):
    data = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return _node(data, (a,), bwd)


def swapaxes(a, i, j):
    data = a.data.swapaxes(i, j)

    def bwd(g):
        _accum(a, g.swapaxes(i, j))

    return _node(data, (a,), bwd)


def concat0(a, b):
    """Concatenate along axis 0 (batch stacking of parallel streams)."""
    if a.data.shape[1:] != b.data.shape[1:]:
        raise ShapeError(f"concat0 shapes differ: {a.data.shape} vs {b.data.shape}")
    data = np.concatenate([a.data, b.data], axis=0)
    na = a.data.shape[0]

    def bwd(g):
        _accum(a, g[:na])
        _accum(b, g[na:])

    return _node(data, (a, b), bwd)


def slice0(a, lo, hi):
    """View rows [lo:hi) along axis 0."""
    data = a.data[lo:hi]

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[lo:hi] = g
        _accum(a, ga)

    return _node(data, (a,), bwd)


def relu(a):
    keep = a.data > 0
    data = np.where(keep, a.data, a.data.dtype.type(0))

    def bwd(g):
        _accum(a, g * keep)

    return _node(data, (a,), bwd)


def dropout(a, p, rng):
    """Inverted dropout; identity when p == 0 or no rng is supplied."""
    if p <= 0.0 or rng is None:
        return a
    draw_dtype = a.data.dtype if a.data.dtype in (np.float32, np.float64) else np.float64
    keep = (rng.random(a.data.shape, dtype=draw_dtype) >= p).astype(a.data.dtype)
    keep *= a.data.dtype.type(1.0 / (1.0 - p))
    data = a.data * keep

    def bwd(g):
        _accum(a, g * keep)

    return _node(data, (a,), bwd)


def sum_all(a):
    data = np.asarray(a.data.sum(), dtype=a.data.dtype).reshape(())

    def bwd(g):
        _accum(a, np.full(a.data.shape, g, dtype=a.data.dtype))

    return _node(data, (a,), bwd)


def mean_all(a):
    n = a.data.size
    data = np.asarray(a.data.mean(), dtype=a.data.dtype).reshape(())

    def bwd(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape).astype(a.data.dtype))

    return _node(data, (a,), bwd)


def log_clamped(a, floor=LOG_FLOOR):
    """log(max(a, floor)); gradient is 0 where the clamp engaged."""
    clamped = np.maximum(a.data, a.data.dtype.type(floor))
    data = np.log(clamped)
    open_ = a.data >= floor

    def bwd(g):
        _accum(a, g * open_ / clamped)

    return _node(data, (a,), bwd)


def normalize_rows(a, eps=0.0):
    """Scale each row of [n, d] to unit L2 norm. Zero rows are an error."""
    norms = np.sqrt((a.data.astype(np.float64) ** 2).sum(axis=1))
    if np.any(norms <= eps) or np.any(norms < 1e-30):
        raise ValueError("normalize_rows: zero-norm row (cosine undefined)")
    inv = (1.0 / norms).astype(a.data.dtype)[:, None]
    y = a.data * inv

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        _accum(a, (g - y * dot) * inv)

    return _node(y, (a,), bwd)


def softmax_rows(a, mask=None):
    """Row softmax over the last axis of a 2-d tensor.

    mask: optional boolean array, True = entry participates; masked
    entries come out exactly 0. A fully masked row is an error.
    """
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows wants a 2-d tensor, got {a.data.shape}")
    if mask is not None:
        live = np.asarray(mask, dtype=bool)
        if live.shape != a.data.shape:
            raise ShapeError(f"mask shape {live.shape} != logits shape {a.data.shape}")
        if not live.any(axis=1).all():
            raise ValueError("softmax_rows: fully masked row")
        live = live.astype(np.uint8)
    else:
        live = None
    p = kernels.softmax_rows(a.data, live)

    def bwd(g):
        _accum(a, kernels.softmax_rows_grad(p, g))

    return _node(p, (a,), bwd)


def attn_softmax(scores, key_mask=None, causal=False):
    """Softmax over the key axis of [B, H, nq, nk] attention scores."""
    if scores.data.ndim != 4:
        raise ShapeError(f"attn_softmax wants [B,H,nq,nk], got {scores.data.shape}")
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if not key_mask.any(axis=1).all():
            raise ValueError("attn_softmax: a sequence with no live key")
    p = kernels.attn_softmax(scores.data, key_mask, causal)

    def bwd(g):
        _accum(scores, kernels.attn_softmax_grad(p, g))

    return _node(p, (scores,), bwd)


def layer_norm(a, gain, bias, eps=1e-5):
    """Per-row standardization over the last axis, then gain/bias affine."""
    d = a.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must be ({d},), got {gain.data.shape}/{bias.data.shape}")
    x2 = a.data.reshape(-1, d)
    y2, mean, rstd = kernels.layer_norm(x2, gain.data, bias.data, eps)

    def bwd(g):
        gx, ggain, gbias = kernels.layer_norm_grad(
            x2, gain.data, mean, rstd, g.reshape(-1, d))
        _accum(a, gx.reshape(a.data.shape))
        _accum(gain, ggain)
        _accum(bias, gbias)

    return _node(y2.reshape(a.data.shape), (a, gain, bias), bwd)


def cross_entropy(a, targets, mask=None, mode="logits"):
    """Mean over unmasked rows of -log p(target).

    a: [n, V] logits or row-stochastic probabilities, per `mode`.
    targets: int array [n]; mask: optional bool [n], True = row counts.
    """
    if a.data.ndim != 2:
        raise ShapeError(f"cross_entropy wants [n, V], got {a.data.shape}")
    n, v = a.data.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} != ({n},)")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= v:
        raise ValueError(f"target id out of range [0, {v})")
    live = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n_live = int(live.sum())
    if n_live == 0:
        raise ValueError("cross_entropy: all rows masked")

    if mode == "logits":
        probs, loss_rows = kernels.cross_entropy_logits(a.data, targets, live)
        data = np.asarray(loss_rows.sum(dtype=np.float64) / n_live,
                          dtype=a.data.dtype).reshape(())

        def bwd(g):
            gl = kernels.cross_entropy_logits_grad(probs, targets, live, 1.0 / n_live)
            _accum(a, gl * g)

        return _node(data, (a,), bwd)

    if mode == "probs":
        picked = np.maximum(a.data[np.arange(n), targets], a.data.dtype.type(LOG_FLOOR))
        loss_rows = -np.log(picked) * live
        data = np.asarray(loss_rows.sum(dtype=np.float64) / n_live,
                          dtype=a.data.dtype).reshape(())

        def bwd(g):
            ga = np.zeros_like(a.data)
            ga[np.arange(n), targets] = -live.astype(a.data.dtype) / picked / n_live
            _accum(a, ga * g)

        return _node(data, (a,), bwd)

    raise ValueError(f"unknown cross_entropy mode {mode!r}")


def embedding(table, ids):
    """Row lookup table[ids]; backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    v = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise ValueError(f"token id out of range [0, {v})")
    data = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        kernels.scatter_add_rows(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        _accum(table, gt)

    return _node(data, (table,), bwd)


def straight_through(a, value):
    """Forward `value`, backward identity into `a` (quantization hook)."""
    value = np.asarray(value, dtype=a.data.dtype)
    if value.shape != a.data.shape:
        raise ShapeError(f"straight_through shapes differ: {value.shape} vs {a.data.shape}")

    def bwd(g):
        _accum(a, g)

    return _node(value, (a,), bwd)


def detach(a):
    return Tensor(a.data)


def finite_difference_check(f, x, h=1e-3):
    """Max relative error between backward grads of f and central differences.

    f maps a Tensor to a scalar Tensor; evaluated in the dtype of x
    (use float64 for verification). Relative error uses an absolute
    floor of 1e-8 in the denominator.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x.grad = None
    loss = f(x)
    backward(loss)
    g = np.zeros_like(x.data) if x.grad is None else np.array(x.grad, copy=True)

    flat = x.data.reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x).item()
        flat[i] = orig - h
        lo = f(x).item()
        flat[i] = orig
        fd[i] = (hi - lo) / (2.0 * h)
    fd = fd.reshape(x.data.shape)

    denom = np.maximum(np.maximum(np.abs(fd), np.abs(g)), 1e-8)
    return float((np.abs(fd - g) / denom).max())


def assert_finite(value, what):
    if not math.isfinite(value):
        raise NonFiniteError(f"non-finite value in {what}: {value}")
    return value
