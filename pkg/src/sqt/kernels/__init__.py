"""Hot numeric kernels with two interchangeable backends.

The numba backend (default) JIT-compiles fused loops; ``SQT_KERNELS=numpy``
selects the pure-numpy fallback. Both expose the same functions with
identical semantics; ``benchmarks/bench_kernels.py`` times them against
each other.

This module normalizes inputs (contiguity, optional masks) so the backend
implementations can stay plain.
"""

import os

import numpy as np


def _load_backend():
    choice = os.environ.get("SQT_KERNELS", "").strip().lower()
    if choice not in ("", "numpy", "numba"):
        raise ValueError(f"SQT_KERNELS must be 'numpy' or 'numba', got {choice!r}")
    if choice == "numpy":
        from . import numpy_impl as impl
        return impl
    try:
        from . import numba_impl as impl
        return impl
    except ImportError:
        if choice == "numba":
            raise
        from . import numpy_impl as impl
        return impl


_impl = _load_backend()
BACKEND_NAME = _impl.BACKEND_NAME


def _c(a):
    return np.ascontiguousarray(a)


def softmax_rows(x, live=None):
    if live is None:
        live = np.ones(x.shape, dtype=np.uint8)
    return _impl.softmax_rows(_c(x), _c(live.astype(np.uint8, copy=False)))


def softmax_rows_grad(p, g):
    return _impl.softmax_rows_grad(_c(p), _c(g))


def attn_softmax(scores, key_live=None, causal=False):
    if key_live is None:
        key_live = np.ones((scores.shape[0], scores.shape[3]), dtype=np.uint8)
    return _impl.attn_softmax(_c(scores), _c(key_live.astype(np.uint8, copy=False)), causal)


def attn_softmax_grad(p, g):
    return _impl.attn_softmax_grad(_c(p), _c(g))


def layer_norm(x, gain, bias, eps):
    return _impl.layer_norm(_c(x), _c(gain), _c(bias), eps)


def layer_norm_grad(x, gain, mean, rstd, g):
    return _impl.layer_norm_grad(_c(x), _c(gain), _c(mean), _c(rstd), _c(g))


def cross_entropy_logits(logits, targets, live):
    return _impl.cross_entropy_logits(
        _c(logits), _c(targets.astype(np.int64, copy=False)),
        _c(live.astype(np.uint8, copy=False)))


def cross_entropy_logits_grad(probs, targets, live, scale):
    return _impl.cross_entropy_logits_grad(
        _c(probs), _c(targets.astype(np.int64, copy=False)),
        _c(live.astype(np.uint8, copy=False)), float(scale))


def adam_update(p, g, m, v, lr, b1, b2, eps, bc1, bc2):
    # scalars in the array dtype keep the jitted loop in one precision
    dt = p.dtype.type
    _impl.adam_update(p, _c(g), m, v, dt(lr), dt(b1), dt(b2),
                      dt(eps), dt(bc1), dt(bc2))


def _checked_ids(ids, n_rows):
    ids = _c(ids.astype(np.int64, copy=False))
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise IndexError(f"row id out of range [0, {n_rows})")
    return ids


def scatter_add_rows(out, ids, g):
    _impl.scatter_add_rows(out, _checked_ids(ids, out.shape[0]), _c(g))


def ema_accumulate(ids, e, k):
    return _impl.ema_accumulate(_checked_ids(ids, k), _c(e), k)
