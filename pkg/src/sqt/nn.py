"""Parameter management and transformer building blocks.

Parameters live in a flat dict keyed by dotted names; initialization is
seeded per name, so two models that create the same names from the same
seed hold bit-identical weights regardless of creation order.
"""

import math
import zlib

import numpy as np

from . import tensor as T


def param_rng(seed, name):
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


def add_param(params, name, shape, seed, init="glorot"):
    if name in params:
        raise ValueError(f"duplicate parameter name {name}")
    rng = param_rng(seed, name)
    if init == "glorot":
        std = math.sqrt(2.0 / (shape[0] + shape[1]))
        arr = rng.normal(0.0, std, size=shape)
    elif init == "embed":
        arr = rng.normal(0.0, shape[1] ** -0.5, size=shape)
    elif init == "zeros":
        arr = np.zeros(shape)
    elif init == "ones":
        arr = np.ones(shape)
    else:
        raise ValueError(f"unknown init {init!r}")
    t = T.tensor(arr, requires_grad=True)
    params[name] = t
    return t


def add_linear(params, prefix, d_in, d_out, seed):
    add_param(params, prefix + ".w", (d_in, d_out), seed)
    add_param(params, prefix + ".b", (d_out,), seed, init="zeros")


def linear(params, prefix, x):
    w = params[prefix + ".w"]
    b = params[prefix + ".b"]
    d_in = w.data.shape[0]
    x2 = T.reshape(x, (-1, d_in))
    y2 = T.add(T.matmul(x2, w), b)
    return T.reshape(y2, x.data.shape[:-1] + (w.data.shape[1],))


def add_layer_norm(params, prefix, d, seed):
    add_param(params, prefix + ".g", (d,), seed, init="ones")
    add_param(params, prefix + ".b", (d,), seed, init="zeros")


def layer_norm(params, prefix, x, eps=1e-5):
    return T.layer_norm(x, params[prefix + ".g"], params[prefix + ".b"], eps=eps)


def add_attention(params, prefix, d, seed):
    for p in ("wq", "wk", "wv", "wo"):
        add_linear(params, f"{prefix}.{p}", d, d, seed)


def add_feed_forward(params, prefix, d, d_ff, seed):
    add_linear(params, prefix + ".w1", d, d_ff, seed)
    add_linear(params, prefix + ".w2", d_ff, d, seed)


def feed_forward(params, prefix, x, drop=0.0, rng=None):
    h = T.relu(linear(params, prefix + ".w1", x))
    h = T.dropout(h, drop, rng)
    return linear(params, prefix + ".w2", h)


def split_heads(x, n_heads):
    b, n, d = x.data.shape
    dh = d // n_heads
    return T.swapaxes(T.reshape(x, (b, n, n_heads, dh)), 1, 2)


def merge_heads(x):
    b, h, n, dh = x.data.shape
    return T.reshape(T.swapaxes(x, 1, 2), (b, n, h * dh))


def attn_probs(params, prefix, q_in, k_in, n_heads, key_mask=None, causal=False):
    """Attention probabilities [B, H, nq, nk] from query/key streams."""
    d = q_in.data.shape[-1]
    dh = d // n_heads
    q = split_heads(linear(params, prefix + ".wq", q_in), n_heads)
    k = split_heads(linear(params, prefix + ".wk", k_in), n_heads)
    scores = T.scale(T.matmul(q, T.swapaxes(k, 2, 3)), 1.0 / math.sqrt(dh))
    return T.attn_softmax(scores, key_mask=key_mask, causal=causal)


def attn_apply(params, prefix, probs, v_in, n_heads, drop=0.0, rng=None):
    """Value mixing + output projection; dropout lands on the probabilities."""
    mixed = T.dropout(probs, drop, rng)
    v = split_heads(linear(params, prefix + ".wv", v_in), n_heads)
    ctx = merge_heads(T.matmul(mixed, v))
    return linear(params, prefix + ".wo", ctx)


def attention(params, prefix, q_in, k_in, v_in, n_heads,
              key_mask=None, causal=False, drop=0.0, rng=None):
    """Standard multi-head attention; returns (output, probs)."""
    probs = attn_probs(params, prefix, q_in, k_in, n_heads,
                       key_mask=key_mask, causal=causal)
    out = attn_apply(params, prefix, probs, v_in, n_heads, drop=drop, rng=rng)
    return out, probs


_POS_CACHE = {}


def positional_encoding(n, d, dtype=None):
    """Sinusoidal position matrix [n, d] (cached)."""
    dtype = dtype or T.DEFAULT_DTYPE
    key = (n, d, np.dtype(dtype).name)
    if key not in _POS_CACHE:
        pos = np.arange(n, dtype=np.float64)[:, None]
        dim = np.arange(0, d, 2, dtype=np.float64)
        angle = pos / np.power(10000.0, dim / d)
        pe = np.zeros((n, d))
        pe[:, 0::2] = np.sin(angle)
        pe[:, 1::2] = np.cos(angle[:, : d // 2])
        _POS_CACHE[key] = pe.astype(dtype)
    return _POS_CACHE[key]


def add_positions(x):
    b, n, d = x.data.shape
    pe = T.constant(positional_encoding(n, d, x.data.dtype)[None, :, :], dtype=x.data.dtype)
    return T.add(x, pe)


def global_grad_norm(params):
    total = 0.0
    for name in sorted(params):
        g = params[name].grad
        if g is not None:
            total += float((g.astype(np.float64) ** 2).sum())
    return math.sqrt(total)


def clip_grads(params, max_norm):
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        s = max_norm / (norm + 1e-6)
        for name in sorted(params):
            p = params[name]
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(s)
    return norm


def zero_grads(params):
    for p in params.values():
        p.grad = None
