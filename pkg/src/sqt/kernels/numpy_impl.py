"""Pure-numpy implementations of the hot kernels.

Reference semantics for the numba backend; also the fallback selected by
``SQT_KERNELS=numpy``. Every function here is a pure array-in/array-out
routine (except the in-place ones, which say so) and works for float32
and float64 inputs alike.
"""

import numpy as np

BACKEND_NAME = "numpy"


def softmax_rows(x, live):
    """Row-wise softmax over the last axis of a 2-d array.

    ``live`` is a uint8 mask (1 = participate); dead entries come out
    exactly 0. Rows are stabilized by subtracting the row max over live
    entries. Fully dead rows are the caller's responsibility.
    """
    neg = np.finfo(x.dtype).min
    masked = np.where(live.astype(bool), x, neg)
    m = masked.max(axis=1, keepdims=True)
    e = np.exp(masked - m)
    e[~live.astype(bool)] = 0.0
    return (e / e.sum(axis=1, keepdims=True)).astype(x.dtype, copy=False)


def softmax_rows_grad(p, g):
    """Backward of row softmax: gx = p * (g - sum(p * g))."""
    dot = (p * g).sum(axis=1, keepdims=True)
    return p * (g - dot)


def attn_softmax(scores, key_live, causal):
    """Softmax over the key axis of [B, H, nq, nk] attention scores.

    key_live: uint8 [B, nk] padding mask, or None. causal=True masks
    keys j > i for query i. Masked keys get exactly 0 probability.
    Query rows with no live key are left to the caller (they do not
    occur for non-empty sequences).
    """
    B, H, nq, nk = scores.shape
    neg = np.finfo(scores.dtype).min
    masked = scores
    if key_live is not None:
        masked = np.where(key_live.astype(bool)[:, None, None, :], masked, neg)
    if causal:
        tri = np.tril(np.ones((nq, nk), dtype=bool))
        masked = np.where(tri[None, None, :, :], masked, neg)
    m = masked.max(axis=3, keepdims=True)
    e = np.exp(masked - m)
    if key_live is not None:
        e = e * key_live.astype(scores.dtype)[:, None, None, :]
    if causal:
        e = e * tri.astype(scores.dtype)[None, None, :, :]
    return (e / e.sum(axis=3, keepdims=True)).astype(scores.dtype, copy=False)


def attn_softmax_grad(p, g):
    dot = (p * g).sum(axis=3, keepdims=True)
    return p * (g - dot)


def layer_norm(x, gain, bias, eps):
    """Per-row standardization of a 2-d array, then affine.

    Returns (y, mean, rstd); mean/rstd are cached for the backward pass.
    """
    mean = x.mean(axis=1)
    var = x.var(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = (x - mean[:, None]) * rstd[:, None] * gain[None, :] + bias[None, :]
    return y.astype(x.dtype, copy=False), mean.astype(x.dtype), rstd.astype(x.dtype)


def layer_norm_grad(x, gain, mean, rstd, g):
    xhat = (x - mean[:, None]) * rstd[:, None]
    ggain = (g * xhat).sum(axis=0)
    gbias = g.sum(axis=0)
    gx_hat = g * gain[None, :]
    d = x.shape[1]
    gx = (gx_hat - gx_hat.mean(axis=1, keepdims=True)
          - xhat * (gx_hat * xhat).mean(axis=1, keepdims=True)) * rstd[:, None]
    return gx.astype(x.dtype, copy=False), ggain, gbias


def cross_entropy_logits(logits, targets, live):
    """Per-row -log softmax(logits)[target]; returns (probs, loss_rows).

    Dead rows (live == 0) get loss 0. Caller reduces to a mean.
    """
    p = softmax_rows(logits, np.ones_like(logits, dtype=np.uint8))
    n = logits.shape[0]
    picked = p[np.arange(n), targets]
    loss = -np.log(np.maximum(picked, np.finfo(logits.dtype).tiny))
    loss = loss * live.astype(logits.dtype)
    return p, loss.astype(logits.dtype, copy=False)


def cross_entropy_logits_grad(probs, targets, live, scale):
    """d mean-CE / d logits = scale * (softmax - onehot) on live rows."""
    g = probs.copy()
    n = probs.shape[0]
    g[np.arange(n), targets] -= 1.0
    g *= live.astype(probs.dtype)[:, None] * probs.dtype.type(scale)
    return g


def adam_update(p, g, m, v, lr, b1, b2, eps, bc1, bc2):
    """In-place Adam step on flat arrays; bc1/bc2 are the bias corrections."""
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def scatter_add_rows(out, ids, g):
    """out[ids[i]] += g[i] for each row i, in place (embedding backward)."""
    np.add.at(out, ids, g)


def ema_accumulate(ids, e, k):
    """Per-code assignment counts and embedding sums for an EMA update."""
    counts = np.bincount(ids, minlength=k).astype(e.dtype)
    sums = np.zeros((k, e.shape[1]), dtype=e.dtype)
    np.add.at(sums, ids, e)
    return counts, sums
