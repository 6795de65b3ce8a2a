"""Numba-jitted hot kernels.

Same signatures and semantics as ``numpy_impl``; loops are fused to avoid
the temporaries the numpy versions allocate. fastmath stays off so results
are deterministic and match the numpy backend to rounding.
"""

import numpy as np
from numba import njit

BACKEND_NAME = "numba"

_JIT = dict(cache=True, fastmath=False)


@njit(**_JIT)
def softmax_rows(x, live):
    n, k = x.shape
    out = np.zeros_like(x)
    for i in range(n):
        m = -np.inf
        for j in range(k):
            if live[i, j] and x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(k):
            if live[i, j]:
                e = np.exp(x[i, j] - m)
                out[i, j] = e
                s += e
        inv = 1.0 / s
        for j in range(k):
            out[i, j] *= inv
    return out


@njit(**_JIT)
def softmax_rows_grad(p, g):
    n, k = p.shape
    gx = np.empty_like(p)
    for i in range(n):
        dot = 0.0
        for j in range(k):
            dot += p[i, j] * g[i, j]
        for j in range(k):
            gx[i, j] = p[i, j] * (g[i, j] - dot)
    return gx


@njit(**_JIT)
def attn_softmax(scores, key_live, causal):
    B, H, nq, nk = scores.shape
    out = np.zeros_like(scores)
    for b in range(B):
        for h in range(H):
            for i in range(nq):
                hi = i + 1 if causal else nk
                m = -np.inf
                for j in range(hi):
                    if key_live[b, j] and scores[b, h, i, j] > m:
                        m = scores[b, h, i, j]
                s = 0.0
                for j in range(hi):
                    if key_live[b, j]:
                        e = np.exp(scores[b, h, i, j] - m)
                        out[b, h, i, j] = e
                        s += e
                inv = 1.0 / s
                for j in range(hi):
                    out[b, h, i, j] *= inv
    return out


@njit(**_JIT)
def attn_softmax_grad(p, g):
    B, H, nq, nk = p.shape
    gx = np.empty_like(p)
    for b in range(B):
        for h in range(H):
            for i in range(nq):
                dot = 0.0
                for j in range(nk):
                    dot += p[b, h, i, j] * g[b, h, i, j]
                for j in range(nk):
                    gx[b, h, i, j] = p[b, h, i, j] * (g[b, h, i, j] - dot)
    return gx


@njit(**_JIT)
def layer_norm(x, gain, bias, eps):
    n, d = x.shape
    y = np.empty_like(x)
    mean = np.empty(n, dtype=x.dtype)
    rstd = np.empty(n, dtype=x.dtype)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += x[i, j]
        mu = s / d
        s = 0.0
        for j in range(d):
            dv = x[i, j] - mu
            s += dv * dv
        r = 1.0 / np.sqrt(s / d + eps)
        mean[i] = mu
        rstd[i] = r
        for j in range(d):
            y[i, j] = (x[i, j] - mu) * r * gain[j] + bias[j]
    return y, mean, rstd


@njit(**_JIT)
def layer_norm_grad(x, gain, mean, rstd, g):
    n, d = x.shape
    gx = np.empty_like(x)
    ggain = np.zeros(d, dtype=x.dtype)
    gbias = np.zeros(d, dtype=x.dtype)
    for i in range(n):
        mu = mean[i]
        r = rstd[i]
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            xh = (x[i, j] - mu) * r
            gh = g[i, j] * gain[j]
            ggain[j] += g[i, j] * xh
            gbias[j] += g[i, j]
            s1 += gh
            s2 += gh * xh
        s1 /= d
        s2 /= d
        for j in range(d):
            xh = (x[i, j] - mu) * r
            gh = g[i, j] * gain[j]
            gx[i, j] = (gh - s1 - xh * s2) * r
    return gx, ggain, gbias


@njit(**_JIT)
def cross_entropy_logits(logits, targets, live):
    n, v = logits.shape
    p = np.empty_like(logits)
    loss = np.zeros(n, dtype=logits.dtype)
    for i in range(n):
        m = logits[i, 0]
        for j in range(1, v):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(v):
            e = np.exp(logits[i, j] - m)
            p[i, j] = e
            s += e
        inv = 1.0 / s
        for j in range(v):
            p[i, j] *= inv
        if live[i]:
            loss[i] = -(np.log(p[i, targets[i]]))
    return p, loss


@njit(**_JIT)
def cross_entropy_logits_grad(probs, targets, live, scale):
    n, v = probs.shape
    g = np.zeros_like(probs)
    for i in range(n):
        if live[i]:
            for j in range(v):
                g[i, j] = probs[i, j] * scale
            g[i, targets[i]] -= scale
    return g


@njit(**_JIT)
def adam_update(p, g, m, v, lr, b1, b2, eps, bc1, bc2):
    one = p.dtype.type(1.0)
    for i in range(p.shape[0]):
        m[i] = b1 * m[i] + (one - b1) * g[i]
        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i]
        p[i] -= lr * (m[i] / bc1) / (np.sqrt(v[i] / bc2) + eps)


@njit(**_JIT)
def scatter_add_rows(out, ids, g):
    n, d = g.shape
    for i in range(n):
        r = ids[i]
        for j in range(d):
            out[r, j] += g[i, j]


@njit(**_JIT)
def ema_accumulate(ids, e, k):
    n, d = e.shape
    counts = np.zeros(k, dtype=e.dtype)
    sums = np.zeros((k, d), dtype=e.dtype)
    for i in range(n):
        r = ids[i]
        counts[r] += 1.0
        for j in range(d):
            sums[r, j] += e[i, j]
    return counts, sums
