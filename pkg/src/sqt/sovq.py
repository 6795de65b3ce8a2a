"""Structure-oriented vector quantization of embeddings.

A codebook of K code embeddings quantizes word-embedding rows by cosine
nearest neighbor and is maintained with exponential moving averages.
Training couples a soft posterior q(z|x) (cosine similarity, tempered
softmax) with a context prior p(z|context codes) produced by a small
attention network, through the clustering loss

    alpha * (H'(q, p) - H'(Z))

estimated per batch over token occurrences. Minimizing it pulls a
token's class toward what its context's classes predict while keeping
the batch-level class distribution spread out.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T


@dataclass
class SoVQConfig:
    k_src: int = 6
    k_tgt: int = 4
    tau: float = 0.1          # posterior temperature
    alpha: float = 1.0        # clustering loss coefficient
    ema_decay: float = 0.99
    ema_eps: float = 1e-5
    straight_through: bool = True
    train_prior: bool = True  # let the clustering loss reach the prior net
    prior_d_model: int = 32
    prior_n_heads: int = 2
    prior_n_layers: int = 1

    def validate(self):
        if self.k_src < 2 or self.k_tgt < 2:
            raise ValueError("codebooks need K >= 2")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in (0, 1)")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")


def _checked_unit_rows(e):
    norms = np.sqrt((e.astype(np.float64) ** 2).sum(axis=1))
    if e.shape[0] and norms.min() < 1e-30:
        raise ValueError("zero-norm embedding row (cosine undefined)")
    return (e / norms[:, None]).astype(e.dtype)


class Codebook:
    """K code embeddings with EMA assignment statistics.

    Rows are refreshed after every accumulation as ema_sums / smoothed
    counts, with Laplace smoothing of the counts so unassigned codes
    keep a stable, nonzero embedding.
    """

    def __init__(self, embeddings, decay=0.99, eps=1e-5):
        embeddings = np.asarray(embeddings, dtype=T.DEFAULT_DTYPE)
        if embeddings.ndim != 2 or embeddings.shape[0] < 2:
            raise ValueError(f"codebook needs [K>=2, D], got {embeddings.shape}")
        if not np.isfinite(embeddings).all():
            raise ValueError("codebook init has non-finite rows")
        self.embeddings = embeddings.copy()
        self.ema_counts = np.ones(embeddings.shape[0], dtype=T.DEFAULT_DTYPE)
        self.ema_sums = embeddings.copy()
        self.decay = float(decay)
        self.eps = float(eps)

    @property
    def k(self):
        return self.embeddings.shape[0]

    @property
    def width(self):
        return self.embeddings.shape[1]

    @classmethod
    def init_from_rows(cls, emb_matrix, k, rng, decay=0.99, eps=1e-5):
        """Seed the codebook with k distinct rows of an embedding matrix."""
        if emb_matrix.shape[0] < k:
            raise ValueError(f"need at least {k} rows, got {emb_matrix.shape[0]}")
        idx = rng.choice(emb_matrix.shape[0], size=k, replace=False)
        return cls(emb_matrix[np.sort(idx)], decay=decay, eps=eps)

    def quantize_hard(self, e):
        """Cosine argmax codes for rows of e: (indices [n], codes [n, D]).

        Ties break toward the lowest code index. Zero-norm rows raise.
        """
        e = np.asarray(e)
        if e.ndim != 2 or e.shape[1] != self.width:
            raise ValueError(f"expected [n, {self.width}], got {e.shape}")
        sims = _checked_unit_rows(e) @ _checked_unit_rows(self.embeddings).T
        idx = np.argmax(sims, axis=1)
        return idx, self.embeddings[idx]

    def ema_update(self, assignments, e):
        """Fold one batch of (assignment, embedding) pairs into the EMA state."""
        assignments = np.asarray(assignments, dtype=np.int64)
        e = np.asarray(e, dtype=self.ema_sums.dtype)
        if assignments.shape[0] != e.shape[0]:
            raise ValueError("assignments and embeddings disagree on n")
        from . import kernels
        counts, sums = kernels.ema_accumulate(assignments, e, self.k)
        g = self.decay
        self.ema_counts = g * self.ema_counts + (1.0 - g) * counts
        self.ema_sums = g * self.ema_sums + (1.0 - g) * sums
        total = self.ema_counts.sum()
        smoothed = (self.ema_counts + self.eps) / (total + self.k * self.eps) * total
        self.embeddings = (self.ema_sums / smoothed[:, None]).astype(self.embeddings.dtype)

    def state_arrays(self):
        return {"embeddings": self.embeddings, "ema_counts": self.ema_counts,
                "ema_sums": self.ema_sums}

    def load_state_arrays(self, arrays):
        self.embeddings = arrays["embeddings"].reshape(self.embeddings.shape).copy()
        self.ema_counts = arrays["ema_counts"].reshape(self.ema_counts.shape).copy()
        self.ema_sums = arrays["ema_sums"].reshape(self.ema_sums.shape).copy()


def quantize_with_gradient(e, codebook, straight_through=True):
    """Differentiable lookup: forward = hard codes, backward = identity to e.

    With straight_through=False the codes are a constant (stop-gradient).
    e is a Tensor of shape [..., D]; returns (indices, codes tensor).
    """
    d = codebook.width
    rows = e.data.reshape(-1, d)
    idx, codes = codebook.quantize_hard(rows)
    codes = codes.reshape(e.data.shape)
    idx = idx.reshape(e.data.shape[:-1])
    if straight_through:
        return idx, T.straight_through(e, codes)
    return idx, T.constant(codes, dtype=e.data.dtype)


def posterior_soft(e, codebook, tau):
    """q(z|x): tempered softmax of cosine similarity, rows of e vs codes.

    e: Tensor [n, D]; returns Tensor [n, K]. argmax agrees with
    quantize_hard for any tau > 0 (ties aside).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    unit_e = T.normalize_rows(e)
    unit_z = T.constant(_checked_unit_rows(codebook.embeddings), dtype=e.data.dtype)
    sims = T.scale(T.matmul(unit_e, T.swapaxes(unit_z, 0, 1)), 1.0 / tau)
    return T.softmax_rows(sims)


class ClusterPredictor:
    """Context-code prior p(z | codes of context tokens).

    A small attention network: position queries cross-attend to the
    code-embedding sequence under a visibility mask (everything but the
    own position in bidirectional mode; strictly earlier positions in
    left-only mode), then feed-forward, then a K-way projection. The
    predicted position's own code never enters its input, which makes
    the masking contract checkable: changing the code at a masked
    position cannot change that position's prediction.
    """

    def __init__(self, params, prefix, k, context_mode, cfg: SoVQConfig, seed):
        if context_mode not in ("bidirectional", "left-only"):
            raise ValueError(f"unknown context_mode {context_mode!r}")
        self.params = params
        self.prefix = prefix
        self.k = k
        self.context_mode = context_mode
        self.d = cfg.prior_d_model
        self.n_heads = cfg.prior_n_heads
        self.n_layers = cfg.prior_n_layers
        nn.add_param(params, f"{prefix}.code_embed", (k, self.d), seed, init="embed")
        for i in range(self.n_layers):
            nn.add_attention(params, f"{prefix}.l{i}.attn", self.d, seed)
            nn.add_layer_norm(params, f"{prefix}.l{i}.ln1", self.d, seed)
            nn.add_feed_forward(params, f"{prefix}.l{i}.ff", self.d, 2 * self.d, seed)
            nn.add_layer_norm(params, f"{prefix}.l{i}.ln2", self.d, seed)
        nn.add_layer_norm(params, f"{prefix}.ln_f", self.d, seed)
        nn.add_linear(params, f"{prefix}.out", self.d, k, seed)

    def _visibility(self, b, n, pad_live):
        """[B, n, n] boolean: may query position i read key position j."""
        if self.context_mode == "bidirectional":
            vis = ~np.eye(n, dtype=bool)[None, :, :] & pad_live[:, None, :]
        else:
            vis = np.tril(np.ones((n, n), dtype=bool), k=-1)[None, :, :] & pad_live[:, None, :]
        return np.broadcast_to(vis, (b, n, n)).copy()

    def forward(self, code_ids, pad_live=None):
        """Distributions over codes for every position.

        code_ids: int array [B, n]; pad_live: bool [B, n] (True = real
        token). Returns (probs tensor [B, n, K], empty_context bool [B, n]):
        positions with no visible context get a flagged uniform row.
        """
        code_ids = np.asarray(code_ids, dtype=np.int64)
        b, n = code_ids.shape
        if pad_live is None:
            pad_live = np.ones((b, n), dtype=bool)
        vis = self._visibility(b, n, pad_live)
        empty = ~vis.any(axis=2)
        if empty.all():
            # nothing to attend to anywhere; skip the network entirely
            probs = np.full((b, n, self.k), 1.0 / self.k, dtype=T.DEFAULT_DTYPE)
            return T.constant(probs), empty
        # give empty rows a dummy self-key so softmax stays defined; their
        # logits are zeroed below, which makes the output row uniform
        vis_safe = vis.copy()
        bidx, pidx = np.nonzero(empty)
        vis_safe[bidx, pidx, pidx] = True
        p = self.params
        codes = T.embedding(p[f"{self.prefix}.code_embed"], code_ids)
        codes = nn.add_positions(T.scale(codes, self.d ** 0.5))
        queries = T.constant(
            np.broadcast_to(nn.positional_encoding(n, self.d), (b, n, self.d)).copy())
        h = queries
        key_mask4 = vis_safe[:, None, :, :]  # same visibility for every head
        for i in range(self.n_layers):
            lp = f"{self.prefix}.l{i}"
            hn = nn.layer_norm(p, f"{lp}.ln1", h)
            (att,), _ = _masked_cross_attention(
                p, f"{lp}.attn", hn, codes, self.n_heads, key_mask4)
            h = T.add(h, att)
            h = T.add(h, nn.feed_forward(p, f"{lp}.ff", nn.layer_norm(p, f"{lp}.ln2", h)))
        h = nn.layer_norm(p, f"{self.prefix}.ln_f", h)
        logits = nn.linear(p, f"{self.prefix}.out", h)
        keep = T.constant((~empty)[:, :, None].astype(T.DEFAULT_DTYPE))
        logits = T.mul(logits, keep)  # flagged rows: zero logits -> uniform
        probs2 = T.softmax_rows(T.reshape(logits, (-1, self.k)))
        return T.reshape(probs2, (b, n, self.k)), empty


def _masked_cross_attention(params, prefix, q_in, k_in, n_heads, vis4):
    """Attention variant with a full [B, 1, nq, nk] visibility mask."""
    d = q_in.data.shape[-1]
    dh = d // n_heads
    q = nn.split_heads(nn.linear(params, prefix + ".wq", q_in), n_heads)
    k = nn.split_heads(nn.linear(params, prefix + ".wk", k_in), n_heads)
    scores = T.scale(T.matmul(q, T.swapaxes(k, 2, 3)), 1.0 / math.sqrt(dh))
    b, h, nq, nk = scores.data.shape
    mask2 = np.broadcast_to(vis4, scores.data.shape).reshape(-1, nk)
    probs2 = T.softmax_rows(T.reshape(scores, (-1, nk)), mask=mask2)
    probs = T.reshape(probs2, (b, h, nq, nk))
    v = nn.split_heads(nn.linear(params, prefix + ".wv", k_in), n_heads)
    ctx = nn.merge_heads(T.matmul(probs, v))
    return [nn.linear(params, prefix + ".wo", ctx)], probs


def predict_prior(code_ids, position, predictor, pad_live=None):
    """Prior distribution for one position of one sequence.

    Returns (probs ndarray [K], empty_context flag). Batch training goes
    through ClusterPredictor.forward directly.
    """
    code_ids = np.asarray(code_ids, dtype=np.int64)[None, :]
    if not 0 <= position < code_ids.shape[1]:
        raise ValueError(f"position {position} out of range")
    live = None if pad_live is None else np.asarray(pad_live, dtype=bool)[None, :]
    probs, empty = predictor.forward(code_ids, live)
    return probs.data[0, position].copy(), bool(empty[0, position])


def masked_row_mean(q, live):
    """Mean of rows of [n, K] over live rows, as a graph op -> [K]."""
    live = np.asarray(live, dtype=bool)
    n_live = int(live.sum())
    if n_live == 0:
        raise ValueError("all rows masked")
    w = (live.astype(np.float64) / n_live).astype(q.data.dtype)
    wt = T.constant(w[None, :], dtype=q.data.dtype)
    return T.reshape(T.matmul(wt, q), (q.data.shape[1],))


def entropy_term(q, live=None):
    """H'(Z) of the batch-mean class distribution; scalar in [0, ln K]."""
    if live is None:
        live = np.ones(q.data.shape[0], dtype=bool)
    qbar = masked_row_mean(q, live)
    qbar2 = T.reshape(qbar, (1, q.data.shape[1]))
    h = T.scale(T.sum_all(T.mul(qbar2, T.log_clamped(qbar2))), -1.0)
    return h


def cross_entropy_term(q, p, live=None):
    """H'(q, p): mean over live rows of -sum_z q(z|x) log p(z|context)."""
    if q.data.shape != p.data.shape:
        raise T.ShapeError(f"q shape {q.data.shape} != p shape {p.data.shape}")
    n = q.data.shape[0]
    if live is None:
        live = np.ones(n, dtype=bool)
    live = np.asarray(live, dtype=bool)
    n_live = int(live.sum())
    if n_live == 0:
        raise ValueError("all rows masked")
    w = (live.astype(np.float64) / n_live).astype(q.data.dtype)
    weighted = T.mul(T.mul(q, T.log_clamped(p)), T.constant(w[:, None], dtype=q.data.dtype))
    return T.scale(T.sum_all(weighted), -1.0)


def sovq_loss(q, p, live, alpha):
    """alpha * (H'(q, p) - H'(Z)) for one vocabulary side."""
    if alpha == 0.0:
        return T.constant(np.zeros((), dtype=q.data.dtype))
    return T.scale(T.sub(cross_entropy_term(q, p, live), entropy_term(q, live)), alpha)
