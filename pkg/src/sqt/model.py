"""Encoder-decoder model with three interchangeable layer kinds.

All kinds share one parameter layout per layer (attention + feed-forward
+ layer norms). The quantizing kinds run two streams through the stack:
the word stream x and the code stream z, which starts from the quantized
word embeddings. For speed the two streams are stacked along the batch
axis, so every shared-parameter projection runs once.

vanilla  x only; a standard pre-LN transformer.
sal      attention probabilities computed from the code stream and used
         to mix both streams, so two inputs with equal code sequences
         get identical attention everywhere (hard invariance).
srl      each stream attends independently with shared parameters; the
         per-layer squared distance between the streams is returned as
         a penalty for the training loss (soft invariance).

The decoder mirrors the encoder kind; its word-stream cross-attention
always queries the word stream against the encoder word memory, and the
code stream mirrors that against the encoder code memory with the same
weights. Captured traces are the probabilities that mix the word stream.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import sovq
from . import tensor as T

PAD, BOS, EOS = 0, 1, 2

LAYER_KINDS = ("vanilla", "sal", "srl")


@dataclass
class ModelConfig:
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 256
    layer_kind: str = "vanilla"
    dropout: float = 0.1
    tie_decoder_embeddings: bool = True
    quantize: bool = True  # build codebooks/priors (forced for sal/srl)

    def validate(self):
        if self.layer_kind not in LAYER_KINDS:
            raise ValueError(f"layer_kind must be one of {LAYER_KINDS}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.layer_kind in ("sal", "srl") and not self.quantize:
            raise ValueError(f"layer_kind {self.layer_kind} requires quantize=true")
        if not self.tie_decoder_embeddings:
            raise ValueError("untied decoder embeddings are not supported")


@dataclass
class ForwardResult:
    logits: T.Tensor            # [B*nt, V_tgt]
    code_logits: T.Tensor       # [B*nt, K_tgt] or None
    e_src: T.Tensor             # [B, ns, D] raw source embeddings
    e_tgt: T.Tensor             # [B, nt, D] raw decoder-input embeddings
    src_codes: np.ndarray       # [B, ns] hard code ids or None
    tgt_codes: np.ndarray       # [B, nt] or None
    srl_penalty: T.Tensor       # summed per-layer stream divergence or None
    enc_traces: list = field(default_factory=list)  # per layer [B, H, ns, ns]


def _double(mask):
    return None if mask is None else np.concatenate([mask, mask], axis=0)


class SQModel:
    def __init__(self, cfg: ModelConfig, vocab_src_size, vocab_tgt_size,
                 seed=0, sovq_cfg=None):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.vocab_src_size = vocab_src_size
        self.vocab_tgt_size = vocab_tgt_size
        self.params = {}
        d = cfg.d_model
        nn.add_param(self.params, "src_embed", (vocab_src_size, d), seed, init="embed")
        nn.add_param(self.params, "tgt_embed", (vocab_tgt_size, d), seed, init="embed")
        for i in range(cfg.n_enc_layers):
            p = f"enc.l{i}"
            nn.add_attention(self.params, f"{p}.attn", d, seed)
            nn.add_layer_norm(self.params, f"{p}.ln1", d, seed)
            nn.add_feed_forward(self.params, f"{p}.ff", d, cfg.d_ff, seed)
            nn.add_layer_norm(self.params, f"{p}.ln2", d, seed)
        nn.add_layer_norm(self.params, "enc.norm", d, seed)
        for i in range(cfg.n_dec_layers):
            p = f"dec.l{i}"
            nn.add_attention(self.params, f"{p}.self_attn", d, seed)
            nn.add_layer_norm(self.params, f"{p}.ln1", d, seed)
            nn.add_attention(self.params, f"{p}.cross_attn", d, seed)
            nn.add_layer_norm(self.params, f"{p}.ln2", d, seed)
            nn.add_feed_forward(self.params, f"{p}.ff", d, cfg.d_ff, seed)
            nn.add_layer_norm(self.params, f"{p}.ln3", d, seed)
        nn.add_layer_norm(self.params, "dec.norm", d, seed)

        self.sovq_cfg = sovq_cfg or sovq.SoVQConfig()
        self.sovq_cfg.validate()
        self.codebook_src = None
        self.codebook_tgt = None
        self.prior_src = None
        self.prior_tgt = None
        if cfg.quantize:
            sc = self.sovq_cfg
            rng = np.random.default_rng([seed & 0xFFFFFFFF, 0xC0DEB00C])
            self.codebook_src = sovq.Codebook.init_from_rows(
                self.params["src_embed"].data, sc.k_src, rng,
                decay=sc.ema_decay, eps=sc.ema_eps)
            self.codebook_tgt = sovq.Codebook.init_from_rows(
                self.params["tgt_embed"].data, sc.k_tgt, rng,
                decay=sc.ema_decay, eps=sc.ema_eps)
            # both priors are bidirectional: they exist only inside the
            # training loss, and a left-only target prior would give the
            # first target position an empty context (uniform prior, no
            # clustering gradient) -- rare tokens that appear only in
            # short targets would never receive a clustering signal
            self.prior_src = sovq.ClusterPredictor(
                self.params, "prior_src", sc.k_src, "bidirectional", sc, seed)
            self.prior_tgt = sovq.ClusterPredictor(
                self.params, "prior_tgt", sc.k_tgt, "bidirectional", sc, seed)
            nn.add_linear(self.params, "code_head", d, sc.k_tgt, seed)

    @property
    def dual_stream(self):
        return self.cfg.layer_kind in ("sal", "srl")

    # ---------------------------------------------------------------- streams

    def _embed(self, table_name, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise ValueError("expected a non-empty [B, n] id batch")
        return T.embedding(self.params[table_name], ids)

    def _start_stack(self, e, codebook):
        """Stacked [z; x] streams (or plain x), plus hard code assignments."""
        d = self.cfg.d_model
        x = nn.add_positions(T.scale(e, math.sqrt(d)))
        codes = None
        if codebook is not None:
            rows = e.data.reshape(-1, d)
            codes = codebook.quantize_hard(rows)[0].reshape(e.data.shape[:-1])
        if not self.dual_stream:
            return x, codes
        idx, zq = sovq.quantize_with_gradient(
            e, codebook, straight_through=self.sovq_cfg.straight_through)
        z = nn.add_positions(T.scale(zq, math.sqrt(d)))
        return T.concat0(z, x), idx

    # ----------------------------------------------------------------- layers

    def _enc_layer(self, i, s, b, src_live, drop, rng, penalties):
        p, kind = self.params, self.cfg.layer_kind
        pre = f"enc.l{i}"
        h = nn.layer_norm(p, f"{pre}.ln1", s)
        if kind == "vanilla":
            probs = nn.attn_probs(p, f"{pre}.attn", h, h, self.cfg.n_heads,
                                  key_mask=src_live)
            trace = probs
        elif kind == "sal":
            hz = T.slice0(h, 0, b)
            probs_z = nn.attn_probs(p, f"{pre}.attn", hz, hz, self.cfg.n_heads,
                                    key_mask=src_live)
            probs = T.concat0(probs_z, probs_z)
            trace = probs_z
        else:  # srl: each stream attends to itself, shared weights
            probs = nn.attn_probs(p, f"{pre}.attn", h, h, self.cfg.n_heads,
                                  key_mask=_double(src_live))
            trace = T.slice0(probs, b, 2 * b)
        s = T.add(s, nn.attn_apply(p, f"{pre}.attn", probs, h, self.cfg.n_heads,
                                   drop=drop, rng=rng))
        s = T.add(s, nn.feed_forward(p, f"{pre}.ff",
                                     nn.layer_norm(p, f"{pre}.ln2", s), drop, rng))
        if kind == "srl":
            penalties.append(stream_divergence(T.slice0(s, b, 2 * b), T.slice0(s, 0, b)))
        return s, trace

    def encode_batch(self, src_ids, src_live, train=False, rng=None, capture=False):
        """Run the encoder over a padded batch.

        Returns (e_src, memory, codes, traces, penalties) where memory
        is the stacked [z_L; x_L] (dual-stream kinds) or plain x_L.
        """
        drop = self.cfg.dropout if train else 0.0
        e = self._embed("src_embed", src_ids)
        s, codes = self._start_stack(e, self.codebook_src)
        b = src_ids.shape[0]
        traces, penalties = [], []
        for i in range(self.cfg.n_enc_layers):
            s, trace = self._enc_layer(i, s, b, src_live, drop, rng, penalties)
            if capture:
                traces.append(np.array(trace.data, copy=True))
        s = nn.layer_norm(self.params, "enc.norm", s)
        return e, s, codes, traces, penalties

    def _dec_layer(self, i, s, b, enc_mem, src_live, tgt_live, drop, rng, penalties):
        p, kind = self.params, self.cfg.layer_kind
        pre = f"dec.l{i}"
        heads = self.cfg.n_heads
        dual = s.data.shape[0] == 2 * b
        h = nn.layer_norm(p, f"{pre}.ln1", s)
        if kind == "sal":
            hz = T.slice0(h, 0, b)
            probs_z = nn.attn_probs(p, f"{pre}.self_attn", hz, hz, heads,
                                    key_mask=tgt_live, causal=True)
            probs = T.concat0(probs_z, probs_z)
        else:
            probs = nn.attn_probs(p, f"{pre}.self_attn", h, h, heads,
                                  key_mask=_double(tgt_live) if dual else tgt_live,
                                  causal=True)
        s = T.add(s, nn.attn_apply(p, f"{pre}.self_attn", probs, h, heads,
                                   drop=drop, rng=rng))
        c = nn.layer_norm(p, f"{pre}.ln2", s)
        cross = nn.attn_probs(p, f"{pre}.cross_attn", c, enc_mem, heads,
                              key_mask=_double(src_live) if dual else src_live)
        s = T.add(s, nn.attn_apply(p, f"{pre}.cross_attn", cross, enc_mem, heads,
                                   drop=drop, rng=rng))
        s = T.add(s, nn.feed_forward(p, f"{pre}.ff",
                                     nn.layer_norm(p, f"{pre}.ln3", s), drop, rng))
        if kind == "srl":
            penalties.append(stream_divergence(T.slice0(s, b, 2 * b), T.slice0(s, 0, b)))
        return s

    def decode_batch(self, tgt_in_ids, tgt_live, enc_mem, src_live,
                     train=False, rng=None):
        drop = self.cfg.dropout if train else 0.0
        e = self._embed("tgt_embed", tgt_in_ids)
        s, codes = self._start_stack(e, self.codebook_tgt)
        b = tgt_in_ids.shape[0]
        penalties = []
        for i in range(self.cfg.n_dec_layers):
            s = self._dec_layer(i, s, b, enc_mem, src_live, tgt_live,
                                drop, rng, penalties)
        s = nn.layer_norm(self.params, "dec.norm", s)
        if s.data.shape[0] == 2 * b:
            return e, T.slice0(s, b, 2 * b), T.slice0(s, 0, b), codes, penalties
        return e, s, None, codes, penalties

    # ------------------------------------------------------------------ joint

    def forward_batch(self, batch, train=False, rng=None, capture=False):
        e_src, enc_mem, src_codes, traces, pen_enc = self.encode_batch(
            batch.src, batch.src_live, train=train, rng=rng, capture=capture)
        e_tgt, dec_y, dec_z, tgt_codes, pen_dec = self.decode_batch(
            batch.tgt_in, batch.tgt_live, enc_mem, batch.src_live,
            train=train, rng=rng)
        d = self.cfg.d_model
        y2 = T.reshape(dec_y, (-1, d))
        logits = T.matmul(y2, T.swapaxes(self.params["tgt_embed"], 0, 1))
        code_logits = None
        if dec_z is not None:
            code_logits = nn.linear(self.params, "code_head", T.reshape(dec_z, (-1, d)))
        penalty = None
        for extra in pen_enc + pen_dec:
            penalty = extra if penalty is None else T.add(penalty, extra)
        return ForwardResult(
            logits=logits, code_logits=code_logits,
            e_src=e_src, e_tgt=e_tgt,
            src_codes=src_codes, tgt_codes=tgt_codes,
            srl_penalty=penalty, enc_traces=traces)

    # ----------------------------------------------------------------- decode

    def encode_tokens(self, token_ids, capture_traces=False):
        """Single-sentence encode; returns (x_L, z_L, codes, trace [L,H,n,n])."""
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ValueError("encode needs a non-empty 1-d token sequence")
        live = np.ones((1, ids.size), dtype=bool)
        with T.no_grad():
            _, mem, codes, traces, _ = self.encode_batch(
                ids[None, :], live, capture=capture_traces)
        if mem.data.shape[0] == 2:
            z_l, x_l = mem.data[0], mem.data[1]
        else:
            z_l, x_l = None, mem.data[0]
        trace = np.stack([t[0] for t in traces]) if traces else None
        return x_l, z_l, (None if codes is None else codes[0]), trace

    def _step_logits(self, src_live, enc_mem, prefix_ids):
        """Logits for the next token of every sequence in the batch."""
        live = np.ones(prefix_ids.shape, dtype=bool)
        _, dec_y, _, _, _ = self.decode_batch(prefix_ids, live, enc_mem, src_live)
        return dec_y.data[:, -1] @ self.params["tgt_embed"].data.T

    def next_logprobs(self, src_tokens, prefix_tokens):
        """Log-probabilities of the next target token (single sentence)."""
        src = np.asarray(list(src_tokens) + [EOS], dtype=np.int64)[None, :]
        live = np.ones(src.shape, dtype=bool)
        with T.no_grad():
            _, enc_mem, _, _, _ = self.encode_batch(src, live)
            prefix = np.asarray([BOS] + list(prefix_tokens), dtype=np.int64)[None, :]
            logits = self._step_logits(live, enc_mem, prefix)[0]
        logits = logits.astype(np.float64)
        logits -= logits.max()
        return logits - np.log(np.exp(logits).sum())


def stream_divergence(x, z, stop_z=False):
    """Mean over tokens and dims of (x - z)^2; the soft-invariance penalty."""
    zz = T.detach(z) if stop_z else z
    diff = T.sub(x, zz)
    return T.mean_all(T.mul(diff, diff))


def code_prediction_head(model, z_dec, target_codes, live=None):
    """Cross-entropy of the decoder code stream against next-token codes."""
    logits = nn.linear(model.params, "code_head", z_dec)
    return T.cross_entropy(logits, target_codes, mask=live, mode="logits")


def length_cap(n_src, a=1.2, b=10):
    return int(math.ceil(a * n_src) + b)


def greedy_decode(model, src_tokens, a=1.2, b=10):
    """Argmax decoding of one sentence until EOS or the length cap."""
    out = []
    cap = length_cap(len(src_tokens), a, b)
    while len(out) < cap:
        nxt = int(np.argmax(model.next_logprobs(src_tokens, out)))
        if nxt == EOS:
            break
        out.append(nxt)
    return out


def greedy_decode_batch(model, srcs, a=1.2, b=10):
    """Batched greedy decoding; equivalent to greedy_decode per sentence."""
    if not srcs:
        return []
    b_n = len(srcs)
    caps = [length_cap(len(s), a, b) for s in srcs]
    ns = max(len(s) + 1 for s in srcs)
    src = np.full((b_n, ns), PAD, dtype=np.int64)
    live = np.zeros((b_n, ns), dtype=bool)
    for i, s in enumerate(srcs):
        src[i, :len(s)] = s
        src[i, len(s)] = EOS
        live[i, :len(s) + 1] = True
    outs = [[] for _ in range(b_n)]
    done = np.zeros(b_n, dtype=bool)
    with T.no_grad():
        _, enc_mem, _, _, _ = model.encode_batch(src, live)
        prefix = np.full((b_n, 1), BOS, dtype=np.int64)
        for _ in range(max(caps)):
            logits = model._step_logits(live, enc_mem, prefix)
            nxt = logits.argmax(axis=1)
            for i in range(b_n):
                if done[i]:
                    continue
                if nxt[i] == EOS:
                    done[i] = True
                else:
                    outs[i].append(int(nxt[i]))
                    if len(outs[i]) >= caps[i]:
                        done[i] = True
            if done.all():
                break
            prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
    return outs


def beam_decode(model, src_tokens, beam=5, a=1.2, b=10):
    """Length-unnormalized log-prob beam search; beam=1 equals greedy.

    Hypotheses at the length cap are force-terminated with the EOS
    score. Search stops once the best finished hypothesis can no longer
    be beaten (scores only decrease with length).
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    cap = length_cap(len(src_tokens), a, b)
    beams = [([], 0.0)]
    finished = []
    while beams:
        candidates = []
        for toks, lp in beams:
            logp = model.next_logprobs(src_tokens, toks)
            if len(toks) >= cap:
                finished.append((toks, lp + float(logp[EOS])))
                continue
            for t in np.argsort(-logp, kind="stable")[:beam]:
                score = lp + float(logp[t])
                if int(t) == EOS:
                    finished.append((toks, score))
                else:
                    candidates.append((toks + [int(t)], score))
        candidates.sort(key=lambda c: -c[1])
        beams = candidates[:beam]
        if finished and (not beams or
                         max(s for _, s in finished) >= beams[0][1]):
            break
    return max(finished, key=lambda c: c[1])[0] if finished else []
