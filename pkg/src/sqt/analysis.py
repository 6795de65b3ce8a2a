"""Attention and codebook diagnostics.

Given a trained model, this module finds sentence pairs whose quantized
code sequences coincide, compares their captured attention maps (KL
divergence and argmax agreement, computed in float64 with probabilities
clamped at 1e-12), and reports how the codebook groups the vocabulary.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as D

CLAMP = 1e-12


@dataclass
class AttentionTrace:
    token_ids: list
    probs: np.ndarray  # [layers, heads, n, n]


def trace_sentence(model, token_ids):
    """Encoder self-attention trace for one sentence (EOS appended)."""
    ids = list(token_ids) + [D.EOS]
    _, _, _, probs = model.encode_tokens(ids, capture_traces=True)
    return AttentionTrace(token_ids=ids, probs=probs.astype(np.float64))


def _check_pair(a: AttentionTrace, b: AttentionTrace):
    if a.probs.shape != b.probs.shape:
        raise ValueError(f"trace shapes differ: {a.probs.shape} vs {b.probs.shape}")


def _clamped_rows(probs):
    p = np.maximum(probs.astype(np.float64), CLAMP)
    return p / p.sum(axis=3, keepdims=True)


def attention_kl(trace_a, trace_b, symmetric=False):
    """Mean KL(P_A || P_B) over layers, heads and query rows.

    symmetric=True averages both directions. Rows are clamped at 1e-12
    and renormalized in float64, which keeps rows where B underflowed
    finite (and the value nonnegative); kl_underflow_rows counts how
    often that clamp engaged.
    """
    _check_pair(trace_a, trace_b)
    pa = _clamped_rows(trace_a.probs)
    pb = _clamped_rows(trace_b.probs)
    value = float((pa * (np.log(pa) - np.log(pb))).sum(axis=3).mean())
    if symmetric:
        rev = float((pb * (np.log(pb) - np.log(pa))).sum(axis=3).mean())
        value = 0.5 * (value + rev)
    return value


def kl_underflow_rows(trace_a, trace_b, mass=1e-6):
    """Rows where A puts mass on a key that underflows in B (clamp engaged)."""
    _check_pair(trace_a, trace_b)
    bad = (trace_a.probs > mass) & (trace_b.probs <= CLAMP)
    return int(bad.any(axis=3).sum())


def argmax_agreement(trace_a, trace_b):
    """Fraction of (layer, head, query) rows whose top-weight key matches."""
    _check_pair(trace_a, trace_b)
    am_a = trace_a.probs.argmax(axis=3)
    am_b = trace_b.probs.argmax(axis=3)
    return float((am_a == am_b).mean())


# -------------------------------------------------------------------- pairs

@dataclass
class PairSet:
    pairs: list            # (sentence A tokens, sentence B tokens)
    code_seqs: list        # matching code-index tuple per pair

    def __len__(self):
        return len(self.pairs)


def source_code_sequence(model, src_vocab, tokens):
    """Hard code ids for one source sentence (EOS appended, no padding)."""
    ids = np.asarray(src_vocab.encode(tokens) + [D.EOS], dtype=np.int64)
    e = model.params["src_embed"].data[ids]
    idx, _ = model.codebook_src.quantize_hard(e)
    return tuple(int(i) for i in idx)


def find_code_equal_pairs(examples, model, src_vocab, max_pairs=None):
    """All unordered sentence pairs with identical source code sequences.

    Quantization is per token type, so sentences are bucketed by their
    code-index tuple; pairs are emitted within buckets, deduplicated,
    self-pairs excluded. max_pairs caps the output deterministically.
    """
    if model.codebook_src is None:
        raise ValueError("model has no source codebook")
    all_ids = np.arange(len(src_vocab), dtype=np.int64)
    all_codes, _ = model.codebook_src.quantize_hard(
        model.params["src_embed"].data[all_ids])
    code_of_token = {tok: int(all_codes[i]) for i, tok in enumerate(src_vocab.tokens)}
    eos_code = int(all_codes[D.EOS])
    buckets = {}
    seen = set()
    for ex in examples:
        key = tuple(ex.src)
        if key in seen:
            continue
        seen.add(key)
        codes = tuple(code_of_token[t] for t in ex.src) + (eos_code,)
        buckets.setdefault(codes, []).append(list(ex.src))
    pairs, seqs = [], []
    for codes in sorted(buckets, key=lambda c: (len(c), c)):
        group = buckets[codes]
        for i in range(len(group)):
            for j in range(i + 1, len(group)):
                pairs.append((group[i], group[j]))
                seqs.append(codes)
                if max_pairs is not None and len(pairs) >= max_pairs:
                    return PairSet(pairs=pairs, code_seqs=seqs)
    return PairSet(pairs=pairs, code_seqs=seqs)


def pair_metrics(model, src_vocab, pairs, symmetric=False):
    """Per-pair (kl, agreement, underflow rows) over encoder traces."""
    out = []
    for sent_a, sent_b in pairs:
        ta = trace_sentence(model, src_vocab.encode(sent_a))
        tb = trace_sentence(model, src_vocab.encode(sent_b))
        out.append((attention_kl(ta, tb, symmetric=symmetric),
                    argmax_agreement(ta, tb),
                    kl_underflow_rows(ta, tb)))
    return out


def write_pairs(path, pair_set: PairSet):
    lines = [" ".join(a) + "\t" + " ".join(b) for a, b in pair_set.pairs]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_pairs(path):
    pairs = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        a, b = line.split("\t")
        pairs.append((a.split(), b.split()))
    return pairs


# ------------------------------------------------------------------ clusters

@dataclass
class ClusterReport:
    assignment: dict      # token -> code index
    groups: dict          # code index -> [tokens]
    purity: float | None  # majority-tag purity, when tags supplied

    def format(self):
        lines = []
        for code in sorted(self.groups):
            toks = " ".join(sorted(self.groups[code]))
            lines.append(f"code {code}: {toks}")
        if self.purity is not None:
            lines.append(f"majority-tag purity: {self.purity:.4f}")
        return "\n".join(lines)


def cluster_report(model, src_vocab, tags=None):
    """Token -> code grouping for the source vocabulary (specials excluded)."""
    if model.codebook_src is None:
        raise ValueError("model has no source codebook")
    tokens = src_vocab.content_tokens
    ids = np.asarray(src_vocab.encode(tokens), dtype=np.int64)
    e = model.params["src_embed"].data[ids]
    idx, _ = model.codebook_src.quantize_hard(e)
    assignment = {tok: int(code) for tok, code in zip(tokens, idx)}
    groups = {}
    for tok, code in assignment.items():
        groups.setdefault(code, []).append(tok)
    purity = None
    if tags:
        correct = 0
        total = 0
        for code, toks in groups.items():
            labels = [tags[t] for t in toks if t in tags]
            if not labels:
                continue
            counts = {}
            for lab in labels:
                counts[lab] = counts.get(lab, 0) + 1
            correct += max(counts.values())
            total += len(labels)
        purity = correct / total if total else None
    return ClusterReport(assignment=assignment, groups=groups, purity=purity)


def export_embeddings(model, src_vocab, path):
    """TSV of token, code index, then the embedding row (9 significant digits)."""
    tokens = src_vocab.content_tokens
    ids = np.asarray(src_vocab.encode(tokens), dtype=np.int64)
    e = model.params["src_embed"].data[ids]
    codes = (model.codebook_src.quantize_hard(e)[0]
             if model.codebook_src is not None else np.full(len(tokens), -1))
    lines = []
    for tok, code, row in zip(tokens, codes, e):
        vals = "\t".join(f"{v:.9g}" for v in row)
        lines.append(f"{tok}\t{int(code)}\t{vals}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return len(lines)


# -------------------------------------------------------------- trace files

def write_trace(path, trace: AttentionTrace):
    """Token ids, then '<layers> <heads>', then one matrix per layer/head."""
    layers, heads, n, _ = trace.probs.shape
    lines = [" ".join(str(t) for t in trace.token_ids), f"{layers} {heads}"]
    for l in range(layers):
        for h in range(heads):
            for row in trace.probs[l, h]:
                lines.append(" ".join(f"{v:.9g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_trace(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    token_ids = [int(t) for t in lines[0].split()]
    layers, heads = (int(v) for v in lines[1].split())
    n = len(token_ids)
    vals = []
    for line in lines[2:]:
        if line:
            vals.append([float(v) for v in line.split()])
    probs = np.asarray(vals, dtype=np.float64).reshape(layers, heads, n, n)
    return AttentionTrace(token_ids=token_ids, probs=probs)
