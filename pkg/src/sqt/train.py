"""Loss aggregation, Adam, schedules, checkpointing, exact-match eval.

The training loop is a pure function of (seed, config, data): batches,
dropout, and initialization are all derived from the seed and the
absolute step index, so two runs with the same inputs produce the same
loss trajectory, and a resumed run continues the unbroken one exactly.
"""

import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import data as D
from . import kernels, nn, sovq
from . import model as M
from . import tensor as T

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 5e-4
    warmup_steps: int = 4000
    total_steps: int = 20000
    batch_size: int = 64
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    alpha: float = 1.0       # clustering loss weight
    beta: float = 0.1        # stream-divergence penalty weight (srl)
    lambda_code: float = 1.0  # next-code prediction weight
    eval_every: int = 1000
    eval_limit: int = 200

    def validate(self):
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ValueError("adam betas must be in [0, 1)")
        if min(self.alpha, self.beta, self.lambda_code) < 0:
            raise ValueError("loss coefficients must be >= 0")
        if self.total_steps < 1 or self.batch_size < 1 or self.warmup_steps < 1:
            raise ValueError("steps, batch size and warmup must be positive")


def lr_schedule(step, warmup, base_lr):
    """Linear warmup to base_lr, then inverse-sqrt decay."""
    if step < 1:
        raise ValueError("step starts at 1")
    return base_lr * min(step / warmup, math.sqrt(warmup / step))


def total_loss(batch, model, cfg: TrainConfig, rng=None, train=True):
    """Aggregate training loss and its per-component breakdown.

    Components (already coefficient-scaled, so they sum to the total):
    token cross entropy, next-code prediction, clustering loss per
    vocabulary side, stream-divergence penalty.
    """
    fwd = model.forward_batch(batch, train=train, rng=rng)
    tgt_flat = batch.tgt_out.reshape(-1)
    live_flat = batch.tgt_live.reshape(-1)
    ce = T.cross_entropy(fwd.logits, tgt_flat, mask=live_flat)
    pieces = {"ce": ce}
    if cfg.lambda_code > 0 and fwd.code_logits is not None:
        out_embeds = model.params["tgt_embed"].data[tgt_flat]
        code_targets, _ = model.codebook_tgt.quantize_hard(out_embeds)
        code_ce = T.cross_entropy(fwd.code_logits, code_targets, mask=live_flat)
        pieces["code_ce"] = T.scale(code_ce, cfg.lambda_code)
    if cfg.alpha > 0 and model.cfg.quantize:
        sc = model.sovq_cfg
        d = model.cfg.d_model
        q_src = sovq.posterior_soft(
            T.reshape(fwd.e_src, (-1, d)), model.codebook_src, sc.tau)
        p_src, _ = model.prior_src.forward(fwd.src_codes, batch.src_live)
        p_src = T.reshape(p_src, (-1, sc.k_src))
        if not sc.train_prior:
            p_src = T.detach(p_src)
        pieces["sovq_src"] = sovq.sovq_loss(
            q_src, p_src, batch.src_live.reshape(-1), cfg.alpha)
        q_tgt = sovq.posterior_soft(
            T.reshape(fwd.e_tgt, (-1, d)), model.codebook_tgt, sc.tau)
        p_tgt, _ = model.prior_tgt.forward(fwd.tgt_codes, batch.tgt_live)
        p_tgt = T.reshape(p_tgt, (-1, sc.k_tgt))
        if not sc.train_prior:
            p_tgt = T.detach(p_tgt)
        pieces["sovq_tgt"] = sovq.sovq_loss(
            q_tgt, p_tgt, batch.tgt_live.reshape(-1), cfg.alpha)
    if cfg.beta > 0 and fwd.srl_penalty is not None:
        pieces["srl"] = T.scale(fwd.srl_penalty, cfg.beta)

    total = None
    breakdown = {}
    for name in ("ce", "sovq_src", "sovq_tgt", "srl", "code_ce"):
        piece = pieces.get(name)
        if piece is None:
            breakdown[name] = 0.0
            continue
        breakdown[name] = T.assert_finite(float(piece.data), name)
        total = piece if total is None else T.add(total, piece)
    breakdown["loss"] = T.assert_finite(float(total.data), "loss")
    return total, breakdown, fwd


class AdamState:
    """Per-parameter first/second moment buffers plus the step counter."""

    def __init__(self):
        self.t = 0
        self.m = {}
        self.v = {}

    def slot(self, name, shape, dtype):
        if name not in self.m:
            self.m[name] = np.zeros(int(np.prod(shape)), dtype=dtype)
            self.v[name] = np.zeros(int(np.prod(shape)), dtype=dtype)
        return self.m[name], self.v[name]


def adam_step(params, state: AdamState, lr, cfg: TrainConfig):
    """One bias-corrected Adam update over every parameter with a gradient."""
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name in sorted(params):
        p = params[name]
        if p.grad is None:
            continue
        m, v = state.slot(name, p.data.shape, p.data.dtype)
        g = np.ascontiguousarray(p.grad.reshape(-1), dtype=p.data.dtype)
        kernels.adam_update(p.data.reshape(-1), g, m, v,
                            lr, b1, b2, cfg.adam_eps, bc1, bc2)


def ema_step(model, batch, fwd):
    """Fold this batch's hard assignments into both codebooks (pads excluded)."""
    if not model.cfg.quantize:
        return
    d = model.cfg.d_model
    live = batch.src_live.reshape(-1)
    model.codebook_src.ema_update(fwd.src_codes.reshape(-1)[live],
                                  fwd.e_src.data.reshape(-1, d)[live])
    live = batch.tgt_live.reshape(-1)
    model.codebook_tgt.ema_update(fwd.tgt_codes.reshape(-1)[live],
                                  fwd.e_tgt.data.reshape(-1, d)[live])


def evaluate_exact_match(model, examples, src_vocab, tgt_vocab,
                         decode_mode="greedy", beam=5, limit=None, seed=0,
                         chunk=64):
    """Fraction of examples whose decoded tokens equal the target exactly."""
    if not examples:
        raise ValueError("cannot evaluate on an empty dataset")
    if limit is not None and limit < len(examples):
        rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0xE7A1])
        pick = rng.choice(len(examples), size=limit, replace=False)
        examples = [examples[i] for i in sorted(pick)]
    srcs = [src_vocab.encode(ex.src) for ex in examples]
    refs = [tgt_vocab.encode(ex.tgt) for ex in examples]
    hits = 0
    if decode_mode == "greedy":
        for s in range(0, len(srcs), chunk):
            outs = M.greedy_decode_batch(model, srcs[s:s + chunk])
            hits += sum(o == r for o, r in zip(outs, refs[s:s + chunk]))
    elif decode_mode == "beam":
        for src, ref in zip(srcs, refs):
            hits += M.beam_decode(model, src, beam=beam) == ref
    else:
        raise ValueError(f"unknown decode_mode {decode_mode!r}")
    return hits / len(examples)


# ------------------------------------------------------------- checkpointing

def _checkpoint_arrays(model, opt: AdamState):
    arrays = []
    for name in sorted(model.params):
        arrays.append((f"param.{name}", model.params[name].data))
    for name in sorted(opt.m):
        arrays.append((f"adam.m.{name}", opt.m[name]))
        arrays.append((f"adam.v.{name}", opt.v[name]))
    for side in ("src", "tgt"):
        cb = getattr(model, f"codebook_{side}")
        if cb is not None:
            for key, arr in cb.state_arrays().items():
                arrays.append((f"codebook_{side}.{key}", arr))
    return arrays


def save_checkpoint(ckpt_dir, model, opt: AdamState, step,
                    src_vocab, tgt_vocab, train_cfg: TrainConfig):
    """Write manifest.json + weights.bin (+ vocab files) atomically."""
    ckpt = Path(ckpt_dir)
    ckpt.mkdir(parents=True, exist_ok=True)
    arrays = _checkpoint_arrays(model, opt)
    entries = []
    offset = 0
    blob = bytearray()
    for name, arr in arrays:
        flat = np.ascontiguousarray(arr, dtype="<f4").reshape(-1)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob += flat.tobytes()
        offset += flat.nbytes
    manifest = {
        "version": CHECKPOINT_VERSION,
        "step": step,
        "adam_t": opt.t,
        "total_bytes": offset,
        "entries": entries,
        "vocab_files": ["vocab_src.txt", "vocab_tgt.txt"],
        "config": {
            "model": asdict(model.cfg),
            "sovq": asdict(model.sovq_cfg),
            "train": asdict(train_cfg),
            "model_seed": model.seed,
            "vocab_src_size": model.vocab_src_size,
            "vocab_tgt_size": model.vocab_tgt_size,
        },
    }
    tmp = ckpt / "weights.bin.tmp"
    tmp.write_bytes(bytes(blob))
    os.replace(tmp, ckpt / "weights.bin")
    src_vocab.save(ckpt / "vocab_src.txt")
    tgt_vocab.save(ckpt / "vocab_tgt.txt")
    tmp = ckpt / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, ckpt / "manifest.json")


@dataclass
class Checkpoint:
    model: M.SQModel
    opt: AdamState
    step: int
    train_cfg: TrainConfig
    src_vocab: D.Vocab
    tgt_vocab: D.Vocab


def load_checkpoint(ckpt_dir):
    ckpt = Path(ckpt_dir)
    manifest = json.loads((ckpt / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {manifest.get('version')} unsupported")
    blob = (ckpt / "weights.bin").read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise ValueError(
            f"weights.bin has {len(blob)} bytes, manifest says {manifest['total_bytes']}")
    conf = manifest["config"]
    model_cfg = M.ModelConfig(**conf["model"])
    sovq_cfg = sovq.SoVQConfig(**conf["sovq"])
    train_cfg = TrainConfig(**conf["train"])
    model = M.SQModel(model_cfg, conf["vocab_src_size"], conf["vocab_tgt_size"],
                      seed=conf["model_seed"], sovq_cfg=sovq_cfg)
    opt = AdamState()
    opt.t = manifest["adam_t"]
    arrays = {}
    for ent in manifest["entries"]:
        shape = tuple(ent["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n,
                            offset=ent["offset"]).reshape(shape)
        arrays[ent["name"]] = arr
    for name, arr in arrays.items():
        kind, _, rest = name.partition(".")
        if kind == "param":
            p = model.params[rest]
            if p.data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {rest}")
            p.data = arr.astype(p.data.dtype)
        elif kind == "adam":
            which, _, pname = rest.partition(".")
            getattr(opt, which)[pname] = arr.reshape(-1).copy()
    for side in ("src", "tgt"):
        cb = getattr(model, f"codebook_{side}")
        if cb is not None:
            cb.load_state_arrays({
                key: arrays[f"codebook_{side}.{key}"]
                for key in ("embeddings", "ema_counts", "ema_sums")})
    src_vocab = D.Vocab.load(ckpt / "vocab_src.txt")
    tgt_vocab = D.Vocab.load(ckpt / "vocab_tgt.txt")
    return Checkpoint(model=model, opt=opt, step=manifest["step"],
                      train_cfg=train_cfg, src_vocab=src_vocab, tgt_vocab=tgt_vocab)


# ------------------------------------------------------------------ the loop

METRICS_HEADER = "step\tloss\tce\tsovq_src\tsovq_tgt\tsrl\tcode_ce\tdev_acc"


def train_run(model, train_set, dev_set, src_vocab, tgt_vocab,
              cfg: TrainConfig, run_dir, start_step=0, opt=None, log=None,
              loss_hook=None):
    """Train for cfg.total_steps, tracking the best-on-dev checkpoint.

    Returns (best_dev_acc, metrics rows). start_step/opt support resuming
    from a loaded checkpoint.
    """
    cfg.validate()
    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    stream = D.StepStream(train_set, cfg.batch_size, cfg.seed, src_vocab, tgt_vocab)
    opt = opt or AdamState()
    metrics_path = run / "metrics.tsv"
    if start_step == 0 or not metrics_path.exists():
        metrics_path.write_text(METRICS_HEADER + "\n", encoding="utf-8")
    best_acc = -1.0
    rows = []
    for step in range(start_step + 1, cfg.total_steps + 1):
        batch = stream.batch(step - 1)
        rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, 0xD409, step])
        nn.zero_grads(model.params)
        loss, breakdown, fwd = total_loss(batch, model, cfg, rng=rng)
        T.backward(loss)
        nn.clip_grads(model.params, cfg.grad_clip)
        adam_step(model.params, opt, lr_schedule(step, cfg.warmup_steps, cfg.lr), cfg)
        ema_step(model, batch, fwd)
        if loss_hook is not None:
            loss_hook(step, breakdown)
        if step % cfg.eval_every == 0 or step == cfg.total_steps:
            dev_acc = evaluate_exact_match(
                model, dev_set, src_vocab, tgt_vocab,
                limit=cfg.eval_limit, seed=cfg.seed)
            line = "\t".join([str(step)] + [
                f"{breakdown[k]:.6f}" for k in
                ("loss", "ce", "sovq_src", "sovq_tgt", "srl", "code_ce")]
                + [f"{dev_acc:.4f}"])
            with metrics_path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")
            if log is not None:
                log(line)
            rows.append((step, breakdown, dev_acc))
            if dev_acc >= best_acc:
                best_acc = dev_acc
                save_checkpoint(run / "best", model, opt, step,
                                src_vocab, tgt_vocab, cfg)
    save_checkpoint(run / "last", model, opt, cfg.total_steps,
                    src_vocab, tgt_vocab, cfg)
    return best_acc, rows
