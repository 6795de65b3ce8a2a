"""Shared test utilities: tiny corpora and short training runs."""

import numpy as np

import sqt.data as D
import sqt.model as M
import sqt.nn as nn
import sqt.sovq as S
import sqt.tensor as T
import sqt.train as TR

COPY_LETTERS = list("abcdef")


def copy_dataset(n=300, seed=0, min_len=2, max_len=5):
    """src = random letters, tgt = the same letters uppercased."""
    rng = np.random.default_rng(seed)
    examples = []
    for _ in range(n):
        ln = int(rng.integers(min_len, max_len + 1))
        toks = [COPY_LETTERS[i] for i in rng.integers(0, len(COPY_LETTERS), size=ln)]
        examples.append(D.Example(src=toks, tgt=[t.upper() for t in toks]))
    return examples


def tiny_model(sv, tv, kind="vanilla", seed=0, d=32, heads=2, layers=1,
               quantize=None, k_src=4, k_tgt=4, dropout=0.0):
    mc = M.ModelConfig(
        n_enc_layers=layers, n_dec_layers=layers, n_heads=heads,
        d_model=d, d_ff=2 * d, layer_kind=kind, dropout=dropout,
        quantize=kind != "vanilla" if quantize is None else quantize)
    sc = S.SoVQConfig(k_src=k_src, k_tgt=k_tgt)
    return M.SQModel(mc, len(sv), len(tv), seed=seed, sovq_cfg=sc)


def quick_train(model, examples, sv, tv, steps=400, batch_size=32, lr=1e-3,
                seed=0, alpha=0.0, beta=0.0, lambda_code=0.0, warmup=50,
                loss_hook=None):
    cfg = TR.TrainConfig(
        lr=lr, warmup_steps=warmup, total_steps=steps, batch_size=batch_size,
        seed=seed, alpha=alpha, beta=beta, lambda_code=lambda_code,
        eval_every=steps + 1, eval_limit=8)
    stream = D.StepStream(examples, batch_size, seed, sv, tv)
    opt = TR.AdamState()
    for step in range(1, steps + 1):
        batch = stream.batch(step - 1)
        rng = np.random.default_rng([seed & 0xFFFFFFFF, 0xD409, step])
        nn.zero_grads(model.params)
        loss, parts, fwd = TR.total_loss(batch, model, cfg, rng=rng)
        T.backward(loss)
        nn.clip_grads(model.params, cfg.grad_clip)
        TR.adam_step(model.params, opt,
                     TR.lr_schedule(step, cfg.warmup_steps, cfg.lr), cfg)
        TR.ema_step(model, batch, fwd)
        if loss_hook is not None:
            loss_hook(step, parts)
    return model


class RiggedDecoder:
    """Fixed next-token distributions keyed by the prefix (decode tests)."""

    def __init__(self, table, vocab_size=4, default_eos=0.9):
        self.table = {tuple(k): np.asarray(v, dtype=np.float64)
                      for k, v in table.items()}
        self.v = vocab_size
        self.default_eos = default_eos

    def next_logprobs(self, src_tokens, prefix_tokens):
        key = tuple(prefix_tokens)
        if key in self.table:
            p = self.table[key]
        else:
            p = np.full(self.v, (1 - self.default_eos) / (self.v - 1))
            p[M.EOS] = self.default_eos
        return np.log(np.maximum(p, 1e-300))
