"""Pilot: clustering behavior + early EM on addjump-2x desk scale."""
import sys
import time

import numpy as np

import sqt.analysis as A
import sqt.data as D
import sqt.model as M
import sqt.nn as nn
import sqt.sovq as S
import sqt.tensor as T
import sqt.train as TR

n_atomic = int(sys.argv[1]) if len(sys.argv) > 1 else 1000
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0
steps = int(sys.argv[3]) if len(sys.argv) > 3 else 3000

train_set, dev, test, grammar = D.gen_addjump(2, n_atomic, seed=0)
sv, tv = D.build_vocabs(train_set + dev)
mc = M.ModelConfig(n_enc_layers=2, n_dec_layers=2, n_heads=2, d_model=64,
                   d_ff=128, layer_kind="sal", dropout=0.1)
model = M.SQModel(mc, len(sv), len(tv), seed=seed, sovq_cfg=S.SoVQConfig())
cfg = TR.TrainConfig(total_steps=steps, batch_size=32, seed=seed,
                     eval_every=500, eval_limit=150, warmup_steps=2000)
stream = D.StepStream(train_set, cfg.batch_size, cfg.seed, sv, tv)
opt = TR.AdamState()
tags = {name: "verb" for name, _ in grammar.primitives}

t0 = time.time()
for step in range(1, cfg.total_steps + 1):
    batch = stream.batch(step - 1)
    rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, 0xD409, step])
    nn.zero_grads(model.params)
    loss, parts, fwd = TR.total_loss(batch, model, cfg, rng=rng)
    T.backward(loss)
    nn.clip_grads(model.params, cfg.grad_clip)
    TR.adam_step(model.params, opt, TR.lr_schedule(step, cfg.warmup_steps, cfg.lr), cfg)
    TR.ema_step(model, batch, fwd)
    if step % 500 == 0:
        report = A.cluster_report(model, sv)
        verbs = {t: report.assignment[t] for t in ("walk", "look", "run", "jump")}
        acc = TR.evaluate_exact_match(model, test, sv, tv, limit=150, seed=0)
        print(f"step {step} t={time.time()-t0:.0f}s loss={parts['loss']:.3f} "
              f"ce={parts['ce']:.3f} sovq={parts['sovq_src']:.3f} "
              f"em={acc:.3f} verbs={verbs}", flush=True)

report = A.cluster_report(model, sv)
groups = {c: sorted(toks) for c, toks in report.groups.items()}
print("final groups:")
for c in sorted(groups):
    print(" ", c, groups[c])
