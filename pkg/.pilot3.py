"""Pilot 3: criterion-3 recipe search. args: kind seed steps lr warmup batch alpha b1 tag"""
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

kind, seed, steps, lr, warm, bs, alpha, b1 = (
    sys.argv[1], int(sys.argv[2]), int(sys.argv[3]), float(sys.argv[4]),
    int(sys.argv[5]), int(sys.argv[6]), float(sys.argv[7]), float(sys.argv[8]))

train_set, dev, test, grammar = D.gen_addjump(2, 1000, seed=0)
sv, tv = D.build_vocabs(train_set + dev)
quant = kind != "vanilla"
mc = M.ModelConfig(n_enc_layers=2, n_dec_layers=2, n_heads=2, d_model=64,
                   d_ff=128, layer_kind=kind, dropout=0.1, quantize=quant)
model = M.SQModel(mc, len(sv), len(tv), seed=seed, sovq_cfg=S.SoVQConfig())
cfg = TR.TrainConfig(total_steps=steps, batch_size=bs, seed=seed,
                     alpha=alpha if quant else 0.0,
                     lambda_code=1.0 if quant else 0.0, beta=0.0,
                     adam_beta1=b1, eval_every=2000, eval_limit=150,
                     warmup_steps=warm, lr=lr)
stream = D.StepStream(train_set, cfg.batch_size, cfg.seed, sv, tv)
opt = TR.AdamState()

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
    if step % 2000 == 0:
        msg = f"step {step} t={time.time()-t0:.0f}s loss={parts['loss']:.3f} ce={parts['ce']:.3f}"
        if quant:
            report = A.cluster_report(model, sv)
            verbs = [report.assignment[t] for t in ("walk", "look", "run", "jump")]
            msg += f" wlrj={verbs}"
        dev_acc = TR.evaluate_exact_match(model, dev, sv, tv, limit=150, seed=0)
        acc = TR.evaluate_exact_match(model, test, sv, tv, limit=150, seed=0)
        msg += f" dev={dev_acc:.3f} test={acc:.3f}"
        print(msg, flush=True)
