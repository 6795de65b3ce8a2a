"""Pilot 2: longer run, telemetry on entropy/CE split + cluster membership."""
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

n_atomic = int(sys.argv[1])
seed = int(sys.argv[2])
steps = int(sys.argv[3])
tau = float(sys.argv[4]) if len(sys.argv) > 4 else 0.1
alpha = float(sys.argv[5]) if len(sys.argv) > 5 else 1.0
lr = float(sys.argv[6]) if len(sys.argv) > 6 else 5e-4
warm = int(sys.argv[7]) if len(sys.argv) > 7 else 1000

train_set, dev, test, grammar = D.gen_addjump(2, n_atomic, seed=0)
sv, tv = D.build_vocabs(train_set + dev)
mc = M.ModelConfig(n_enc_layers=2, n_dec_layers=2, n_heads=2, d_model=64,
                   d_ff=128, layer_kind="sal", dropout=0.1)
model = M.SQModel(mc, len(sv), len(tv), seed=seed,
                  sovq_cfg=S.SoVQConfig(tau=tau))
cfg = TR.TrainConfig(total_steps=steps, batch_size=32, seed=seed, alpha=alpha,
                     eval_every=1000, eval_limit=150, warmup_steps=warm, lr=lr)
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
    if step % 1000 == 0:
        report = A.cluster_report(model, sv)
        verbs = [report.assignment[t] for t in ("walk", "look", "run", "jump")]
        vcodes = {}
        for name, _ in grammar.primitives:
            vcodes[report.assignment[name]] = vcodes.get(report.assignment[name], 0) + 1
        # entropy/CE split over one batch
        e = T.tensor(model.params["src_embed"].data[batch.src.reshape(-1)])
        q = S.posterior_soft(e, model.codebook_src, tau)
        h = S.entropy_term(q, batch.src_live.reshape(-1)).item()
        acc = TR.evaluate_exact_match(model, test, sv, tv, limit=150, seed=0)
        dev_acc = TR.evaluate_exact_match(model, dev, sv, tv, limit=150, seed=0)
        print(f"step {step} t={time.time()-t0:.0f}s loss={parts['loss']:.3f} "
              f"ce={parts['ce']:.3f} sovq={parts['sovq_src']:.3f} H'={h:.3f} "
              f"dev={dev_acc:.3f} test={acc:.3f} wlrj={verbs} verb_clusters={vcodes}",
              flush=True)
report = A.cluster_report(model, sv)
for c in sorted(report.groups):
    print(" ", c, sorted(report.groups[c]), flush=True)
