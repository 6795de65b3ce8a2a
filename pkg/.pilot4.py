"""Pilot 4 grid: fit-first recipes.
args: tag seed steps lr warmup batch alpha lam drop tau st gamma
"""
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

(tag, seed, steps, lr, warm, bs, alpha, lam, drop, tau, st, gamma) = (
    sys.argv[1], int(sys.argv[2]), int(sys.argv[3]), float(sys.argv[4]),
    int(sys.argv[5]), int(sys.argv[6]), float(sys.argv[7]), float(sys.argv[8]),
    float(sys.argv[9]), float(sys.argv[10]), int(sys.argv[11]), float(sys.argv[12]))
b1 = float(sys.argv[13]) if len(sys.argv) > 13 else 0.9
kind = sys.argv[14] if len(sys.argv) > 14 else "sal" 

train_set, dev, test, grammar = D.gen_addjump(2, 1000, seed=0)
sv, tv = D.build_vocabs(train_set + dev)
mc = M.ModelConfig(n_enc_layers=2, n_dec_layers=2, n_heads=2, d_model=64,
                   d_ff=128, layer_kind=kind, dropout=drop,
                   quantize=kind != "vanilla")
sc = S.SoVQConfig(tau=tau, straight_through=bool(st), ema_decay=gamma)
model = M.SQModel(mc, len(sv), len(tv), seed=seed, sovq_cfg=sc)
cfg = TR.TrainConfig(total_steps=steps, batch_size=bs, seed=seed,
                     alpha=alpha if kind != "vanilla" else 0.0,
                     lambda_code=lam if kind != "vanilla" else 0.0,
                     beta=0.0, eval_every=2000, adam_beta1=b1,
                     eval_limit=150, warmup_steps=warm, lr=lr)
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
        dev_acc = TR.evaluate_exact_match(model, dev, sv, tv, limit=150, seed=0)
        acc = TR.evaluate_exact_match(model, test, sv, tv, limit=150, seed=0)
        msg = (f"{tag} step {step} t={time.time()-t0:.0f}s ce={parts['ce']:.3f} "
               f"sovq={parts['sovq_src']:.3f} dev={dev_acc:.3f} test={acc:.3f}")
        if kind != "vanilla":
            report = A.cluster_report(model, sv)
            verbs = [report.assignment[t] for t in ("walk", "look", "run", "jump")]
            tgt_ids = np.array([tv.index[t] for t in ("WALK", "LOOK", "RUN", "JUMP")])
            tcodes, _ = model.codebook_tgt.quantize_hard(
                model.params["tgt_embed"].data[tgt_ids])
            msg += f" src_wlrj={verbs} tgt_WLRJ={tcodes.tolist()}"
        print(msg, flush=True)

TR.save_checkpoint(f".pilot_ck_{tag}", model, opt, cfg.total_steps, sv, tv, cfg)
