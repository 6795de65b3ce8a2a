"""Command-line entry point.

Subcommands: gen-data, train, eval, analyze kl, analyze find-pairs,
analyze clusters, export embeddings. Run configuration is a flat JSON
file; command-line flags override file values, and the effective config
is echoed into the run directory. Exit codes: 0 success, 1 domain
error, 2 usage error.
"""

import argparse
import json
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import analysis
from . import data as D
from . import model as M
from . import sovq, train


@dataclass
class RunConfig:
    """Flat view of model + quantizer + training knobs (the config JSON keys)."""
    layer_kind: str = "vanilla"
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 256
    dropout: float = 0.1
    tie_decoder_embeddings: bool = True
    quantize: bool = True
    k_src: int = 6
    k_tgt: int = 4
    tau: float = 0.1
    ema_decay: float = 0.99
    straight_through: bool = True
    train_prior: bool = True
    lr: float = 5e-4
    warmup_steps: int = 4000
    total_steps: int = 20000
    batch_size: int = 64
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    alpha: float = 1.0
    beta: float = 0.1
    lambda_code: float = 1.0
    eval_every: int = 1000
    eval_limit: int = 200

    @classmethod
    def load(cls, path=None, overrides=None):
        values = {}
        if path is not None:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
            known = {f.name for f in fields(cls)}
            unknown = sorted(set(raw) - known)
            if unknown:
                raise ValueError(f"unknown config keys: {', '.join(unknown)}")
            values.update(raw)
        for key, val in (overrides or {}).items():
            if val is not None:
                values[key] = val
        return cls(**values)

    def split(self):
        mc = M.ModelConfig(
            n_enc_layers=self.n_enc_layers, n_dec_layers=self.n_dec_layers,
            n_heads=self.n_heads, d_model=self.d_model, d_ff=self.d_ff,
            layer_kind=self.layer_kind, dropout=self.dropout,
            tie_decoder_embeddings=self.tie_decoder_embeddings,
            quantize=self.quantize or self.layer_kind in ("sal", "srl"))
        sc = sovq.SoVQConfig(
            k_src=self.k_src, k_tgt=self.k_tgt, tau=self.tau,
            alpha=self.alpha, ema_decay=self.ema_decay,
            straight_through=self.straight_through, train_prior=self.train_prior)
        tc = train.TrainConfig(
            lr=self.lr, warmup_steps=self.warmup_steps, total_steps=self.total_steps,
            batch_size=self.batch_size, seed=self.seed,
            adam_beta1=self.adam_beta1, adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps, grad_clip=self.grad_clip,
            alpha=self.alpha, beta=self.beta, lambda_code=self.lambda_code,
            eval_every=self.eval_every, eval_limit=self.eval_limit)
        return mc, sc, tc


def build_parser():
    p = argparse.ArgumentParser(prog="sqt", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--task", choices=("addjump", "aroundright"), required=True)
    g.add_argument("--augment", type=int, default=2,
                   help="extra primitive copies per base verb (addjump)")
    g.add_argument("--atomic", type=int, default=1000,
                   help="repetitions of each atomic command (addjump)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--max-train", type=int, default=200_000)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--config", help="flat JSON config; flags override")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--layer-kind", choices=M.LAYER_KINDS, dest="layer_kind")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int, dest="total_steps")
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--lr", type=float)
    t.add_argument("--alpha", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--lambda-code", type=float, dest="lambda_code")
    t.add_argument("--adam-beta1", type=float, dest="adam_beta1")
    t.add_argument("--d-model", type=int, dest="d_model")
    t.add_argument("--resume", help="checkpoint dir to continue from")

    e = sub.add_parser("eval", help="exact-match accuracy of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "dev", "test"))
    e.add_argument("--beam", type=int, default=0,
                   help="beam size; 0 = greedy decoding")
    e.add_argument("--limit", type=int)
    e.add_argument("--seed", type=int, default=0)

    a = sub.add_parser("analyze", help="attention and cluster diagnostics")
    asub = a.add_subparsers(dest="analysis", required=True)

    ak = asub.add_parser("kl", help="attention KL/agreement over sentence pairs")
    ak.add_argument("--ckpt", required=True)
    ak.add_argument("--pairs", required=True, help="TSV: sentenceA TAB sentenceB")
    ak.add_argument("--symmetric", action="store_true")

    ap = asub.add_parser("find-pairs", help="emit code-equal sentence pairs")
    ap.add_argument("--ckpt", required=True)
    ap.add_argument("--data", required=True)
    ap.add_argument("--split", default="test", choices=("train", "dev", "test"))
    ap.add_argument("--max-pairs", type=int, default=200)
    ap.add_argument("--out", required=True)

    ac = asub.add_parser("clusters", help="token-to-code grouping report")
    ac.add_argument("--ckpt", required=True)
    ac.add_argument("--tags", help="TSV token TAB tag for purity")
    ac.add_argument("--data", help="dataset dir; uses its tags.tsv when --tags absent")

    x = sub.add_parser("export", help="export model artifacts")
    xsub = x.add_subparsers(dest="artifact", required=True)
    xe = xsub.add_parser("embeddings", help="TSV of token, code, embedding row")
    xe.add_argument("--ckpt", required=True)
    xe.add_argument("--out", required=True)
    return p


def cmd_gen_data(args):
    if args.task == "addjump":
        train_set, dev, test, grammar = D.gen_addjump(
            args.augment, args.atomic, args.seed, max_train=args.max_train)
        extra = {"task": "addjump", "n_aug": args.augment,
                 "n_atomic": args.atomic, "seed": args.seed}
    else:
        train_set, dev, test, grammar = D.gen_aroundright(args.seed)
        extra = {"task": "aroundright", "seed": args.seed}
    D.write_dataset(args.out, {"train": train_set, "dev": dev, "test": test},
                    grammar, extra)
    meta = json.loads((Path(args.out) / "meta.json").read_text(encoding="utf-8"))
    print(json.dumps(meta))
    return 0


def cmd_train(args):
    overrides = {k: getattr(args, k) for k in (
        "layer_kind", "seed", "total_steps", "batch_size", "lr", "alpha",
        "beta", "lambda_code", "adam_beta1", "d_model")}
    run_cfg = RunConfig.load(args.config, overrides)
    mc, sc, tc = run_cfg.split()
    train_set = D.read_split(args.data, "train")
    dev_set = D.read_split(args.data, "dev")
    src_vocab, tgt_vocab = D.build_vocabs(train_set + dev_set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(asdict(run_cfg), indent=2) + "\n", encoding="utf-8")
    start_step, opt = 0, None
    if args.resume:
        ck = train.load_checkpoint(args.resume)
        model, opt, start_step = ck.model, ck.opt, ck.step
        src_vocab, tgt_vocab = ck.src_vocab, ck.tgt_vocab
    else:
        model = M.SQModel(mc, len(src_vocab), len(tgt_vocab),
                          seed=tc.seed, sovq_cfg=sc)
    best, _ = train.train_run(model, train_set, dev_set, src_vocab, tgt_vocab,
                              tc, out, start_step=start_step, opt=opt, log=print)
    print(f"best dev exact match: {best:.4f}")
    return 0


def cmd_eval(args):
    ck = train.load_checkpoint(args.ckpt)
    examples = D.read_split(args.data, args.split)
    mode = "beam" if args.beam and args.beam > 0 else "greedy"
    acc = train.evaluate_exact_match(
        ck.model, examples, ck.src_vocab, ck.tgt_vocab,
        decode_mode=mode, beam=args.beam or 5, limit=args.limit, seed=args.seed)
    print(f"exact_match\t{acc:.4f}")
    return 0


def cmd_analyze_kl(args):
    ck = train.load_checkpoint(args.ckpt)
    pairs = analysis.read_pairs(args.pairs)
    if not pairs:
        raise ValueError(f"no pairs in {args.pairs}")
    stats = analysis.pair_metrics(ck.model, ck.src_vocab, pairs,
                                  symmetric=args.symmetric)
    kl = float(np.mean([s[0] for s in stats]))
    agree = float(np.mean([s[1] for s in stats]))
    underflow = sum(s[2] for s in stats)
    print(f"pairs\t{len(stats)}")
    print(f"mean_attention_kl\t{kl:.6g}")
    print(f"mean_argmax_agreement\t{agree:.4f}")
    print(f"underflow_rows\t{underflow}")
    return 0


def cmd_analyze_find_pairs(args):
    ck = train.load_checkpoint(args.ckpt)
    examples = D.read_split(args.data, args.split)
    pair_set = analysis.find_code_equal_pairs(
        examples, ck.model, ck.src_vocab, max_pairs=args.max_pairs)
    if not len(pair_set):
        raise ValueError("no code-equal pairs found")
    analysis.write_pairs(args.out, pair_set)
    print(f"pairs\t{len(pair_set)}")
    return 0


def cmd_analyze_clusters(args):
    ck = train.load_checkpoint(args.ckpt)
    tags = None
    if args.tags:
        tags = {}
        for line in Path(args.tags).read_text(encoding="utf-8").splitlines():
            if line:
                tok, tag = line.split("\t")
                tags[tok] = tag
    elif args.data:
        tags = D.read_tags(args.data)
    report = analysis.cluster_report(ck.model, ck.src_vocab, tags=tags)
    print(report.format())
    return 0


def cmd_export_embeddings(args):
    ck = train.load_checkpoint(args.ckpt)
    n = analysis.export_embeddings(ck.model, ck.src_vocab, args.out)
    print(f"rows\t{n}")
    return 0


def dispatch(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "eval": cmd_eval,
        "export": cmd_export_embeddings,
    }
    if args.command == "analyze":
        handler = {"kl": cmd_analyze_kl,
                   "find-pairs": cmd_analyze_find_pairs,
                   "clusters": cmd_analyze_clusters}[args.analysis]
    else:
        handler = handlers[args.command]
    try:
        return handler(args)
    except (ValueError, OSError, KeyError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
