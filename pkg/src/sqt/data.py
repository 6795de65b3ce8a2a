"""Synthetic command-to-action data: grammar, splits, vocab, batching.

Commands follow the classic SCAN phrase grammar over a configurable set
of verb primitives:

    C -> S | S and S | S after S
    S -> V | V twice | V thrice
    V -> P | P left|right | P opposite left|right | P around left|right
    P -> a verb primitive or bare "turn"

with the usual interpretation (turns expand to LTURN/RTURN, "around"
repeats turn+verb four times, "after" swaps clause order). Datasets are
TSV files, one example per line, source TAB target, space-separated
tokens, alongside a meta.json manifest and a tags.tsv with each token's
syntactic class.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, BOS, EOS = 0, 1, 2
SPECIALS = ("<pad>", "<bos>", "<eos>")

BASE_PRIMITIVES = [("walk", "WALK"), ("look", "LOOK"), ("run", "RUN"), ("jump", "JUMP")]

MODIFIER_TAGS = {
    "left": "direction", "right": "direction",
    "twice": "repetition", "thrice": "repetition",
    "around": "preposition", "opposite": "preposition",
    "and": "conjunction", "after": "conjunction",
    "turn": "turn",
}


class ParseError(ValueError):
    def __init__(self, msg, position):
        super().__init__(f"{msg} at position {position}")
        self.position = position


@dataclass
class GrammarSpec:
    primitives: list            # (command token, action token) pairs
    held_out: str               # description of the test composition rule

    @property
    def action_of(self):
        return dict(self.primitives)

    def tags(self):
        out = {name: "verb" for name, _ in self.primitives}
        out.update(MODIFIER_TAGS)
        return out


@dataclass
class Example:
    src: list
    tgt: list


@dataclass
class Vocab:
    tokens: list = field(default_factory=list)  # id -> token, specials first

    @classmethod
    def build(cls, token_iter):
        seen = sorted(set(token_iter))
        return cls(tokens=list(SPECIALS) + seen)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocab")

    def __len__(self):
        return len(self.tokens)

    def encode(self, toks):
        return [self.index[t] for t in toks]

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    @property
    def content_tokens(self):
        return self.tokens[len(SPECIALS):]

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        toks = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(toks[:3]) != SPECIALS:
            raise ValueError(f"vocab file {path} lacks the fixed specials")
        return cls(tokens=toks)


# ------------------------------------------------------------------ grammar

def _interpret_v(toks, i, actions):
    """Parse one V phrase starting at i; returns (action list, next index)."""
    if i >= len(toks):
        raise ParseError("expected a verb phrase", i)
    head = toks[i]
    if head != "turn" and head not in actions:
        raise ParseError(f"unknown primitive {head!r}", i)
    base = [] if head == "turn" else [actions[head]]
    i += 1
    if i < len(toks) and toks[i] in ("opposite", "around"):
        kind = toks[i]
        i += 1
        if i >= len(toks) or toks[i] not in ("left", "right"):
            raise ParseError(f"{kind!r} needs a direction", i)
        turn = "LTURN" if toks[i] == "left" else "RTURN"
        i += 1
        if kind == "opposite":
            return [turn, turn] + base, i
        return ([turn] + base) * 4, i
    if i < len(toks) and toks[i] in ("left", "right"):
        turn = "LTURN" if toks[i] == "left" else "RTURN"
        return [turn] + base, i + 1
    if head == "turn":
        raise ParseError("bare 'turn' needs a direction", i)
    return base, i


def _interpret_s(toks, i, actions):
    acts, i = _interpret_v(toks, i, actions)
    if i < len(toks) and toks[i] in ("twice", "thrice"):
        acts = acts * (2 if toks[i] == "twice" else 3)
        i += 1
    return acts, i


def scan_interpret(command, grammar: GrammarSpec):
    """Deterministic interpretation of a command into its action sequence."""
    toks = list(command.split()) if isinstance(command, str) else list(command)
    actions = grammar.action_of
    first, i = _interpret_s(toks, 0, actions)
    if i < len(toks):
        if toks[i] == "and":
            second, i = _interpret_s(toks, i + 1, actions)
            out = first + second
        elif toks[i] == "after":
            second, i = _interpret_s(toks, i + 1, actions)
            out = second + first
        else:
            raise ParseError(f"unexpected token {toks[i]!r}", i)
    else:
        out = first
    if i != len(toks):
        raise ParseError(f"trailing tokens starting with {toks[i]!r}", i)
    return out


def verb_phrases(primitive):
    yield [primitive]
    for d in ("left", "right"):
        yield [primitive, d]
        yield [primitive, "opposite", d]
        yield [primitive, "around", d]


def turn_phrases():
    for d in ("left", "right"):
        yield ["turn", d]
        yield ["turn", "opposite", d]
        yield ["turn", "around", d]


def enumerate_commands(primitive_names):
    """Every command the grammar generates over the given primitives."""
    vs = [p for name in primitive_names for p in verb_phrases(name)]
    vs += list(turn_phrases())
    ss = [v + m for v in vs for m in ([], ["twice"], ["thrice"])]
    out = list(ss)
    for a in ss:
        for conj in ("and", "after"):
            for b in ss:
                out.append(a + [conj] + b)
    return out


def augmented_primitives(n_aug):
    """walkN/lookN/runN with fresh action tokens, N = 1..n_aug."""
    extra = []
    for i in range(1, n_aug + 1):
        for name, act in BASE_PRIMITIVES[:3]:
            extra.append((f"{name}{i}", f"{act}{i}"))
    return extra


def _examples(commands, grammar):
    return [Example(src=c, tgt=scan_interpret(c, grammar)) for c in commands]


def gen_addjump(n_aug, n_atomic, seed, max_train=200_000, dev_size=1000):
    """Jump-holdout split with augmented primitives.

    Train: every composed command over the non-jump primitives (base
    walk/look/run plus n_aug synthetic copies of each), subsampled to
    max_train, plus n_atomic copies of each primitive's atomic command
    (jump included -- its only training occurrence). Test: every
    composed command containing jump. Dev: held out of train.
    """
    if n_aug < 1 or n_atomic < 1:
        raise ValueError("n_aug and n_atomic must be >= 1")
    prims = BASE_PRIMITIVES + augmented_primitives(n_aug)
    grammar = GrammarSpec(primitives=prims,
                          held_out="composed commands containing 'jump'")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0xADD10])
    non_jump = [name for name, _ in prims if name != "jump"]
    composed = [c for c in enumerate_commands(non_jump) if len(c) >= 2]
    rng.shuffle(composed)
    dev_n = min(dev_size, max(1, len(composed) // 20))
    dev_cmds = composed[:dev_n]
    train_cmds = composed[dev_n:]
    atom_budget = n_atomic * len(prims)
    if len(train_cmds) > max_train - atom_budget:
        train_cmds = train_cmds[:max(0, max_train - atom_budget)]
    atoms = [[name] for name, _ in prims] * n_atomic
    train = _examples(train_cmds, grammar) + _examples(atoms, grammar)
    rng.shuffle(train)
    all_cmds = enumerate_commands([name for name, _ in prims])
    test_cmds = [c for c in all_cmds if "jump" in c and len(c) >= 2]
    return train, _examples(dev_cmds, grammar), _examples(test_cmds, grammar), grammar


def gen_aroundright(seed, dev_size=1000):
    """Hold out every command containing the 'around right' composition."""
    grammar = GrammarSpec(primitives=list(BASE_PRIMITIVES),
                          held_out="commands containing 'around right'")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0xA407])

    def held_out(c):
        return any(c[i] == "around" and c[i + 1] == "right" for i in range(len(c) - 1))

    cmds = enumerate_commands([name for name, _ in BASE_PRIMITIVES])
    keep = [c for c in cmds if not held_out(c)]
    test_cmds = [c for c in cmds if held_out(c)]
    rng.shuffle(keep)
    dev_n = min(dev_size, max(1, len(keep) // 20))
    return (_examples(keep[dev_n:], grammar), _examples(keep[:dev_n], grammar),
            _examples(test_cmds, grammar), grammar)


# ---------------------------------------------------------------------- IO

def write_dataset(out_dir, splits, grammar, manifest_extra):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts = {}
    for name, examples in splits.items():
        lines = [" ".join(ex.src) + "\t" + " ".join(ex.tgt) for ex in examples]
        (out / f"{name}.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        counts[name] = len(examples)
    tags = grammar.tags()
    (out / "tags.tsv").write_text(
        "\n".join(f"{t}\t{tag}" for t, tag in sorted(tags.items())) + "\n",
        encoding="utf-8")
    manifest = dict(manifest_extra)
    manifest["counts"] = counts
    manifest["held_out"] = grammar.held_out
    (out / "meta.json").write_text(json.dumps(manifest, indent=2) + "\n",
                                   encoding="utf-8")


def read_split(data_dir, name):
    path = Path(data_dir) / f"{name}.tsv"
    examples = []
    for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{ln}: expected 'source TAB target'")
        examples.append(Example(src=parts[0].split(), tgt=parts[1].split()))
    return examples


def read_tags(data_dir):
    path = Path(data_dir) / "tags.tsv"
    if not path.exists():
        return None
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line:
            tok, tag = line.split("\t")
            out[tok] = tag
    return out


def build_vocabs(examples):
    src_v = Vocab.build(t for ex in examples for t in ex.src)
    tgt_v = Vocab.build(t for ex in examples for t in ex.tgt)
    return src_v, tgt_v


# ------------------------------------------------------------------ batching

@dataclass
class Batch:
    src: np.ndarray       # [B, ns] ids, EOS-terminated, PAD-padded
    src_live: np.ndarray  # [B, ns] bool
    tgt_in: np.ndarray    # [B, nt] BOS + target
    tgt_out: np.ndarray   # [B, nt] target + EOS
    tgt_live: np.ndarray  # [B, nt] bool

    @property
    def size(self):
        return self.src.shape[0]


def encode_batch(examples, src_vocab, tgt_vocab):
    """Pad and frame a list of examples (EOS on source, BOS/EOS on target)."""
    if not examples:
        raise ValueError("empty batch")
    srcs = [src_vocab.encode(ex.src) + [EOS] for ex in examples]
    tgts = [tgt_vocab.encode(ex.tgt) for ex in examples]
    b = len(examples)
    ns = max(len(s) for s in srcs)
    nt = max(len(t) for t in tgts) + 1
    src = np.full((b, ns), PAD, dtype=np.int64)
    src_live = np.zeros((b, ns), dtype=bool)
    tgt_in = np.full((b, nt), PAD, dtype=np.int64)
    tgt_out = np.full((b, nt), PAD, dtype=np.int64)
    tgt_live = np.zeros((b, nt), dtype=bool)
    for i, (s, t) in enumerate(zip(srcs, tgts)):
        src[i, :len(s)] = s
        src_live[i, :len(s)] = True
        tgt_in[i, :len(t) + 1] = [BOS] + t
        tgt_out[i, :len(t) + 1] = t + [EOS]
        tgt_live[i, :len(t) + 1] = True
    return Batch(src, src_live, tgt_in, tgt_out, tgt_live)


def batch_iter(examples, batch_size, seed, shuffle=True, bucket=False,
               src_vocab=None, tgt_vocab=None):
    """One epoch of padded batches; deterministic order per seed.

    With bucket=True, examples are grouped by target length (padding
    stays small) and the bucketed batch order is shuffled.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(examples)
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0xBA7C4])
    order = rng.permutation(n) if shuffle else np.arange(n)
    if bucket:
        lengths = np.array([len(examples[i].tgt) for i in order])
        order = order[np.argsort(lengths, kind="stable")]
        starts = np.arange(0, n, batch_size)
        starts = starts[rng.permutation(len(starts))] if shuffle else starts
    else:
        starts = np.arange(0, n, batch_size)
    for s in starts:
        chunk = [examples[i] for i in order[s:s + batch_size]]
        yield encode_batch(chunk, src_vocab, tgt_vocab)


def batches_per_epoch(n_examples, batch_size):
    return math.ceil(n_examples / batch_size)


class StepStream:
    """Batch for an absolute step index, derived purely from (seed, step).

    Step s lives in epoch s // batches_per_epoch; each epoch has its own
    shuffled (and optionally bucketed) order. Resuming at any step
    reproduces the unbroken run's batches exactly.
    """

    def __init__(self, examples, batch_size, seed, src_vocab, tgt_vocab, bucket=True):
        self.examples = examples
        self.batch_size = batch_size
        self.seed = int(seed)
        self.src_vocab = src_vocab
        self.tgt_vocab = tgt_vocab
        self.bucket = bucket
        self.per_epoch = batches_per_epoch(len(examples), batch_size)
        self._epoch = None
        self._order = None
        self._starts = None

    def _load_epoch(self, epoch):
        n = len(self.examples)
        rng = np.random.default_rng([self.seed & 0xFFFFFFFF, 0xE90C, epoch])
        order = rng.permutation(n)
        if self.bucket:
            lengths = np.array([len(self.examples[i].tgt) for i in order])
            order = order[np.argsort(lengths, kind="stable")]
            starts = np.arange(0, n, self.batch_size)
            starts = starts[rng.permutation(len(starts))]
        else:
            starts = np.arange(0, n, self.batch_size)
        self._epoch, self._order, self._starts = epoch, order, starts

    def batch(self, step):
        epoch, pos = divmod(step, self.per_epoch)
        if epoch != self._epoch:
            self._load_epoch(epoch)
        s = self._starts[pos]
        chunk = [self.examples[i] for i in self._order[s:s + self.batch_size]]
        return encode_batch(chunk, self.src_vocab, self.tgt_vocab)
