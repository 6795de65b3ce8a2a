"""Grammar, split, and batching tests with an independent interpreter oracle."""

import numpy as np
import pytest

import sqt.data as D


def oracle_interpret(cmd, actions):
    """Independent rule-rewriting interpreter (top-down on conjunctions)."""
    toks = cmd if isinstance(cmd, list) else cmd.split()
    for i, t in enumerate(toks):
        if t == "and":
            return oracle_interpret(toks[:i], actions) + oracle_interpret(toks[i + 1:], actions)
        if t == "after":
            return oracle_interpret(toks[i + 1:], actions) + oracle_interpret(toks[:i], actions)
    if toks[-1] == "twice":
        return oracle_interpret(toks[:-1], actions) * 2
    if toks[-1] == "thrice":
        return oracle_interpret(toks[:-1], actions) * 3
    turn = {"left": ["LTURN"], "right": ["RTURN"]}
    if len(toks) >= 2 and toks[-1] in turn:
        head = [] if toks[0] == "turn" else [actions[toks[0]]]
        if len(toks) == 3 and toks[1] == "opposite":
            return turn[toks[-1]] * 2 + head
        if len(toks) == 3 and toks[1] == "around":
            return (turn[toks[-1]] + head) * 4
        return turn[toks[-1]] + head
    return [actions[toks[0]]]


GRAMMAR = D.GrammarSpec(primitives=list(D.BASE_PRIMITIVES), held_out="")


def test_interpret_atomic():
    assert D.scan_interpret("jump", GRAMMAR) == ["JUMP"]


def test_interpret_twice():
    assert D.scan_interpret("walk twice", GRAMMAR) == ["WALK", "WALK"]


def test_interpret_around():
    assert D.scan_interpret("walk around left", GRAMMAR) == \
        ["LTURN", "WALK"] * 4


def test_interpret_composites():
    assert D.scan_interpret("turn opposite right", GRAMMAR) == ["RTURN", "RTURN"]
    assert D.scan_interpret("look after run twice", GRAMMAR) == \
        ["RUN", "RUN", "LOOK"]
    assert D.scan_interpret("jump left and walk", GRAMMAR) == \
        ["LTURN", "JUMP", "WALK"]


def test_interpret_error_carries_position():
    with pytest.raises(D.ParseError) as e:
        D.scan_interpret("walk blorp left", GRAMMAR)
    assert e.value.position == 1
    with pytest.raises(D.ParseError):
        D.scan_interpret("turn", GRAMMAR)
    with pytest.raises(D.ParseError):
        D.scan_interpret("walk walk", GRAMMAR)


def test_interpret_agrees_with_oracle():
    cmds = D.enumerate_commands([n for n, _ in D.BASE_PRIMITIVES])
    actions = GRAMMAR.action_of
    # every single-clause command, plus a seeded sample of conjunctions
    rng = np.random.default_rng(17)
    sample = [c for c in cmds if "and" not in c and "after" not in c]
    sample += [cmds[i] for i in rng.choice(len(cmds), size=4000, replace=False)]
    for cmd in sample:
        assert D.scan_interpret(cmd, GRAMMAR) == oracle_interpret(cmd, actions), cmd


def test_command_space_size_matches_grammar_count():
    # |V| = 7P + 6, |S| = 3|V|, |C| = |S| + 2|S|^2
    cmds = D.enumerate_commands([n for n, _ in D.BASE_PRIMITIVES])
    s = 3 * (7 * 4 + 6)
    assert len(cmds) == s + 2 * s * s
    assert len(set(tuple(c) for c in cmds)) == len(cmds)


def test_roundtrip_tokenization():
    cmds = D.enumerate_commands(["walk", "look"])
    for cmd in cmds[:200]:
        assert " ".join(cmd).split() == cmd


# ------------------------------------------------------------------ addjump

@pytest.fixture(scope="module")
def addjump():
    return D.gen_addjump(n_aug=2, n_atomic=5, seed=13, max_train=30_000, dev_size=200)


def test_addjump_test_contains_only_composed_jump(addjump):
    _, _, test, _ = addjump
    for ex in test:
        assert "jump" in ex.src
        assert len(ex.src) >= 2


def test_addjump_train_has_atomic_jump_only(addjump):
    train, _, _, _ = addjump
    jump_examples = [ex for ex in train if "jump" in ex.src]
    assert len(jump_examples) == 5  # n_atomic copies
    assert all(ex.src == ["jump"] and ex.tgt == ["JUMP"] for ex in jump_examples)


def test_addjump_atomics_repeated(addjump):
    train, _, _, _ = addjump
    assert sum(1 for ex in train if ex.src == ["walk1"]) == 5
    assert sum(1 for ex in train if ex.src == ["walk"]) == 5


def test_addjump_splits_disjoint(addjump):
    train, dev, test, _ = addjump
    tr = {tuple(ex.src) for ex in train}
    dv = {tuple(ex.src) for ex in dev}
    te = {tuple(ex.src) for ex in test}
    assert not (tr & te) and not (dv & te) and not (tr & dv)


def test_addjump_targets_match_oracle(addjump):
    train, dev, test, grammar = addjump
    actions = grammar.action_of
    rng = np.random.default_rng(0)
    pool = train + dev + test
    for i in rng.choice(len(pool), size=500, replace=False):
        ex = pool[i]
        assert ex.tgt == oracle_interpret(ex.src, actions)


def test_addjump_augmentation_counting_oracle():
    _, _, _, grammar = D.gen_addjump(n_aug=20, n_atomic=1, seed=0,
                                     max_train=1000, dev_size=10)
    verbs = [name for name, _ in grammar.primitives]
    assert len(verbs) == 3 + 1 + 20 * 3
    assert len(set(verbs)) == len(verbs)


# -------------------------------------------------------------- aroundright

@pytest.fixture(scope="module")
def aroundright():
    return D.gen_aroundright(seed=3)


def test_aroundright_bigram_held_out(aroundright):
    train, dev, test, _ = aroundright
    def has_ar(src):
        return any(src[i] == "around" and src[i + 1] == "right"
                   for i in range(len(src) - 1))
    assert not any(has_ar(ex.src) for ex in train + dev)
    assert all(has_ar(ex.src) for ex in test)


def test_aroundright_keeps_related_compositions(aroundright):
    train, _, _, _ = aroundright
    joined = [" ".join(ex.src) for ex in train]
    assert any("around left" in s for s in joined)
    assert any("opposite right" in s for s in joined)


def test_aroundright_targets_verified_by_oracle(aroundright):
    _, _, test, grammar = aroundright
    actions = grammar.action_of
    for ex in test[:300]:
        assert ex.tgt == oracle_interpret(ex.src, actions)


# ---------------------------------------------------------------- batching

def small_vocabs():
    examples = [D.Example(src=["walk", "twice"], tgt=["WALK", "WALK"]),
                D.Example(src=["jump"], tgt=["JUMP"])]
    return D.build_vocabs(examples), examples


def test_batch_of_one_mask_all_true():
    (sv, tv), examples = small_vocabs()
    batch = D.encode_batch([examples[0]], sv, tv)
    assert batch.src_live.all() and batch.tgt_live.all()
    assert batch.src[0, -1] == D.EOS
    assert batch.tgt_in[0, 0] == D.BOS
    assert batch.tgt_out[0, -1] == D.EOS


def test_batch_pads_to_longest():
    (sv, tv), examples = small_vocabs()
    batch = D.encode_batch(examples, sv, tv)
    # src lengths 3 (walk twice EOS) and 2 (jump EOS): one pad on row 1
    assert batch.src.shape == (2, 3)
    assert batch.src_live[1].sum() == 2
    assert (batch.src[1, 2:] == D.PAD).all()
    assert batch.tgt_live[1].sum() == 2  # JUMP + EOS slot


def test_epoch_covers_every_example_once():
    (sv, tv), _ = small_vocabs()
    examples = [D.Example(src=["walk"], tgt=["WALK"]) for _ in range(7)]
    for i, ex in enumerate(examples):
        ex.tgt = ["WALK"] * (i % 3 + 1)
    seen = []
    for batch in D.batch_iter(examples, 3, seed=5, shuffle=True, bucket=True,
                              src_vocab=sv, tgt_vocab=tv):
        for row in range(batch.size):
            seen.append(int(batch.tgt_live[row].sum()))
    assert len(seen) == 7
    assert sorted(seen) == sorted(len(ex.tgt) + 1 for ex in examples)


def test_batch_iter_deterministic_per_seed():
    (sv, tv), _ = small_vocabs()
    examples = [D.Example(src=["walk"], tgt=["WALK"] * (i % 4 + 1))
                for i in range(20)]
    def orders(seed):
        return [b.tgt_in.shape[1] for b in
                D.batch_iter(examples, 4, seed=seed, src_vocab=sv, tgt_vocab=tv)]
    assert orders(1) == orders(1)
    assert orders(1) != orders(2) or orders(1) != orders(3)


def test_step_stream_is_pure_function_of_step():
    (sv, tv), _ = small_vocabs()
    examples = [D.Example(src=["walk"], tgt=["WALK"] * (i % 4 + 1))
                for i in range(10)]
    a = D.StepStream(examples, 3, 7, sv, tv)
    b = D.StepStream(examples, 3, 7, sv, tv)
    for step in (0, 5, 11, 3, 17):  # out of order on purpose
        x = a.batch(step)
        y = b.batch(step)
        assert np.array_equal(x.src, y.src)
        assert np.array_equal(x.tgt_in, y.tgt_in)


def test_vocab_roundtrip(tmp_path):
    (sv, _), _ = small_vocabs()
    sv.save(tmp_path / "v.txt")
    loaded = D.Vocab.load(tmp_path / "v.txt")
    assert loaded.tokens == sv.tokens


def test_dataset_files_roundtrip(tmp_path):
    train, dev, test, grammar = D.gen_addjump(1, 2, seed=1, max_train=500,
                                              dev_size=20)
    D.write_dataset(tmp_path, {"train": train, "dev": dev, "test": test},
                    grammar, {"task": "addjump", "n_aug": 1, "n_atomic": 2, "seed": 1})
    back = D.read_split(tmp_path, "train")
    assert len(back) == len(train)
    assert back[0].src == train[0].src and back[0].tgt == train[0].tgt
    tags = D.read_tags(tmp_path)
    assert tags["walk"] == "verb" and tags["and"] == "conjunction"
    import json
    meta = json.loads((tmp_path / "meta.json").read_text())
    assert meta["counts"]["train"] == len(train)
