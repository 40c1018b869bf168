import math
from collections import Counter
from functools import lru_cache

import numpy as np
import pytest

from rcpa_lab.policy import Policy, mle_fit, new_uniform
from rcpa_lab.reward import RewardSpec
from rcpa_lab.tasks import (
    ANSWER_PROB_BOUND,
    EOS,
    QUERY,
    Dataset,
    ScenarioConfig,
    answer_probability,
    eval_retention,
    eval_target,
    gen_held_out_source,
    gen_source_corpus,
    gen_target_dataset,
    scenario_vocab,
    source_generator,
)

CFG = ScenarioConfig()


@lru_cache(maxsize=None)
def default_world():
    vocab = scenario_vocab(CFG)
    pre = mle_fit(gen_source_corpus(CFG), vocab, CFG.policy_order)
    train, test = gen_target_dataset(CFG, pre)
    return vocab, pre, train, test


def test_config_validation():
    for bad in (dict(vocab_size=7), dict(vocab_size=6), dict(answer_len=0), dict(entity_fraction=1.5),
                dict(policy_order=0), dict(vocab_size=8, answer_len=5)):
        with pytest.raises(ValueError):
            ScenarioConfig(**bad)


def test_vocab_layout_and_entities():
    vocab = scenario_vocab(CFG)
    assert vocab.size == 32 and vocab.eos == EOS
    assert [i for i in range(32) if vocab.is_entity(i)] == [3, 7, 11, 15, 19, 23, 27, 31]
    assert list(CFG.source_tokens) == list(range(2, 16))
    assert list(CFG.target_tokens) == list(range(16, 32))
    bands = CFG.slot_bands()
    assert len(bands) == CFG.answer_len
    assert sorted(np.concatenate(bands).tolist()) == list(CFG.target_tokens)


def test_generators_are_deterministic():
    assert gen_source_corpus(CFG) == gen_source_corpus(ScenarioConfig())
    assert gen_held_out_source(CFG, 20) == gen_held_out_source(ScenarioConfig(), 20)
    assert gen_source_corpus(CFG) != gen_source_corpus(ScenarioConfig(seed=1))
    _, pre, train, test = default_world()
    train2, test2 = gen_target_dataset(CFG, pre)
    assert (train, test) == (train2, test2)


def test_source_corpus_shape():
    corpus = gen_source_corpus(CFG)
    assert len(corpus) == CFG.source_corpus_size
    assert all(len(s) == 20 for s in corpus)
    assert {t for s in corpus for t in s} <= set(CFG.source_tokens)


def test_source_transitions_within_three_sigma():
    table = source_generator(CFG)
    corpus = gen_source_corpus(CFG)
    n = len(corpus)
    first = Counter(s[0] for s in corpus)
    probs = table[(-1, -1)]
    for i, tok in enumerate(CFG.source_tokens):
        sd = math.sqrt(n * probs[i] * (1 - probs[i]))
        assert abs(first[tok] - n * probs[i]) <= 3 * sd + 1e-9
    # the most frequent order-2 context, pooled across positions
    ctx_counts = Counter((s[i - 2], s[i - 1]) for s in corpus for i in range(2, len(s)))
    (a, b), m = ctx_counts.most_common(1)[0]
    nxt = Counter(s[i] for s in corpus for i in range(2, len(s)) if (s[i - 2], s[i - 1]) == (a, b))
    for i, tok in enumerate(CFG.source_tokens):
        p = table[(a, b)][i]
        assert abs(nxt[tok] - m * p) <= 3 * math.sqrt(m * p * (1 - p)) + 1e-9


def test_target_items_meet_the_probability_bound():
    vocab, pre, train, test = default_world()
    assert len(train) == 256 and len(test) == 64
    for x, y in (*train, *test):
        assert x[0] == QUERY and len(x) == 1 + CFG.key_len
        assert len(y) == CFG.answer_len
        assert set(y) <= set(CFG.target_tokens)
        # exact product oracle, recomputed row by row
        ctx, prob = list(x), 1.0
        for tok in y:
            prob *= pre.probs(ctx)[tok]
            ctx.append(tok)
        assert prob < ANSWER_PROB_BOUND
        assert answer_probability(pre, x, y) == pytest.approx(prob, rel=1e-9)


def test_train_test_keys_disjoint():
    _, _, train, test = default_world()
    train_keys = {x for x, _ in train}
    assert len(train_keys) == len(train)
    assert train_keys.isdisjoint({x for x, _ in test})


def test_answers_are_consistent_under_the_policy_order():
    # one next token per (slot, context): an order-2 table can represent every answer
    _, _, train, test = default_world()
    seen = {}
    for x, y in (*train, *test):
        seq = list(x)
        for t, tok in enumerate(y):
            key = tuple(seq[-2:])
            if key in seen:
                assert seen[key] == tok
            seen[key] = tok
            seq.append(tok)


def test_exact_match_sparsity_under_pretrained_policy():
    _, pre, train, _ = default_world()
    expected = np.mean([8 * answer_probability(pre, x, y) for x, y in train])
    assert expected < 8e-3


def test_unreachable_bound_raises():
    cfg = ScenarioConfig(vocab_size=8, answer_len=1, target_train_size=2, target_test_size=1,
                         source_corpus_size=5)
    pre = mle_fit(gen_source_corpus(cfg), scenario_vocab(cfg), cfg.policy_order)
    with pytest.raises(RuntimeError, match="probability"):
        gen_target_dataset(cfg, pre)
    with pytest.raises(RuntimeError, match="distinct keys"):
        gen_target_dataset(ScenarioConfig(vocab_size=8, answer_len=2, target_train_size=50, source_corpus_size=5), pre)


def test_jsonl_round_trip(tmp_path):
    _, _, train, _ = default_world()
    path = tmp_path / "train.jsonl"
    train.to_jsonl(path)
    assert Dataset.from_jsonl(path, "train") == train
    first = path.read_text().splitlines()[0]
    assert first.startswith('{"prompt": [')


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(((((1,), ())),), "train")
    with pytest.raises(ValueError):
        Dataset((), "dev")


def _verbatim_policy(vocab, data, order):
    logits = np.full(((vocab.size + 1) ** order, vocab.size), -50.0)
    proto = new_uniform(vocab, order)
    for x, y in data:
        target = tuple(y) + (vocab.eos,)
        for cid, tok in zip(proto.context_ids_along(x, target), target):
            logits[cid, tok] = 50.0
    return Policy(vocab, order, logits)


def test_eval_target_examples():
    vocab, pre, train, _ = default_world()
    spec = RewardSpec()
    exact = _verbatim_policy(vocab, train, CFG.policy_order)
    sim, rew = eval_target(exact, train, spec, 0.8, 2, np.random.default_rng(0))
    assert (sim, rew) == (1.0, 1.0)
    sim, rew = eval_target(new_uniform(vocab, CFG.policy_order), train, spec, 0.8, 2, np.random.default_rng(0))
    assert rew <= -0.99
    with pytest.raises(ValueError):
        eval_target(pre, train, spec, 0.8, 0, np.random.default_rng(0))


def test_eval_retention_examples():
    vocab, pre, _, _ = default_world()
    held = gen_held_out_source(CFG, 50)
    assert eval_retention(pre, pre, held) == (0.0, 0.0)
    dll, kl = eval_retention(new_uniform(vocab, CFG.policy_order), pre, held)
    assert dll < 0 and kl > 0
    with pytest.raises(ValueError):
        eval_retention(pre, pre, [])
