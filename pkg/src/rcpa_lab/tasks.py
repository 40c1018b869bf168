"""Synthetic domain-adaptation scenarios.

Token layout for a vocabulary of size ``V``::

    0            eos
    1            query marker
    2 .. V/2-1   source ("general") content tokens
    V/2 .. V-1   target ("domain") tokens, split into ``answer_len`` slot bands

The pretrained policy is fitted on text from a seeded order-2 Markov source
over the source content tokens. Target items are key -> value recall: the
prompt is ``[query, *key]`` and the answer is produced by a hidden
deterministic target grammar that fills slot ``t`` from band ``t`` as a
function of the preceding ``order`` tokens, so every answer is representable
by an order-``order`` table while being near impossible for the pretrained
policy to sample.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .policy import Policy, Vocabulary, mean_row_kl, sample_suffixes
from .reward import RewardSpec, score_response

EOS = 0
QUERY = 1
SOURCE_SEQ_LEN = 20
SOURCE_CONCENTRATION = 0.5
ANSWER_PROB_BOUND = 1e-3
MAX_KEY_ATTEMPTS = 200

# independent sub-streams of a scenario seed
_STREAM_GENERATOR = 0
_STREAM_SOURCE = 1
_STREAM_HELD_OUT = 2
_STREAM_TARGET = 3


@dataclass(frozen=True)
class ScenarioConfig:
    vocab_size: int = 32
    policy_order: int = 2
    source_corpus_size: int = 2000
    target_train_size: int = 256
    target_test_size: int = 64
    answer_len: int = 6
    key_len: int = 2
    seed: int = 0
    entity_fraction: float = 0.25

    def __post_init__(self):
        for name in ("vocab_size", "source_corpus_size", "target_train_size", "target_test_size",
                     "answer_len", "key_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.policy_order < 1:
            raise ValueError("policy_order must be >= 1 for key-conditioned answers")
        if not 0.0 <= self.entity_fraction <= 1.0:
            raise ValueError("entity_fraction must lie in [0, 1]")
        if self.vocab_size % 2 or self.vocab_size < 8:
            raise ValueError("vocab_size must be even and >= 8")
        if self.vocab_size // 2 < self.answer_len:
            raise ValueError("the target half needs at least one token per answer slot")

    @property
    def source_tokens(self) -> range:
        return range(2, self.vocab_size // 2)

    @property
    def target_tokens(self) -> range:
        return range(self.vocab_size // 2, self.vocab_size)

    def slot_bands(self) -> list[np.ndarray]:
        return [np.asarray(b, dtype=np.int64) for b in np.array_split(np.asarray(self.target_tokens), self.answer_len)]


@dataclass(frozen=True)
class Dataset:
    items: tuple[tuple[tuple[int, ...], tuple[int, ...]], ...]
    split: str

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError("split must be 'train' or 'test'")
        for _, y in self.items:
            if not y:
                raise ValueError("answers must be non-empty")

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def to_jsonl(self, path: str | Path) -> None:
        lines = [json.dumps({"prompt": list(x), "answer": list(y)}) for x, y in self.items]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))

    @classmethod
    def from_jsonl(cls, path: str | Path, split: str = "train") -> "Dataset":
        items = []
        for line in Path(path).read_text().splitlines():
            if line.strip():
                obj = json.loads(line)
                items.append((tuple(obj["prompt"]), tuple(obj["answer"])))
        return cls(tuple(items), split)


def scenario_vocab(cfg: ScenarioConfig) -> Vocabulary:
    f = cfg.entity_fraction
    mask = tuple(math.floor((i + 1) * f) > math.floor(i * f) for i in range(cfg.vocab_size))
    return Vocabulary(cfg.vocab_size, EOS, mask)


def _rng(cfg: ScenarioConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, stream])


def source_generator(cfg: ScenarioConfig) -> dict[tuple[int, int], np.ndarray]:
    """Order-2 transition table ``(prev2, prev1) -> probabilities over source tokens``.

    ``-1`` stands for the start-of-sequence padding.
    """
    rng = _rng(cfg, _STREAM_GENERATOR)
    states = [-1, *cfg.source_tokens]
    n = len(cfg.source_tokens)
    table = {}
    for a in states:
        for b in states:
            if a != -1 and b == -1:
                continue
            table[(a, b)] = rng.dirichlet(np.full(n, SOURCE_CONCENTRATION))
    return table


def _draw_source(cfg: ScenarioConfig, n_seq: int, rng: np.random.Generator) -> list[list[int]]:
    cdf = {ctx: np.cumsum(p) for ctx, p in source_generator(cfg).items()}
    tokens = [int(t) for t in cfg.source_tokens]
    last = len(tokens) - 1
    out = []
    for _ in range(n_seq):
        a, b = -1, -1
        seq = []
        for u in rng.random(SOURCE_SEQ_LEN).tolist():
            idx = min(int(np.searchsorted(cdf[(a, b)], u, side="right")), last)
            tok = tokens[idx]
            seq.append(tok)
            a, b = b, tok
        out.append(seq)
    return out


def gen_source_corpus(cfg: ScenarioConfig) -> list[list[int]]:
    return _draw_source(cfg, cfg.source_corpus_size, _rng(cfg, _STREAM_SOURCE))


def gen_held_out_source(cfg: ScenarioConfig, n_seq: int = 200) -> list[list[int]]:
    return _draw_source(cfg, n_seq, _rng(cfg, _STREAM_HELD_OUT))


class _TargetGrammar:
    """Lazily drawn deterministic map from a context tuple to the next answer token."""

    def __init__(self, cfg: ScenarioConfig, rng: np.random.Generator):
        self.order = cfg.policy_order
        self.bands = cfg.slot_bands()
        self.rng = rng
        self.table: dict[tuple[int, ...], int] = {}

    def answer(self, prompt: Sequence[int]) -> tuple[int, ...]:
        seq = list(prompt)
        out = []
        for band in self.bands:
            ctx = (len(out), tuple(seq[-self.order:]))
            if ctx not in self.table:
                self.table[ctx] = int(band[self.rng.integers(band.size)])
            tok = self.table[ctx]
            out.append(tok)
            seq.append(tok)
        return tuple(out)


def answer_probability(pre: Policy, prompt: Sequence[int], answer: Sequence[int]) -> float:
    cids = pre.context_ids_along(prompt, answer)
    return float(np.exp(kernels.token_logps(pre.logits, cids, np.asarray(answer, dtype=np.int64)).sum()))


def gen_target_dataset(cfg: ScenarioConfig, pre: Policy) -> tuple[Dataset, Dataset]:
    """Train/test recall items with disjoint keys and low pretrained answer probability.

    Raises ``RuntimeError`` when the probability bound cannot be met within the
    retry budget.
    """
    rng = _rng(cfg, _STREAM_TARGET)
    grammar = _TargetGrammar(cfg, rng)
    content = np.asarray([*cfg.source_tokens, *cfg.target_tokens])
    last_pool = np.asarray(cfg.source_tokens)
    n_keys = len(content) ** (cfg.key_len - 1) * len(last_pool)
    needed = cfg.target_train_size + cfg.target_test_size
    if n_keys < needed:
        raise RuntimeError(f"only {n_keys} distinct keys exist for {needed} items; raise vocab_size or key_len")

    seen: set[tuple[int, ...]] = set()
    items = []
    rejected = 0
    while len(items) < needed:
        if rejected > MAX_KEY_ATTEMPTS * needed:
            raise RuntimeError(
                f"could not find {needed} items with pretrained answer probability < {ANSWER_PROB_BOUND}; "
                f"accepted {len(items)}, rejected {rejected}"
            )
        key = tuple(int(t) for t in rng.choice(content, cfg.key_len - 1)) + (int(rng.choice(last_pool)),)
        if key in seen:
            rejected += 1
            continue
        seen.add(key)
        prompt = (QUERY, *key)
        answer = grammar.answer(prompt)
        if answer_probability(pre, prompt, answer) >= ANSWER_PROB_BOUND:
            rejected += 1
            continue
        items.append((prompt, answer))
    train = Dataset(tuple(items[: cfg.target_train_size]), "train")
    test = Dataset(tuple(items[cfg.target_train_size:]), "test")
    return train, test


def eval_target(theta: Policy, data: Dataset, spec: RewardSpec, delta: float, samples_per_item: int,
                rng: np.random.Generator, max_len: int | None = None) -> tuple[float, float]:
    """Mean similarity and reward of free generations (no prefix) against the answers."""
    if samples_per_item < 1:
        raise ValueError("samples_per_item must be >= 1")
    if len(data) == 0:
        return 0.0, 0.0
    eos = theta.vocab.eos
    sims, rewards = [], []
    for x, y in data:
        cap = max_len if max_len is not None else len(y) + 2
        suffixes, _ = sample_suffixes(theta, x, cap, samples_per_item, rng)
        for suf in suffixes:
            o = suf[:-1] if suf and suf[-1] == eos else suf
            s, r = score_response(o, y, spec, delta, theta.vocab)
            sims.append(s)
            rewards.append(r)
    return float(np.mean(sims)), float(np.mean(rewards))


def eval_retention(theta: Policy, pre: Policy, held_out_source: Sequence[Sequence[int]]) -> tuple[float, float]:
    """``(mean per-token loglik under theta - under pre, mean exact KL(theta || pre))`` on source text."""
    if not held_out_source:
        raise ValueError("held-out source corpus is empty")
    cids = np.concatenate([theta.context_ids_along((), s) for s in held_out_source])
    toks = np.concatenate([np.asarray(s, dtype=np.int64) for s in held_out_source])
    diff = kernels.token_logps(theta.logits, cids, toks) - kernels.token_logps(pre.logits, cids, toks)
    return float(diff.mean()), mean_row_kl(theta, pre, cids)
