"""Order-m tabular softmax policies over a small token vocabulary.

A policy is a logit table with one row per context of ``order`` previous
tokens. Contexts shorter than ``order`` are left-padded with a reserved BOS id
equal to ``vocab.size`` (never sampled), so the table has ``(size + 1) ** order``
rows and every prefix has a well-defined next-token distribution.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels


@dataclass(frozen=True)
class Vocabulary:
    size: int
    eos: int
    entity_mask: tuple[bool, ...] = field(default=())

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"vocabulary size must be >= 2, got {self.size}")
        if not 0 <= self.eos < self.size:
            raise ValueError(f"eos id {self.eos} outside vocabulary of size {self.size}")
        if not self.entity_mask:
            object.__setattr__(self, "entity_mask", (False,) * self.size)
        else:
            object.__setattr__(self, "entity_mask", tuple(bool(b) for b in self.entity_mask))
        if len(self.entity_mask) != self.size:
            raise ValueError("entity_mask length must equal vocabulary size")

    @property
    def bos(self) -> int:
        return self.size

    def is_entity(self, token: int) -> bool:
        return self.entity_mask[token]


class ParamGradient:
    """Row-sparse gradient over a policy's logit table.

    Stored as ``{context_id: row vector}``; only rows that received a
    contribution are present.
    """

    __slots__ = ("rows", "width")

    def __init__(self, width: int, rows: dict[int, np.ndarray] | None = None):
        self.width = width
        self.rows: dict[int, np.ndarray] = rows if rows is not None else {}

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "ParamGradient":
        touched = np.flatnonzero(np.any(dense != 0.0, axis=1))
        return cls(dense.shape[1], {int(r): dense[r].copy() for r in touched})

    def to_dense(self, n_rows: int) -> np.ndarray:
        out = np.zeros((n_rows, self.width))
        for r, v in self.rows.items():
            out[r] += v
        return out

    def __getitem__(self, key: tuple[int, int]) -> float:
        row, tok = key
        vec = self.rows.get(row)
        return 0.0 if vec is None else float(vec[tok])

    def items(self):
        for r, vec in self.rows.items():
            for t in np.flatnonzero(vec):
                yield (r, int(t)), float(vec[t])

    def __add__(self, other: "ParamGradient") -> "ParamGradient":
        if other.width != self.width:
            raise ValueError("gradient widths differ")
        rows = {r: v.copy() for r, v in self.rows.items()}
        for r, v in other.rows.items():
            if r in rows:
                rows[r] += v
            else:
                rows[r] = v.copy()
        return ParamGradient(self.width, rows)

    def __mul__(self, scale: float) -> "ParamGradient":
        return ParamGradient(self.width, {r: v * scale for r, v in self.rows.items()})

    __rmul__ = __mul__

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.rows.values())

    def max_abs(self) -> float:
        return max((float(np.abs(v).max()) for v in self.rows.values()), default=0.0)


class Policy:
    """Context-conditioned logit table; treat as immutable outside :func:`ascend`."""

    __slots__ = ("vocab", "order", "logits", "_base", "_n_ctx")

    def __init__(self, vocab: Vocabulary, order: int, logits: np.ndarray):
        if order < 0:
            raise ValueError("order must be non-negative")
        base = vocab.size + 1
        n_ctx = base**order
        logits = np.ascontiguousarray(logits, dtype=np.float64)
        if logits.shape != (n_ctx, vocab.size):
            raise ValueError(f"logit table must have shape {(n_ctx, vocab.size)}, got {logits.shape}")
        self.vocab = vocab
        self.order = order
        self.logits = logits
        self._base = base
        self._n_ctx = n_ctx

    @property
    def n_contexts(self) -> int:
        return self._n_ctx

    @property
    def n_params(self) -> int:
        return self.logits.size

    def context_id(self, context: Sequence[int]) -> int:
        """Encode the last ``order`` tokens of ``context`` (BOS-padded) as a row index."""
        m = self.order
        if m == 0:
            return 0
        tail = list(context[-m:])
        tail = [self.vocab.bos] * (m - len(tail)) + tail
        cid = 0
        for tok in tail:
            cid = cid * self._base + tok
        return cid

    def context_ids_along(self, prompt: Sequence[int], tokens: Sequence[int]) -> np.ndarray:
        """Row indices used to predict each of ``tokens`` following ``prompt``."""
        cid = self.context_id(prompt)
        out = np.empty(len(tokens), dtype=np.int64)
        for i, tok in enumerate(tokens):
            out[i] = cid
            cid = (cid * self._base + tok) % self._n_ctx
        return out

    def decode_context(self, cid: int) -> tuple[int, ...]:
        digits = []
        for _ in range(self.order):
            cid, d = divmod(cid, self._base)
            digits.append(d)
        return tuple(reversed(digits))

    def probs(self, context: Sequence[int]) -> np.ndarray:
        row = self.logits[self.context_id(context)]
        ex = np.exp(row - row.max())
        return ex / ex.sum()

    def row_probs(self, cids: np.ndarray) -> np.ndarray:
        rows = self.logits[cids]
        ex = np.exp(rows - rows.max(axis=1, keepdims=True))
        return ex / ex.sum(axis=1, keepdims=True)

    def copy(self) -> "Policy":
        return Policy(self.vocab, self.order, self.logits.copy())

    def same_shape(self, other: "Policy") -> bool:
        return self.vocab == other.vocab and self.order == other.order

    def __eq__(self, other):
        if not isinstance(other, Policy):
            return NotImplemented
        return self.same_shape(other) and np.array_equal(self.logits, other.logits)

    __hash__ = None

    # serialisation -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "order": self.order,
            "vocab_size": self.vocab.size,
            "eos": self.vocab.eos,
            "entity_mask": [int(b) for b in self.vocab.entity_mask],
            "logits": self.logits.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Policy":
        vocab = Vocabulary(int(data["vocab_size"]), int(data["eos"]), tuple(bool(b) for b in data["entity_mask"]))
        order = int(data["order"])
        flat = np.asarray(data["logits"], dtype=np.float64)
        return cls(vocab, order, flat.reshape((vocab.size + 1) ** order, vocab.size))

    def save(self, path: str | Path) -> None:
        # float repr is the shortest string that round-trips, so this is bit-exact
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "Policy":
        return cls.from_dict(json.loads(Path(path).read_text()))


def new_uniform(vocab: Vocabulary, order: int) -> Policy:
    if order < 0:
        raise ValueError("order must be non-negative")
    return Policy(vocab, order, np.zeros(((vocab.size + 1) ** order, vocab.size)))


def log_prob(policy: Policy, context: Sequence[int], token: int) -> float:
    if not 0 <= token < policy.vocab.size:
        raise ValueError(f"token {token} outside vocabulary")
    row = policy.logits[policy.context_id(context)]
    m = row.max()
    return float(row[token] - m - math.log(np.exp(row - m).sum()))


def sequence_log_probs(policy: Policy, prompt: Sequence[int], tokens: Sequence[int]) -> np.ndarray:
    """Per-token log-probabilities of ``tokens`` generated after ``prompt``."""
    cids = policy.context_ids_along(prompt, tokens)
    return kernels.token_logps(policy.logits, cids, np.asarray(tokens, dtype=np.int64))


def sample_suffix(policy: Policy, context: Sequence[int], max_len: int, rng: np.random.Generator):
    """Sample until eos or ``max_len`` tokens; returns ``(tokens, behavior_logps)``.

    Always consumes exactly ``max_len`` uniforms from ``rng`` so downstream
    draws do not depend on where the sequence stopped.
    """
    tokens, logps = sample_suffixes(policy, context, max_len, 1, rng)
    return tokens[0], logps[0]


def sample_suffixes(policy: Policy, context: Sequence[int], max_len: int, n: int, rng: np.random.Generator):
    """Draw ``n`` independent suffixes from the same context."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    uniforms = rng.random((n, max_len))
    start = np.full(n, policy.context_id(context), dtype=np.int64)
    toks, lps, _, lengths = kernels.sample_batch(policy.logits, policy.order, start, uniforms, policy.vocab.eos)
    out_t, out_l = [], []
    for i in range(n):
        ln = int(lengths[i])
        out_t.append(toks[i, :ln].tolist())
        out_l.append(lps[i, :ln].copy())
    return out_t, out_l


def grad_log_prob(policy: Policy, context: Sequence[int], token: int) -> ParamGradient:
    cid = policy.context_id(context)
    row = -policy.probs(context)
    row[token] += 1.0
    return ParamGradient(policy.vocab.size, {cid: row})


def _row_kl(p_logits: np.ndarray, q_logits: np.ndarray) -> np.ndarray:
    lp = p_logits - p_logits.max(axis=-1, keepdims=True)
    lp = lp - np.log(np.exp(lp).sum(axis=-1, keepdims=True))
    lq = q_logits - q_logits.max(axis=-1, keepdims=True)
    lq = lq - np.log(np.exp(lq).sum(axis=-1, keepdims=True))
    return (np.exp(lp) * (lp - lq)).sum(axis=-1)


def exact_next_kl(p: Policy, q: Policy, context: Sequence[int]) -> float:
    if not p.same_shape(q):
        raise ValueError("policies must share vocabulary and order")
    cid = p.context_id(context)
    if np.array_equal(p.logits[cid], q.logits[cid]):
        return 0.0
    return float(_row_kl(p.logits[cid], q.logits[cid]))


def mean_row_kl(p: Policy, q: Policy, cids: Iterable[int]) -> float:
    """Mean exact next-token KL(p || q) over the given context rows."""
    cids = np.unique(np.fromiter(cids, dtype=np.int64))
    if cids.size == 0:
        return 0.0
    kl = _row_kl(p.logits[cids], q.logits[cids])
    same = np.all(p.logits[cids] == q.logits[cids], axis=1)
    kl[same] = 0.0
    return float(kl.mean())


def row_kl_grad(p: Policy, q: Policy, cids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """KL(p||q) per row and its gradient w.r.t. the rows of ``p``'s logits."""
    lp = p.logits[cids] - p.logits[cids].max(axis=1, keepdims=True)
    lp = lp - np.log(np.exp(lp).sum(axis=1, keepdims=True))
    lq = q.logits[cids] - q.logits[cids].max(axis=1, keepdims=True)
    lq = lq - np.log(np.exp(lq).sum(axis=1, keepdims=True))
    pp = np.exp(lp)
    diff = lp - lq
    kl = (pp * diff).sum(axis=1)
    return kl, pp * (diff - kl[:, None])


def mle_fit(corpus: Sequence[Sequence[int]], vocab: Vocabulary, order: int, smoothing: float = 0.5) -> Policy:
    """Add-k smoothed maximum-likelihood table fitted on whole sequences from BOS."""
    if smoothing <= 0:
        raise ValueError("smoothing must be positive")
    if not corpus or all(len(s) == 0 for s in corpus):
        raise ValueError("cannot fit a policy to an empty corpus")
    proto = new_uniform(vocab, order)
    counts = np.zeros_like(proto.logits)
    for seq in corpus:
        cids = proto.context_ids_along((), seq)
        np.add.at(counts, (cids, np.asarray(seq, dtype=np.int64)), 1.0)
    totals = counts.sum(axis=1, keepdims=True)
    logits = np.log((counts + smoothing) / (totals + smoothing * vocab.size))
    return Policy(vocab, order, logits)

