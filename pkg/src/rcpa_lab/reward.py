"""Composite response similarity and the thresholded binary reward.

Similarity backends return a ``SimilarityTriple`` (semantic, factual, entity).
Only the deterministic ``"toy"`` backend ships here: sequence-level stand-ins
for embedding cosine, bidirectional entailment and entity F1.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

from .policy import Vocabulary


@dataclass(frozen=True)
class SimilarityTriple:
    semantic: float
    factual: float
    entity: float

    def __post_init__(self):
        for name in ("semantic", "factual", "entity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} similarity {v} outside [0, 1]")


@dataclass(frozen=True)
class RewardSpec:
    alpha: float = 0.6
    beta: float = 0.7
    backend: str = "toy"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown similarity backend {self.backend!r}; available: {sorted(BACKENDS)}")


def lcs_length(a: Sequence[int], b: Sequence[int]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def sim_semantic_toy(o: Sequence[int], y: Sequence[int]) -> float:
    longest = max(len(o), len(y))
    if longest == 0:
        return 1.0
    return lcs_length(o, y) / longest


def sim_factual_toy(o: Sequence[int], y: Sequence[int]) -> float:
    so, sy = set(o), set(y)
    if not so and not sy:
        return 1.0
    if not so or not sy:
        return 0.0
    inter = len(so & sy)
    return min(inter / len(sy), inter / len(so))


def sim_entity_toy(o: Sequence[int], y: Sequence[int], vocab: Vocabulary) -> float:
    eo = Counter(t for t in o if vocab.is_entity(t))
    ey = Counter(t for t in y if vocab.is_entity(t))
    n_o, n_y = sum(eo.values()), sum(ey.values())
    if n_o == 0 and n_y == 0:
        return 1.0
    if n_o == 0 or n_y == 0:
        return 0.0
    overlap = sum((eo & ey).values())
    if overlap == 0:
        return 0.0
    precision, recall = overlap / n_o, overlap / n_y
    return 2 * precision * recall / (precision + recall)


def toy_triple(o: Sequence[int], y: Sequence[int], vocab: Vocabulary) -> SimilarityTriple:
    return SimilarityTriple(sim_semantic_toy(o, y), sim_factual_toy(o, y), sim_entity_toy(o, y, vocab))


BACKENDS: dict[str, Callable[[Sequence[int], Sequence[int], Vocabulary], SimilarityTriple]] = {
    "toy": toy_triple,
}


def composite_similarity(t: SimilarityTriple, spec: RewardSpec) -> float:
    a, b = spec.alpha, spec.beta
    return a * t.semantic + (1 - a) * (b * t.factual + (1 - b) * t.entity)


def binary_reward(s_val: float, delta: float) -> float:
    return 1.0 if s_val > delta else -1.0


def score_response(o, y, spec: RewardSpec, delta: float, vocab: Vocabulary) -> tuple[float, float]:
    """Return ``(similarity, reward)`` of candidate ``o`` against reference ``y``."""
    sim = composite_similarity(BACKENDS[spec.backend](o, y, vocab), spec)
    return sim, binary_reward(sim, delta)


def exact_match_reward(o: Sequence[int], y: Sequence[int]) -> float:
    return 1.0 if list(o) == list(y) else -1.0
