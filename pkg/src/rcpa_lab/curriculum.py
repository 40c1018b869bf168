"""Prefix-injection and threshold schedules, and the difficulty weight."""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass, replace


@dataclass(frozen=True)
class CurriculumConfig:
    total_steps: int = 1600
    sigma: float = 16.0
    delta_min: float = 0.7
    delta_max: float = 0.8
    offset: float = 1.5

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not 0.0 <= self.delta_min <= self.delta_max <= 1.0:
            raise ValueError(f"need 0 <= delta_min <= delta_max <= 1, got {self.delta_min}, {self.delta_max}")
        if self.offset <= 1.0:
            raise ValueError("offset must exceed 1 so the weight stays finite for mean rewards in [-1, 1]")

    @property
    def pre_alignment_steps(self) -> int:
        """Number of integer steps ``s`` with ``s < S / sigma``."""
        return min(self.total_steps, math.ceil(Fraction(self.total_steps) / Fraction(self.sigma)))


@dataclass(frozen=True)
class CurriculumState:
    step: int
    config: CurriculumConfig

    def __post_init__(self):
        if not 0 <= self.step <= self.config.total_steps:
            raise ValueError(f"step {self.step} outside [0, {self.config.total_steps}]")

    @property
    def progress(self) -> float:
        """``(s / S) * sigma``, the raw schedule coordinate."""
        return self.step / self.config.total_steps * self.config.sigma

    def advance(self) -> "CurriculumState":
        return replace(self, step=self.step + 1)


def prefix_length(state: CurriculumState, answer_len: int) -> int:
    if answer_len < 1:
        raise ValueError("answer_len must be >= 1")
    # exact rational arithmetic so the floor never lands one token short
    c = state.config
    frac = 1 - Fraction(state.step) * Fraction(c.sigma) / c.total_steps
    return math.floor(max(Fraction(0), frac) * answer_len)


def threshold(state: CurriculumState) -> float:
    c = state.config
    return c.delta_min + (c.delta_max - c.delta_min) * min(1.0, state.progress)


def difficulty_weight(mean_reward: float, offset: float = 1.5) -> float:
    denom = offset + mean_reward
    if denom <= 0:
        raise ValueError(f"offset + mean reward must be positive, got {denom}")
    return 1.0 / denom


def in_pre_alignment(state: CurriculumState) -> bool:
    c = state.config
    return Fraction(state.step) * Fraction(c.sigma) < c.total_steps
