"""Objective values and exact gradients for the post-training strategies.

All objectives are in the maximisation sense and return ``(value, ParamGradient)``
with the gradient taken with respect to ``theta``'s logit table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .curriculum import CurriculumState, in_pre_alignment
from .policy import ParamGradient, Policy, row_kl_grad

STRATEGIES = ("rcpa", "grpon", "grpo_exact", "sft", "cfft", "coldstart_then_grpon")
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class Trajectory:
    """One sampled response: forced prefix ``tokens[:prefix_len]`` then the generated suffix."""

    prompt: tuple[int, ...]
    prefix_len: int
    tokens: tuple[int, ...]
    behavior_logps: np.ndarray = field(compare=False)

    def __post_init__(self):
        if not 0 <= self.prefix_len < len(self.tokens):
            raise ValueError("a trajectory needs at least one generated token after its prefix")
        if len(self.behavior_logps) != len(self.tokens) - self.prefix_len:
            raise ValueError("behavior_logps must hold one entry per generated token")

    @property
    def suffix(self) -> tuple[int, ...]:
        return self.tokens[self.prefix_len:]

    @property
    def n_generated(self) -> int:
        return len(self.tokens) - self.prefix_len


@dataclass
class ResponseGroup:
    trajectories: list[Trajectory]
    rewards: list[float]
    advantages: list[float]
    weight: float = 1.0

    def __post_init__(self):
        g = len(self.trajectories)
        if len(self.rewards) != g or len(self.advantages) != g:
            raise ValueError("rewards and advantages must match the number of trajectories")

    @classmethod
    def from_rewards(cls, trajectories, rewards, weight: float = 1.0) -> "ResponseGroup":
        return cls(list(trajectories), list(rewards), standardized_advantages(rewards), weight)


@dataclass(frozen=True)
class TrainConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    kl_coef: float = 0.01
    learning_rate: float = 8.0
    inner_epochs: int = 1
    max_suffix_len: int = 8
    strategy: str = "rcpa"

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.kl_coef < 0:
            raise ValueError("kl_coef must be non-negative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.inner_epochs < 1:
            raise ValueError("inner_epochs must be >= 1")
        if self.max_suffix_len < 1:
            raise ValueError("max_suffix_len must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")


def standardized_advantages(rewards: Sequence[float]) -> list[float]:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("need at least two rewards to standardise")
    std = r.std()
    if std < STD_FLOOR:
        return [0.0] * r.size
    return ((r - r.mean()) / std).tolist()


def importance_ratio(logp_new: float, logp_old: float) -> float:
    return math.exp(logp_new - logp_old)


def clipped_term(rho: float, adv: float, eps: float) -> float:
    return min(rho * adv, min(max(rho, 1.0 - eps), 1.0 + eps) * adv)


def kl_penalty_estimate(logp_theta: float, logp_ref: float) -> float:
    u = math.exp(logp_ref - logp_theta)
    return u - math.log(u) - 1.0


def _check_policies(*policies: Policy) -> None:
    first = policies[0]
    for p in policies[1:]:
        if not first.same_shape(p):
            raise ValueError("policies must share vocabulary and order")


def _sparse_from_rows(cids: np.ndarray, local: np.ndarray, width: int) -> ParamGradient:
    uniq, inv = np.unique(cids, return_inverse=True)
    acc = np.zeros((uniq.size, width))
    np.add.at(acc, inv, local)
    return ParamGradient(width, {int(r): acc[i] for i, r in enumerate(uniq)})


def _clipped_surrogate(groups: Sequence[ResponseGroup], theta: Policy, ref: Policy, cfg: TrainConfig,
                       use_weight: bool) -> tuple[float, ParamGradient]:
    width = theta.vocab.size
    if not groups:
        return 0.0, ParamGradient(width)
    cids, toks, blp, adv, klc = [], [], [], [], []
    n_groups = len(groups)
    for group in groups:
        g = len(group.trajectories)
        w = group.weight if use_weight else 1.0
        for traj, a in zip(group.trajectories, group.advantages):
            delta = traj.n_generated
            cids.append(theta.context_ids_along(traj.prompt, traj.tokens)[traj.prefix_len:])
            toks.append(np.asarray(traj.suffix, dtype=np.int64))
            blp.append(np.asarray(traj.behavior_logps, dtype=np.float64))
            norm = 1.0 / (n_groups * g * delta)
            adv.append(np.full(delta, a * w * norm))
            klc.append(np.full(delta, cfg.kl_coef * norm))
    cids = np.concatenate(cids)
    toks = np.concatenate(toks)
    ref_lp = kernels.token_logps(ref.logits, cids, toks)

    uniq, inv = np.unique(cids, return_inverse=True)
    compact = np.ascontiguousarray(theta.logits[uniq])
    grad = np.zeros_like(compact)
    value = kernels.surrogate_accumulate(
        compact, inv.astype(np.int64), toks, np.concatenate(blp), ref_lp,
        np.concatenate(adv), np.concatenate(klc), cfg.clip_eps, grad,
    )
    return float(value), ParamGradient(width, {int(r): grad[i] for i, r in enumerate(uniq)})


def rcpa_objective(groups: Sequence[ResponseGroup], theta: Policy, old: Policy, ref: Policy,
                   cfg: TrainConfig, state: CurriculumState) -> tuple[float, ParamGradient]:
    """Difficulty-weighted clipped surrogate over generated suffix tokens only.

    Each trajectory contributes ``(1/G) (1/n_i) sum_t [min(rho A, clip(rho) A) w - gamma KL_t]``
    where ``n_i`` counts its generated tokens; groups are averaged. Ratios use
    the behaviour log-probs stored on the trajectory (sampled under ``old``).
    """
    _check_policies(theta, old, ref)
    if not in_pre_alignment(state):
        if any(t.prefix_len for g in groups for t in g.trajectories):
            raise ValueError("forced prefixes are only valid during pre-alignment")
    return _clipped_surrogate(groups, theta, ref, cfg, use_weight=True)


def grpo_objective(groups: Sequence[ResponseGroup], theta: Policy, old: Policy, ref: Policy,
                   cfg: TrainConfig) -> tuple[float, ParamGradient]:
    _check_policies(theta, old, ref)
    if any(t.prefix_len for g in groups for t in g.trajectories):
        raise ValueError("plain GRPO trajectories carry no forced prefix")
    return _clipped_surrogate(groups, theta, ref, cfg, use_weight=False)


def _sft_terms(batch, theta: Policy):
    cids, toks = [], []
    for x, y in batch:
        cids.append(theta.context_ids_along(x, y))
        toks.append(np.asarray(y, dtype=np.int64))
    return np.concatenate(cids), np.concatenate(toks)


def sft_loss(batch: Sequence[tuple[Sequence[int], Sequence[int]]], theta: Policy) -> tuple[float, ParamGradient]:
    """Mean over examples of the summed token log-likelihood of ``y`` given ``x``."""
    if not batch:
        raise ValueError("empty batch")
    cids, toks = _sft_terms(batch, theta)
    scale = 1.0 / len(batch)
    value = float(kernels.token_logps(theta.logits, cids, toks).sum()) * scale
    local = -theta.row_probs(cids)
    local[np.arange(cids.size), toks] += 1.0
    return value, _sparse_from_rows(cids, local * scale, theta.vocab.size)


def cfft_loss(batch, theta: Policy, ref: Policy, kl_coef: float,
              contexts: Sequence[int] | None = None) -> tuple[float, ParamGradient]:
    """SFT objective minus ``kl_coef`` times the mean exact KL(theta || ref).

    ``contexts`` are row ids; by default the distinct rows visited by the batch.
    """
    if kl_coef < 0:
        raise ValueError("kl_coef must be non-negative")
    _check_policies(theta, ref)
    value, grad = sft_loss(batch, theta)
    if contexts is None:
        contexts = _sft_terms(batch, theta)[0]
    rows = np.unique(np.asarray(contexts, dtype=np.int64))
    if kl_coef == 0 or rows.size == 0:
        return value, grad
    kl, kl_grad = row_kl_grad(theta, ref, rows)
    scale = kl_coef / rows.size
    penalty = ParamGradient(theta.vocab.size, {int(r): -scale * kl_grad[i] for i, r in enumerate(rows)})
    return value - kl_coef * float(kl.mean()), grad + penalty


def ascend(theta: Policy, grad: ParamGradient, lr: float) -> Policy:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if not grad.is_finite():
        raise ValueError("gradient has non-finite entries")
    out = theta.copy()
    for r, v in grad.rows.items():
        out.logits[r] += lr * v
    return out
