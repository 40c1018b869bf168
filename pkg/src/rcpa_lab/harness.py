"""Experiment orchestration: training loops, multi-seed suites and metric files."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from .curriculum import CurriculumConfig, CurriculumState, difficulty_weight, prefix_length, threshold
from .optimizer import (
    STRATEGIES,
    ResponseGroup,
    TrainConfig,
    Trajectory,
    ascend,
    cfft_loss,
    grpo_objective,
    rcpa_objective,
    sft_loss,
)
from .policy import Policy, Vocabulary, mean_row_kl, mle_fit, sample_suffixes
from .reward import RewardSpec, exact_match_reward, score_response
from .tasks import (
    Dataset,
    ScenarioConfig,
    eval_retention,
    eval_target,
    gen_held_out_source,
    gen_source_corpus,
    gen_target_dataset,
    scenario_vocab,
)

log = logging.getLogger(__name__)

EVAL_POINTS = 50
EVAL_SAMPLES_PER_ITEM = 2
HELD_OUT_SEQUENCES = 200
PRETRAIN_SMOOTHING = 0.5
THREADS_ENV = "RCPA_LAB_THREADS"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    reward: RewardSpec = field(default_factory=RewardSpec)
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "rcpa_out"
    coldstart_epochs: float = 1.0
    strategies: tuple[str, ...] = ("rcpa",)

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.coldstart_epochs < 0:
            raise ValueError("coldstart_epochs must be non-negative")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ValueError(f"unknown strategy {s!r}; expected one of {STRATEGIES}")


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    strategy: str
    seed: int
    mean_reward: float
    threshold: float
    prefix_ratio: float
    cdp_weight_mean: float
    kl_to_ref: float
    kl_consecutive: float
    target_similarity: float
    target_reward: float
    retention_delta_loglik: float


METRIC_FIELDS = [f.name for f in dataclasses.fields(MetricsRecord)]

_NESTED = {"scenario": ScenarioConfig, "train": TrainConfig, "curriculum": CurriculumConfig, "reward": RewardSpec}


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"config: unknown keys {unknown}")
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key in _NESTED:
            kwargs[key] = _build(_NESTED[key], value, key)
        elif key in ("seeds", "strategies"):
            if not isinstance(value, list):
                raise ConfigError(f"{key}: expected a list")
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config: {exc}") from exc


def config_to_dict(cfg: RunConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["seeds"] = list(cfg.seeds)
    out["strategies"] = list(cfg.strategies)
    return out


def load_config(path: str | Path) -> RunConfig:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return config_from_dict(data)


# scenario construction ------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    vocab: Vocabulary
    pre: Policy
    train: Dataset
    test: Dataset
    held_out: tuple[tuple[int, ...], ...]


@lru_cache(maxsize=16)
def build_scenario(cfg: ScenarioConfig) -> Scenario:
    vocab = scenario_vocab(cfg)
    pre = mle_fit(gen_source_corpus(cfg), vocab, cfg.policy_order, PRETRAIN_SMOOTHING)
    train, test = gen_target_dataset(cfg, pre)
    held_out = tuple(tuple(s) for s in gen_held_out_source(cfg, HELD_OUT_SEQUENCES))
    return Scenario(vocab, pre, train, test, held_out)


def run_scenario_config(cfg: RunConfig, seed: int) -> ScenarioConfig:
    """Each run seed offsets the scenario seed, so seeds vary both data and sampling."""
    return replace(cfg.scenario, seed=cfg.scenario.seed + seed)


# training loops -------------------------------------------------------------


class _Run:
    """Mutable state of a single (strategy, seed) run."""

    def __init__(self, cfg: RunConfig, strategy: str, seed: int):
        self.cfg = cfg
        self.strategy = strategy
        self.seed = seed
        self.sc = build_scenario(run_scenario_config(cfg, seed))
        self.theta = self.sc.pre
        self.ref = self.sc.pre
        self.item_rng = np.random.default_rng([seed, 1])
        self.sample_rng = np.random.default_rng([seed, 2])
        self.eval_rng = np.random.default_rng([seed, 3])
        self.records: list[MetricsRecord] = []
        self._items = self._item_stream()
        self._eval = self._evaluate()

    def _item_stream(self) -> Iterator[tuple[tuple[int, ...], tuple[int, ...]]]:
        items = self.sc.train.items
        while True:
            for i in self.item_rng.permutation(len(items)):
                yield items[int(i)]

    def next_item(self):
        return next(self._items)

    def _evaluate(self) -> tuple[float, float, float]:
        sim, rew = eval_target(self.theta, self.sc.train, self.cfg.reward, self.cfg.curriculum.delta_max,
                               EVAL_SAMPLES_PER_ITEM, self.eval_rng, self.cfg.train.max_suffix_len)
        dll, _ = eval_retention(self.theta, self.sc.pre, self.sc.held_out)
        return sim, rew, dll

    def step_update(self, objective, lr: float, n_epochs: int):
        for _ in range(n_epochs):
            _, grad = objective(self.theta)
            if lr > 0:
                self.theta = ascend(self.theta, grad, lr)

    def record(self, step: int, visited: np.ndarray, prev: Policy, eval_due: bool, **kw) -> None:
        if eval_due:
            self._eval = self._evaluate()
        sim, rew, dll = self._eval
        self.records.append(MetricsRecord(
            step=step, strategy=self.strategy, seed=self.seed,
            kl_to_ref=mean_row_kl(self.theta, self.ref, visited),
            kl_consecutive=mean_row_kl(self.theta, prev, visited),
            target_similarity=sim, target_reward=rew, retention_delta_loglik=dll, **kw,
        ))


def _strip_eos(tokens, eos: int):
    return tokens[:-1] if tokens and tokens[-1] == eos else tokens


def _rl_step(run: _Run, step: int, mode: str, state: CurriculumState | None, eval_due: bool) -> None:
    cfg = run.cfg
    tc = cfg.train
    eos = run.sc.vocab.eos
    x, y = run.next_item()
    if mode == "rcpa":
        k = prefix_length(state, len(y))
        delta = threshold(state)
    else:
        k = 0
        delta = 1.0 if mode == "grpo_exact" else cfg.curriculum.delta_max
    prefix = tuple(y[:k])
    suffixes, logps = sample_suffixes(run.theta, x + prefix, tc.max_suffix_len, tc.group_size, run.sample_rng)
    trajectories, rewards = [], []
    for suf, lp in zip(suffixes, logps):
        trajectories.append(Trajectory(x, k, prefix + tuple(suf), lp))
        response = prefix + tuple(_strip_eos(suf, eos))
        if mode == "grpo_exact":
            rewards.append(exact_match_reward(response, y))
        else:
            rewards.append(score_response(response, y, cfg.reward, delta, run.sc.vocab)[1])
    mean_r = float(np.mean(rewards))
    w = difficulty_weight(mean_r, cfg.curriculum.offset) if mode == "rcpa" else 1.0
    group = ResponseGroup.from_rewards(trajectories, rewards, w)

    old = prev = run.theta
    if mode == "rcpa":
        objective = lambda th: rcpa_objective([group], th, old, run.ref, tc, state)  # noqa: E731
    else:
        objective = lambda th: grpo_objective([group], th, old, run.ref, tc)  # noqa: E731
    run.step_update(objective, tc.learning_rate, tc.inner_epochs)

    visited = np.concatenate([prev.context_ids_along(x, t.tokens)[k:] for t in trajectories])
    run.record(step, visited, prev, eval_due, mean_reward=mean_r, threshold=delta,
               prefix_ratio=k / len(y), cdp_weight_mean=w)


def _sft_step(run: _Run, step: int, with_kl: bool, eval_due: bool) -> None:
    cfg = run.cfg
    tc = cfg.train
    x, y = run.next_item()
    target = tuple(y) + (run.sc.vocab.eos,)
    batch = [(x, target)]
    # diagnostic rewards of the current policy on this item, not used for the update
    suffixes, _ = sample_suffixes(run.theta, x, tc.max_suffix_len, tc.group_size, run.sample_rng)
    delta = cfg.curriculum.delta_max
    rewards = [score_response(_strip_eos(s, run.sc.vocab.eos), y, cfg.reward, delta, run.sc.vocab)[1]
               for s in suffixes]
    prev = run.theta
    if with_kl:
        objective = lambda th: cfft_loss(batch, th, run.ref, tc.kl_coef)  # noqa: E731
    else:
        objective = lambda th: sft_loss(batch, th)  # noqa: E731
    run.step_update(objective, tc.learning_rate, 1)
    visited = prev.context_ids_along(x, target)
    run.record(step, visited, prev, eval_due, mean_reward=float(np.mean(rewards)), threshold=delta,
               prefix_ratio=0.0, cdp_weight_mean=1.0)


def _eval_due(step: int, n_steps: int, cadence: int) -> bool:
    return (step + 1) % cadence == 0 or step == n_steps - 1


def _cadence(total_steps: int) -> int:
    return max(1, total_steps // EVAL_POINTS)


def coldstart_steps(cfg: RunConfig, n_train: int) -> int:
    return int(round(cfg.coldstart_epochs * n_train))


def _train(cfg: RunConfig, strategy: str, seed: int) -> tuple[Policy, list[MetricsRecord]]:
    run = _Run(cfg, strategy, seed)
    S = cfg.curriculum.total_steps
    n_cold = coldstart_steps(cfg, len(run.sc.train)) if strategy == "coldstart_then_grpon" else 0
    n_steps = n_cold + S
    cadence = _cadence(n_steps)
    state = CurriculumState(0, cfg.curriculum)
    for step in range(n_steps):
        due = _eval_due(step, n_steps, cadence)
        if strategy == "rcpa":
            _rl_step(run, step, "rcpa", state, due)
            state = state.advance()
        elif strategy in ("grpon", "grpo_exact"):
            _rl_step(run, step, strategy, None, due)
        elif strategy == "sft":
            _sft_step(run, step, False, due)
        elif strategy == "cfft":
            _sft_step(run, step, True, due)
        elif step < n_cold:
            _sft_step(run, step, False, due)
        else:
            _rl_step(run, step, "grpon", None, due)
    return run.theta, run.records


def train_rcpa(cfg: RunConfig, seed: int) -> tuple[Policy, list[MetricsRecord]]:
    """Two-phase curriculum run: prefix-injected pre-alignment, then free generation."""
    return _train(cfg, "rcpa", seed)


def train_baseline(cfg: RunConfig, strategy: str, seed: int) -> tuple[Policy, list[MetricsRecord]]:
    if strategy not in STRATEGIES or strategy == "rcpa":
        raise ValueError(f"unknown baseline strategy {strategy!r}")
    return _train(cfg, strategy, seed)


def train(cfg: RunConfig, strategy: str, seed: int) -> tuple[Policy, list[MetricsRecord]]:
    return train_rcpa(cfg, seed) if strategy == "rcpa" else train_baseline(cfg, strategy, seed)


# metric files ---------------------------------------------------------------


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def metrics_csv(records: list[MetricsRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_FIELDS)
    for r in records:
        writer.writerow([_fmt(getattr(r, name)) for name in METRIC_FIELDS])
    return buf.getvalue()


def read_metrics_csv(path: str | Path) -> list[dict[str, Any]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        parsed: dict[str, Any] = {}
        for k, v in row.items():
            if k in ("step", "seed"):
                parsed[k] = int(v)
            elif k == "strategy":
                parsed[k] = v
            else:
                parsed[k] = float(v)
        out.append(parsed)
    return out


def run_summary(rows: list[dict[str, Any]]) -> dict[str, float]:
    """Per-run scalars that the suite summary takes medians of."""
    last = rows[-1]
    kl = [r["kl_consecutive"] for r in rows]
    return {
        "target_similarity": last["target_similarity"],
        "target_reward": last["target_reward"],
        "mean_reward": last["mean_reward"],
        "retention_delta_loglik": last["retention_delta_loglik"],
        "kl_consecutive_variance": float(np.var(kl)),
    }


SUMMARY_KEYS = ("target_similarity", "target_reward", "mean_reward", "retention_delta_loglik",
                "kl_consecutive_variance")


def summarize(per_run: dict[str, dict[int, dict[str, float]]], failures: dict[str, dict[int, str]]) -> dict:
    out = {}
    for strategy in sorted(set(per_run) | set(failures)):
        runs = per_run.get(strategy, {})
        entry: dict[str, Any] = {"seeds": sorted(runs)}
        for key in SUMMARY_KEYS:
            vals = [runs[s][key] for s in sorted(runs)]
            entry[key] = statistics.median(vals) if vals else None
        entry["failed"] = {str(k): v for k, v in sorted(failures.get(strategy, {}).items())}
        out[strategy] = entry
    return out


def _run_one(args) -> tuple[str, int, str | None, str | None]:
    cfg, strategy, seed = args
    try:
        _, records = train(cfg, strategy, seed)
    except Exception as exc:  # suite keeps going; failure is reported in the summary
        log.exception("run %s/%s failed", strategy, seed)
        return strategy, seed, None, f"{type(exc).__name__}: {exc}"
    return strategy, seed, metrics_csv(records), None


def suite_threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def run_suite(cfg: RunConfig) -> dict:
    """Run every strategy x seed, write ``<strategy>_<seed>.csv`` files and ``summary.json``."""
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, strategy, seed) for strategy in cfg.strategies for seed in cfg.seeds]
    threads = suite_threads()
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(job) for job in jobs]

    per_run: dict[str, dict[int, dict[str, float]]] = {}
    failures: dict[str, dict[int, str]] = {}
    for strategy, seed, text, err in results:
        if err is not None:
            failures.setdefault(strategy, {})[seed] = err
            continue
        path = out_dir / f"{strategy}_{seed}.csv"
        path.write_text(text)
        per_run.setdefault(strategy, {})[seed] = run_summary(read_metrics_csv(path))
    summary = summarize(per_run, failures)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
