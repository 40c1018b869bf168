"""Command-line entry point: ``rcpa-lab {run,demo,schedule,score}``.

Exit codes: 0 success, 1 usage or config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Sequence

from .curriculum import CurriculumConfig, CurriculumState, prefix_length, threshold
from .harness import ConfigError, RunConfig, load_config, run_suite
from .optimizer import STRATEGIES
from .reward import RewardSpec, score_response
from .tasks import ScenarioConfig, scenario_vocab

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

DEMO_STRATEGIES = ("rcpa", "grpon", "sft")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; route it to the config/usage code instead
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _tokens(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integer token ids, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rcpa-lab", description="Curriculum-scheduled GRPO lab on tabular policies.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run the full strategy x seed suite from a JSON config")
    run.add_argument("config")

    demo = sub.add_parser("demo", help="run a short built-in comparison on the default scenario")
    demo.add_argument("--output-dir", default="rcpa_demo")
    demo.add_argument("--steps", type=int, default=400)
    demo.add_argument("--seed", type=int, default=0)
    demo.add_argument("--strategies", nargs="+", choices=STRATEGIES, default=list(DEMO_STRATEGIES))

    sched = sub.add_parser("schedule", help="print the threshold and prefix schedules")
    sched.add_argument("--steps", type=int, default=1600)
    sched.add_argument("--sigma", type=float, default=16.0)
    sched.add_argument("--delta-min", type=float, default=0.7)
    sched.add_argument("--delta-max", type=float, default=0.8)
    sched.add_argument("--answer-len", type=int, default=6)
    sched.add_argument("--every", type=int, default=0, help="row stride (default: about 20 rows)")

    score = sub.add_parser("score", help="score one candidate against a reference")
    score.add_argument("--candidate", type=_tokens, required=True, help="token ids, e.g. '16 17 20'")
    score.add_argument("--reference", type=_tokens, required=True)
    score.add_argument("--delta", type=float, default=0.8)
    score.add_argument("--alpha", type=float, default=0.6)
    score.add_argument("--beta", type=float, default=0.7)
    score.add_argument("--vocab-size", type=int, default=32)
    return p


def _cmd_run(args) -> int:
    summary = run_suite(load_config(args.config))
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_demo(args) -> int:
    try:
        cfg = RunConfig(
            curriculum=CurriculumConfig(total_steps=args.steps),
            seeds=(args.seed,),
            output_dir=args.output_dir,
            strategies=tuple(args.strategies),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    summary = run_suite(cfg)
    print(f"{'strategy':<22} {'target_sim':>10} {'target_rew':>10} {'retention':>10}")
    for name, entry in summary.items():
        if entry["target_similarity"] is None:
            print(f"{name:<22} failed: {entry['failed']}")
            continue
        print(f"{name:<22} {entry['target_similarity']:>10.3f} {entry['target_reward']:>10.3f} "
              f"{entry['retention_delta_loglik']:>10.4f}")
    print(f"metrics written to {cfg.output_dir}/")
    return EXIT_OK


def _cmd_schedule(args) -> int:
    try:
        cfg = CurriculumConfig(total_steps=args.steps, sigma=args.sigma,
                               delta_min=args.delta_min, delta_max=args.delta_max)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if args.answer_len < 1:
        raise ConfigError("--answer-len must be >= 1")
    every = args.every if args.every > 0 else max(1, cfg.pre_alignment_steps // 20)
    steps = sorted({*range(0, cfg.pre_alignment_steps + 1, every), cfg.pre_alignment_steps, cfg.total_steps}
                   & set(range(cfg.total_steps + 1)))
    print(f"pre-alignment steps: {cfg.pre_alignment_steps} of {cfg.total_steps}")
    print(f"{'s':>6} {'delta':>8} {'k':>4} {'prefix_frac':>12}")
    for s in steps:
        st = CurriculumState(s, cfg)
        k = prefix_length(st, args.answer_len)
        print(f"{s:>6} {threshold(st):>8.4f} {k:>4} {k / args.answer_len:>12.4f}")
    return EXIT_OK


def _cmd_score(args) -> int:
    try:
        spec = RewardSpec(alpha=args.alpha, beta=args.beta)
        vocab = scenario_vocab(ScenarioConfig(vocab_size=args.vocab_size))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    bad = [t for t in args.candidate + args.reference if not 0 <= t < vocab.size]
    if bad:
        raise ConfigError(f"token ids out of range for vocab size {vocab.size}: {bad}")
    sim, reward = score_response(args.candidate, args.reference, spec, args.delta, vocab)
    print(f"similarity {sim!r}")
    print(f"reward {reward:+.0f}")
    return EXIT_OK


_COMMANDS = {"run": _cmd_run, "demo": _cmd_demo, "schedule": _cmd_schedule, "score": _cmd_score}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
