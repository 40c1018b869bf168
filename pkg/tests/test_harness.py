import json
import math
import statistics

import numpy as np
import pytest

from rcpa_lab import harness
from rcpa_lab.curriculum import CurriculumConfig, CurriculumState, prefix_length, threshold
from rcpa_lab.harness import (
    METRIC_FIELDS,
    ConfigError,
    RunConfig,
    build_scenario,
    coldstart_steps,
    config_from_dict,
    config_to_dict,
    load_config,
    metrics_csv,
    read_metrics_csv,
    run_scenario_config,
    run_suite,
    train,
    train_baseline,
    train_rcpa,
)
from rcpa_lab.optimizer import TrainConfig


def short(steps=40, **kw):
    return RunConfig(curriculum=CurriculumConfig(total_steps=steps), **kw)


def test_config_round_trip(tmp_path):
    cfg = short(seeds=(3, 4), strategies=("rcpa", "sft"), coldstart_epochs=0.1)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(config_to_dict(cfg)))
    assert load_config(path) == cfg


def test_config_rejects_unknown_and_invalid(tmp_path):
    with pytest.raises(ConfigError, match="unknown keys"):
        config_from_dict({"seedz": [0]})
    with pytest.raises(ConfigError, match="unknown keys"):
        config_from_dict({"train": {"lr": 1.0}})
    with pytest.raises(ConfigError):
        config_from_dict({"seeds": []})
    with pytest.raises(ConfigError):
        config_from_dict({"reward": {"backend": "nli"}})
    with pytest.raises(ConfigError):
        config_from_dict({"curriculum": {"delta_min": 0.8, "delta_max": 0.7}})
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "seeds": [0,\n}')
    with pytest.raises(ConfigError, match=r"line 3, column 1"):
        load_config(bad)


def test_zero_lr_one_step_keeps_pretrained_policy():
    cfg = RunConfig(train=TrainConfig(learning_rate=0.0), curriculum=CurriculumConfig(total_steps=1))
    theta, records = train_rcpa(cfg, 0)
    assert theta == build_scenario(run_scenario_config(cfg, 0)).pre
    assert len(records) == 1


def test_sft_zero_lr_unchanged():
    cfg = short(5, train=TrainConfig(learning_rate=0.0))
    theta, _ = train_baseline(cfg, "sft", 0)
    assert theta == build_scenario(run_scenario_config(cfg, 0)).pre


def test_rcpa_trace_follows_schedules():
    cfg = short(160)
    _, records = train_rcpa(cfg, 0)
    assert len(records) == 160
    assert [r.step for r in records] == list(range(160))
    for r in records:
        st = CurriculumState(r.step, cfg.curriculum)
        assert r.threshold == threshold(st)
        assert r.prefix_ratio == prefix_length(st, 6) / 6
        assert r.kl_consecutive >= 0 and r.kl_to_ref >= 0
        assert r.cdp_weight_mean == pytest.approx(1 / (1.5 + r.mean_reward), abs=1e-12)
        assert all(math.isfinite(getattr(r, f)) for f in METRIC_FIELDS if f not in ("strategy",))
        # group means of G=8 binary rewards
        assert (r.mean_reward * 8 + 8) % 2 == 0
    assert records[0].prefix_ratio == 1.0
    assert records[-1].prefix_ratio == 0.0


@pytest.mark.parametrize("strategy", ["grpon", "grpo_exact", "sft", "cfft"])
def test_baselines_never_inject_prefixes(strategy):
    _, records = train_baseline(short(20), strategy, 0)
    assert len(records) == 20
    assert all(r.prefix_ratio == 0 for r in records)
    assert all(r.cdp_weight_mean == 1.0 for r in records)
    expect = 1.0 if strategy == "grpo_exact" else 0.8
    assert all(r.threshold == expect for r in records)


def test_baseline_rejects_rcpa():
    with pytest.raises(ValueError):
        train_baseline(short(2), "rcpa", 0)


def test_coldstart_consumes_one_pass_before_rl(monkeypatch):
    cfg = short(10, coldstart_epochs=1.0)
    assert coldstart_steps(cfg, 256) == 256
    assert coldstart_steps(short(10, coldstart_epochs=0.1), 256) == 26
    consumed = []
    real_next = harness._Run.next_item

    def recording_next(self):
        item = real_next(self)
        consumed.append(item)
        return item

    monkeypatch.setattr(harness._Run, "next_item", recording_next)
    _, records = train(cfg, "coldstart_then_grpon", 0)
    assert len(records) == 256 + 10
    train_items = build_scenario(run_scenario_config(cfg, 0)).train.items
    assert sorted(consumed[:256]) == sorted(train_items)
    assert len(consumed) == 266


def test_same_seed_gives_identical_csv():
    cfg = short(30)
    for strategy in ("rcpa", "grpon", "cfft"):
        a = metrics_csv(train(cfg, strategy, 2)[1])
        b = metrics_csv(train(cfg, strategy, 2)[1])
        assert a == b
    assert metrics_csv(train(cfg, "rcpa", 2)[1]) != metrics_csv(train(cfg, "rcpa", 3)[1])


def test_csv_round_trip(tmp_path):
    _, records = train(short(12), "rcpa", 0)
    path = tmp_path / "m.csv"
    path.write_text(metrics_csv(records))
    rows = read_metrics_csv(path)
    assert list(rows[0]) == METRIC_FIELDS
    for row, rec in zip(rows, records):
        for f in METRIC_FIELDS:
            assert row[f] == getattr(rec, f)


def test_empty_strategy_list(tmp_path):
    summary = run_suite(short(5, strategies=(), output_dir=str(tmp_path)))
    assert summary == {}
    assert json.loads((tmp_path / "summary.json").read_text()) == {}


def test_suite_files_summary_and_reproducibility(tmp_path):
    cfg = short(20, seeds=(0, 1, 2), strategies=("rcpa", "sft"), output_dir=str(tmp_path / "a"))
    summary = run_suite(cfg)
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == ["rcpa_0.csv", "rcpa_1.csv", "rcpa_2.csv", "sft_0.csv", "sft_1.csv", "sft_2.csv", "summary.json"]
    for strategy in ("rcpa", "sft"):
        rows = [read_metrics_csv(tmp_path / "a" / f"{strategy}_{s}.csv") for s in (0, 1, 2)]
        entry = summary[strategy]
        assert entry["seeds"] == [0, 1, 2]
        assert entry["failed"] == {}
        assert entry["target_similarity"] == statistics.median(r[-1]["target_similarity"] for r in rows)
        assert entry["mean_reward"] == statistics.median(r[-1]["mean_reward"] for r in rows)
        assert entry["retention_delta_loglik"] == statistics.median(r[-1]["retention_delta_loglik"] for r in rows)
        assert entry["kl_consecutive_variance"] == statistics.median(
            float(np.var([x["kl_consecutive"] for x in r])) for r in rows)

    run_suite(cfg.__class__(**{**cfg.__dict__, "output_dir": str(tmp_path / "b")}))
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_parallel_suite_matches_serial(tmp_path, monkeypatch):
    base = dict(seeds=(0, 1), strategies=("rcpa", "grpon"))
    run_suite(short(15, output_dir=str(tmp_path / "serial"), **base))
    monkeypatch.setenv("RCPA_LAB_THREADS", "2")
    run_suite(short(15, output_dir=str(tmp_path / "par"), **base))
    for p in (tmp_path / "serial").iterdir():
        assert p.read_bytes() == (tmp_path / "par" / p.name).read_bytes()


def test_suite_records_failures_and_continues(tmp_path, monkeypatch):
    real = harness.train

    def flaky(cfg, strategy, seed):
        if seed == 1:
            raise RuntimeError("boom")
        return real(cfg, strategy, seed)

    monkeypatch.setattr(harness, "train", flaky)
    summary = run_suite(short(5, seeds=(0, 1), strategies=("sft",), output_dir=str(tmp_path)))
    assert summary["sft"]["seeds"] == [0]
    assert "boom" in summary["sft"]["failed"]["1"]
    assert not (tmp_path / "sft_1.csv").exists()


def test_bad_thread_env(monkeypatch):
    monkeypatch.setenv("RCPA_LAB_THREADS", "many")
    with pytest.raises(ConfigError):
        harness.suite_threads()
