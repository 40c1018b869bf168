import math

import pytest
from hypothesis import given, settings, strategies as st

from rcpa_lab.curriculum import (
    CurriculumConfig,
    CurriculumState,
    difficulty_weight,
    in_pre_alignment,
    prefix_length,
    threshold,
)

DEFAULT = CurriculumConfig()


def at(step, cfg=DEFAULT):
    return CurriculumState(step, cfg)


def test_defaults():
    assert (DEFAULT.total_steps, DEFAULT.sigma, DEFAULT.delta_min, DEFAULT.delta_max, DEFAULT.offset) == (
        1600, 16.0, 0.7, 0.8, 1.5)


def test_prefix_length_examples():
    assert prefix_length(at(0), 10) == 10
    assert prefix_length(at(50), 10) == 5
    assert prefix_length(at(100), 10) == 0
    assert prefix_length(at(1600), 7) == 0


def test_prefix_length_has_no_float_floor_artifacts():
    # 1 - 48*16/1600 = 0.52 exactly; 0.52 * 25 = 13
    assert prefix_length(at(48), 25) == 13
    for s in range(101):
        for n in (1, 6, 10, 25):
            num = (1600 - 16 * s) * n
            assert prefix_length(at(s), n) == max(0, num // 1600)


def test_threshold_examples():
    assert threshold(at(0)) == pytest.approx(0.7, abs=1e-12)
    assert threshold(at(50)) == pytest.approx(0.75, abs=1e-9)
    assert threshold(at(100)) == pytest.approx(0.8, abs=1e-12)
    assert threshold(at(1600)) == pytest.approx(0.8, abs=1e-12)


def test_difficulty_weight_examples():
    assert difficulty_weight(-1.0) == pytest.approx(2.0, abs=1e-12)
    assert difficulty_weight(1.0) == pytest.approx(0.4, abs=1e-12)
    assert difficulty_weight(0.0) == pytest.approx(0.666667, abs=1e-6)
    with pytest.raises(ValueError):
        difficulty_weight(-1.0, offset=1.0)


def test_pre_alignment_boundaries():
    assert in_pre_alignment(at(0))
    assert in_pre_alignment(at(99))
    assert not in_pre_alignment(at(100))
    assert DEFAULT.pre_alignment_steps == 100
    odd = CurriculumConfig(total_steps=1000, sigma=3.0)
    assert odd.pre_alignment_steps == math.ceil(1000 / 3)
    assert sum(in_pre_alignment(at(s, odd)) for s in range(1001)) == odd.pre_alignment_steps


def test_config_validation():
    with pytest.raises(ValueError):
        CurriculumConfig(delta_min=0.8, delta_max=0.7)
    with pytest.raises(ValueError):
        CurriculumConfig(sigma=0)
    with pytest.raises(ValueError):
        CurriculumConfig(total_steps=0)
    with pytest.raises(ValueError):
        CurriculumConfig(offset=1.0)
    with pytest.raises(ValueError):
        at(1601)


configs = st.builds(
    CurriculumConfig,
    total_steps=st.integers(1, 3000),
    sigma=st.floats(0.5, 64.0),
    delta_min=st.floats(0.0, 0.5),
    delta_max=st.floats(0.5, 1.0),
)


@settings(max_examples=200, deadline=None)
@given(configs, st.integers(1, 20), st.data())
def test_schedules_are_monotone_and_bounded(cfg, n, data):
    s = data.draw(st.integers(0, cfg.total_steps - 1))
    a, b = at(s, cfg), at(s + 1, cfg)
    assert threshold(b) >= threshold(a)
    assert prefix_length(b, n) <= prefix_length(a, n)
    assert cfg.delta_min - 1e-12 <= threshold(a) <= cfg.delta_max + 1e-12
    assert 0 <= prefix_length(a, n) <= n


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 64), st.data(), st.floats(1.01, 5.0))
def test_weight_positive_and_decreasing(g, data, offset):
    # group means of +-1 rewards lie on the lattice (2j - G) / G
    j1 = data.draw(st.integers(0, g))
    j2 = data.draw(st.integers(0, g))
    lo, hi = sorted(((2 * j1 - g) / g, (2 * j2 - g) / g))
    assert difficulty_weight(lo, offset) > 0
    if hi > lo:
        assert difficulty_weight(hi, offset) < difficulty_weight(lo, offset)


@settings(max_examples=100, deadline=None)
@given(st.integers(16, 5000), st.floats(1.0, 64.0))
def test_pre_alignment_fraction_is_one_over_sigma(total, sigma):
    cfg = CurriculumConfig(total_steps=total, sigma=sigma)
    assert abs(cfg.pre_alignment_steps / total - min(1.0, 1 / sigma)) <= 1 / total
