import numpy as np
import pytest

from rcpa_lab.policy import Policy, Vocabulary


def random_policy(rng, size=3, order=1, scale=1.0, eos=0):
    vocab = Vocabulary(size, eos)
    return Policy(vocab, order, rng.normal(scale=scale, size=((size + 1) ** order, size)))


def central_difference(fn, policy, h=1e-5):
    """Dense finite-difference gradient of ``fn(policy) -> float`` over every logit."""
    grad = np.zeros_like(policy.logits)
    for idx in np.ndindex(*policy.logits.shape):
        up, down = policy.copy(), policy.copy()
        up.logits[idx] += h
        down.logits[idx] -= h
        grad[idx] = (fn(up) - fn(down)) / (2 * h)
    return grad


def relative_error(analytic, numeric):
    return np.max(np.abs(analytic - numeric)) / max(1.0, np.max(np.abs(numeric)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
