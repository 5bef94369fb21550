import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("ci", max_examples=60, deadline=None)
settings.load_profile("ci")


def random_world(gen, n_users=None, n_items=None, p_low=0.05):
    """Small random (e, o, e_hat, p_hat) instance with at least one exposed pair."""
    n_users = n_users or int(gen.integers(2, 51))
    n_items = n_items or int(gen.integers(2, 51))
    shape = (n_users, n_items)
    p = gen.uniform(p_low, 1.0, shape)
    o = (gen.random(shape) < p).astype(np.int8)
    o.flat[int(gen.integers(o.size))] = 1
    e = gen.gamma(2.0, 0.5, shape)
    e_hat = e + gen.normal(0.3, 0.5, shape)
    return e, o, e_hat, p


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record one acceptance line; the test still asserts on its own."""
    def _record(label, passed, detail=""):
        ACCEPTANCE_LINES.append(f"{'PASS' if passed else 'FAIL'}  {label}" + (f"  ({detail})" if detail else ""))
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
