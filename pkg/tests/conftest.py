import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sidtree.env import EnvSizes, MisalignmentSpec, generate

settings.register_profile(
    "repo", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def small_env():
    """V=8 environment, fast enough for per-test decoding."""
    sizes = EnvSizes(V=8, L=3, d=8, n_states=4, n_contexts=200, n_logs=200)
    return generate(MisalignmentSpec(0.5, 0.25, seed=3), sizes)


@pytest.fixture(scope="session")
def desk_env():
    """Default desk-scale misaligned environment (V=16, L=3, 2000 contexts)."""
    return generate(MisalignmentSpec(0.5, 0.25, seed=1))


def random_logits(rng, rows, V, L, scale=1.5):
    from sidtree.core import level_offset

    return rng.normal(scale=scale, size=(rows, level_offset(V, L), V))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdicts (one line per criterion) at the end of the run."""
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
