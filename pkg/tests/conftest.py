from functools import lru_cache

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from crosstalk.simulator import SceneConfig, simulate_scene
from crosstalk.stft import CLOSE_TALK_STFT

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile("default")


@lru_cache(maxsize=None)
def scene(seed=0, num_speakers=2, duration_s=3.0, noisy=False, stft=CLOSE_TALK_STFT, **kw):
    extra = {} if noisy else {"num_noise_sources": 0, "ambient_db": None}
    return simulate_scene(SceneConfig(seed=seed, num_speakers=num_speakers, duration_s=duration_s,
                                      stft=stft, **extra, **kw))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def record_criterion(number: int, ok: bool, detail: str) -> bool:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
