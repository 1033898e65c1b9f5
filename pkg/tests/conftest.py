import numpy as np
import pytest
from hypothesis import settings

from nearcps import synth

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_uniform():
    """32x32 noiseless uniform-albedo bumpy scene with a perfect proxy."""
    return synth.build_scene(synth.SceneSpec(size=32, albedo="uniform", proxy_noise_deg=0.0))


@pytest.fixture(scope="session")
def small_two():
    return synth.build_scene(synth.SceneSpec(size=32))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion_log(request, capsys):
    """Print one acceptance line live and keep it for the terminal summary."""
    lines = request.config.stash.setdefault(_CRITERIA_KEY, [])

    def emit(line: str):
        lines.append(line)
        with capsys.disabled():
            print("\n" + line)

    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
