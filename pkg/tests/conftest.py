import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(scope="session")
def star_walk_small():
    """First frames of the walking star, thinned for speed."""
    from protruseg import synth
    from protruseg.data import SubsampleParams, VoxelSequence, subsample_sequence

    seq = synth.preset_sequences("star_walk", frames=25)
    short = VoxelSequence(seq.frames[:3], seq.name)
    return subsample_sequence(short, SubsampleParams(8, 0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: dict[str, str] = {}


@pytest.fixture
def report():
    """Record one pass/fail line for an acceptance criterion."""

    def record(criterion: str, ok: bool, detail: str):
        line = f"{criterion} {'PASS' if ok else 'FAIL'}: {detail}"
        ACCEPTANCE[criterion] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda c: int(c[1:])):
            terminalreporter.write_line(ACCEPTANCE[key])
