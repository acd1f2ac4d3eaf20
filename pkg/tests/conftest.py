import numpy as np
import pytest
import torch

from convsense.dataset import SynthSpec, synth_dataset
from convsense.preprocess import preprocess_sessions

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_sessions():
    """Four short lab sessions; enough for every class to appear in each fold."""
    return synth_dataset(SynthSpec(n_groups=4, session_len_s=300, seed=11))


@pytest.fixture(scope="session")
def small_segments(small_sessions):
    return preprocess_sessions(small_sessions)


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


_CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def record_criterion():
    """Record one verdict line per acceptance criterion; all are echoed in the summary."""

    def record(n: int, passed: bool | None, detail: str) -> None:
        verdict = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        line = f"criterion {n:2d}: {verdict}  {detail}"
        _CRITERIA[n] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
