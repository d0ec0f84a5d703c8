import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from gradepred.core import GradeRecord
from gradepred.synth import SynthConfig, generate

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def recs(*rows):
    """``("s1", "a", 1, 3.0), ...`` -> GradeRecords."""
    return [GradeRecord(*r) for r in rows]


@pytest.fixture(scope="session")
def linear_small():
    return generate(SynthConfig(n_students=300, kind="planted-linear", noise_sigma=0.0, seed=3))


@pytest.fixture(scope="session")
def two_cluster_small():
    return generate(SynthConfig(n_students=400, kind="two-cluster", seed=2))


_CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """``with criterion(3, "label"):`` records one PASS/FAIL line for the summary."""
    from contextlib import contextmanager

    @contextmanager
    def check(number, label):
        try:
            yield
        except BaseException:
            _CRITERIA.append(f"criterion {number:>2}: FAIL  {label}")
            print(_CRITERIA[-1])
            raise
        _CRITERIA.append(f"criterion {number:>2}: PASS  {label}")
        print(_CRITERIA[-1])

    return check


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
