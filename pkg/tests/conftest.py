from __future__ import annotations

import sys
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from microsim.ingest import build_indicator  # noqa: E402
from microsim.ipf import ipf_run  # noqa: E402
from microsim.synthgen import PopulationSpec, SupportWarning, generate  # noqa: E402

_ACCEPTANCE: list[tuple[str, str, str]] = []


def record_acceptance(label: str, passed: bool | None, detail: str) -> None:
    """Remember one acceptance line; ``passed=None`` marks a skipped check."""
    status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
    _ACCEPTANCE.append((label, status, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, status, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"{label}: {status}  {detail}")


@dataclass
class Fitted:
    data: object
    indicator: object
    weights: object
    trace: object

    @property
    def constraints(self):
        return self.data.constraints

    @property
    def pops(self):
        return self.data.constraints.populations

    @property
    def census(self):
        return self.data.constraints.table


def fit_fixture(seed: int, **spec) -> Fitted:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SupportWarning)
        data = generate(PopulationSpec(seed=seed, **spec))
    B = build_indicator(data.survey, data.cmap, data.constraints)
    wm, trace = ipf_run(None, data.constraints, indicator=B)
    return Fitted(data, B, wm, trace)


@pytest.fixture(scope="session")
def small_fit() -> Fitted:
    return fit_fixture(7, n_zones=6, pop_range=(40, 120), survey_size=150,
                       constraints=(("age", 4), ("mode", 3), ("tenure", 3)))


@pytest.fixture(scope="session")
def default_fit() -> Fitted:
    return fit_fixture(3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
