from __future__ import annotations

import contextlib

import numpy as np
import pytest

from nesyfatigue.dataio import SyntheticCohortSpec, generate_synthetic_cohort
from nesyfatigue.features import extract_cohort

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture(scope="session")
def cohort_spec():
    return SyntheticCohortSpec(n_subjects=6, concept_effect_sizes=(1.5,) * 4, seed=42)


@pytest.fixture(scope="session")
def sessions(cohort_spec):
    return generate_synthetic_cohort(cohort_spec)


@pytest.fixture(scope="session")
def table(sessions):
    return extract_cohort(sessions)


@pytest.fixture(scope="session")
def null_table():
    return extract_cohort(generate_synthetic_cohort(
        SyntheticCohortSpec(n_subjects=6, concept_effect_sizes=(0.0,) * 4, seed=42)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def criterion():
    """Context manager recording PASS/FAIL for an acceptance criterion."""

    @contextlib.contextmanager
    def record(number, title):
        detail = {"text": ""}
        try:
            yield detail
        except BaseException:
            _CRITERIA[number] = (title, False, detail["text"])
            raise
        _CRITERIA[number] = (title, True, detail["text"])

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, text = _CRITERIA[number]
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{text}]" if text else ""))
