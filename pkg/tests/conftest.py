from __future__ import annotations

import numpy as np
import pytest

from quality_alloc.model import canonical_economy


@pytest.fixture
def e0():
    """Two exponential types (0.1, 2.0) on the uniform supply of height 0.3 on [0, 5]."""
    return canonical_economy(0.1, 2.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def criterion(request):
    """Record sub-results for an acceptance criterion: ``criterion(n, label, ok, detail)``."""
    store = request.config.stash[_RESULTS]

    def record(number: int, label: str, ok: bool, detail: str = "") -> bool:
        store.setdefault(number, []).append((label, bool(ok), detail))
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_RESULTS, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        parts = store[number]
        ok = all(p[1] for p in parts)
        detail = "; ".join(
            f"{'' if good else '[fail] '}{label}: {d}" for label, good, d in parts
        )
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
