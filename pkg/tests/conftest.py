import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gwmerge import gw

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


class CouplingLedger:
    """Session-wide record of marginal violations over every Coupling constructed."""

    def __init__(self):
        self.count = 0
        self.worst = 0.0
        self.violations = 0
        self.rejected = 0  # constructions refused by the invariant check, never returned

    def record(self, c, accepted: bool):
        if not accepted:
            self.rejected += 1
            return
        v = max(
            float(np.max(np.abs(c.plan.sum(1) - c.row_marginal))),
            float(np.max(np.abs(c.plan.sum(0) - c.col_marginal))),
        )
        self.count += 1
        self.worst = max(self.worst, v)
        if v > gw.MARGINAL_ATOL or np.any(c.plan < 0):
            self.violations += 1


LEDGER = CouplingLedger()
_orig_post_init = gw.Coupling.__post_init__


def _recording_post_init(self):
    try:
        _orig_post_init(self)
    except Exception:
        LEDGER.record(self, accepted=False)
        raise
    LEDGER.record(self, accepted=True)


gw.Coupling.__post_init__ = _recording_post_init


@pytest.fixture(scope="session")
def coupling_ledger():
    return LEDGER


def pytest_terminal_summary(terminalreporter):
    terminalreporter.write_line(
        f"couplings checked: {LEDGER.count}, worst marginal error {LEDGER.worst:.3e}, "
        f"violations > {gw.MARGINAL_ATOL:g}: {LEDGER.violations} (rejected at construction: {LEDGER.rejected})"
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_sessionfinish(session, exitstatus):
    # a coupling that left the solver off its marginals fails the whole run
    if LEDGER.violations and exitstatus == 0:
        session.exitstatus = 1
