import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from tierflow.tier import Tier, TierKind, TierSpec  # noqa: E402

MB = 1e6

# (criterion number, title, passed, detail) collected by test_acceptance
ACCEPTANCE_RESULTS: list = []


def mem_tier(tier_id, read_mbps, write_mbps=None):
    write_mbps = read_mbps if write_mbps is None else write_mbps
    return Tier(TierSpec(tier_id, TierKind.MEM_THROTTLED,
                         throttle_read_bw=read_mbps * MB,
                         throttle_write_bw=write_mbps * MB))


@pytest.fixture(autouse=True)
def _isolated_lock_dir(tmp_path, monkeypatch):
    lock_dir = tmp_path / "locks"
    lock_dir.mkdir()
    monkeypatch.setenv("TIERFLOW_LOCK_DIR", str(lock_dir))
    return lock_dir


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(
            f"criterion {num:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
