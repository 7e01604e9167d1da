import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

import ssdr.kernels as kernels  # noqa: E402


@pytest.fixture(autouse=True)
def checked_kernels():
    """Run every test with the finite-value assertions enabled."""
    old = kernels.CHECK_FINITE
    kernels.CHECK_FINITE = True
    yield
    kernels.CHECK_FINITE = old


def pytest_runtest_logreport(report):
    # One visible pass/fail line per acceptance criterion.
    if "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1].replace("test_", "", 1)
    if report.when == "call":
        print(f"\n[ACCEPTANCE] {name}: {'PASS' if report.passed else 'FAIL'}")
    elif report.when == "setup" and report.skipped:
        print(f"\n[ACCEPTANCE] {name}: SKIP (needs external assets)")
