import os
import sys
from pathlib import Path

# Small tensors: BLAS thread pools only add contention, and single-threaded
# kernels keep results reproducible no matter the host. Must happen before
# numpy loads.
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

sys.path.insert(0, str(Path(__file__).parent))

import pytest  # noqa: E402

from prunetect import forge  # noqa: E402

ACCEPT_FILE = "test_acceptance.py"
_acceptance_results = []


@pytest.fixture(scope="session")
def jobs():
    return forge.default_jobs()


@pytest.fixture(scope="session")
def mini_corpus(tmp_path_factory, jobs):
    """Small shared corpus for CLI/QA/probe tests: 2 architectures x 4 models."""
    out = tmp_path_factory.mktemp("mini_corpus")
    rows = forge.forge_corpus(out, ["toycnn-a", "toycnn-b"], 4, 0.5, seed=11,
                              jobs=jobs)
    assert all(r["status"] == "ok" for r in rows)
    return out


@pytest.fixture(scope="session")
def accept_corpus(tmp_path_factory, jobs):
    """The acceptance corpus: 2 architectures x 20 models, 50:50, fixed seed."""
    out = tmp_path_factory.mktemp("accept_corpus")
    forge.forge_corpus(out, ["toycnn-a", "toycnn-b"], 20, 0.5, seed=1, jobs=jobs)
    return out


def pytest_runtest_logreport(report):
    if report.when == "call" and ACCEPT_FILE in str(report.fspath):
        _acceptance_results.append((report.nodeid.split("::")[-1], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _acceptance_results:
        terminalreporter.write_line(f"{outcome.upper():6s}  {name}")
