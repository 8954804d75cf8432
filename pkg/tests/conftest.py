"""Shared test setup: single-threaded BLAS and small-world helpers."""

import os

# pin thread pools before numpy loads anywhere; determinism tests need it
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from polarloc.synthetic import SyntheticWorldSpec

# verdict lines from the acceptance tests, replayed after the test summary
# so they stay visible even though pytest captures stdout of passing tests
ACCEPTANCE_LINES = []


def record_acceptance(line: str):
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_world_spec(seed=5, **overrides):
    """Small, fast synthetic world for unit tests (full-size scans)."""
    fields = dict(
        extent=220.0,
        landmark_count=90,
        train_points=8,
        train_passes=2,
        eval_points=12,
        train_spacing=25.0,
        eval_spacing=13.0,
        seed=seed,
    )
    fields.update(overrides)
    return SyntheticWorldSpec(**fields)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    """A generated on-disk dataset shared by IO-heavy tests."""
    from polarloc.data import write_traversal
    from polarloc.synthetic import generate_synthetic

    root = tmp_path_factory.mktemp("tiny-ds")
    train, map_t, query = generate_synthetic(tiny_world_spec())
    for t in (train, map_t, query):
        write_traversal(root / t.name, t)
    return root
