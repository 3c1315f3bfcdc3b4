import numpy as np
import pytest

from embedspace.data import EmbeddingSet


def make_set(vectors, speakers=None, datasets=None, prefix="u"):
    vectors = np.asarray(vectors, dtype=np.float64)
    n = len(vectors)
    ids = [f"{prefix}{i:04d}" for i in range(n)]
    speakers = list(speakers) if speakers is not None else ["unknown"] * n
    datasets = list(datasets) if datasets is not None else ["d0"] * n
    return EmbeddingSet(ids, [str(s) for s in speakers], datasets, vectors)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    rows = []
    for status in ("passed", "failed"):
        for rep in terminalreporter.stats.get(status, []):
            if rep.when == "call" and "test_acceptance.py::test_criterion_" in rep.nodeid:
                name = rep.nodeid.split("::")[-1][len("test_criterion_"):]
                rows.append((name, "PASS" if status == "passed" else "FAIL"))
    if rows:
        terminalreporter.section("acceptance criteria")
        for name, status in sorted(rows):
            num, _, label = name.partition("_")
            terminalreporter.write_line(f"criterion {int(num):2d} {status}  {label}")
