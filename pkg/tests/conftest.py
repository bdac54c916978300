from pathlib import Path

import numpy as np
import pytest

from stratakv.chunker import segment_levels
from stratakv.kv_index import IndexConfig, build_index
from stratakv.workload import WorkloadSpec, gen_clustered_workload


@pytest.fixture(scope="session")
def small_workload():
    return gen_clustered_workload(WorkloadSpec(n_tokens=4096, d=32, query_count=40, seed=5))


@pytest.fixture(scope="session")
def small_index_factory(small_workload):
    def make(**cfg):
        wl = small_workload
        return build_index(wl.store(), segment_levels(wl.boundaries), IndexConfig(**cfg))

    return make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def corpus_path():
    return Path(__file__).parent / "data" / "corpus.md"


# acceptance results, printed once at the end of the session
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    def record(number: int, name: str, passed: bool, detail: str = "") -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {name}"
        if detail:
            line += f" ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
