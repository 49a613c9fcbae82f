import re

import numpy as np
import pytest

from vocabrl import tensor as T
from vocabrl.corpus import SyntheticSpec, build_vocab, make_examples, make_synthetic_task


@pytest.fixture
def f64():
    """Run the test with 64-bit default precision and a clean graph."""
    T.get_graph().reset()
    with T.default_dtype(np.float64):
        yield
    T.get_graph().reset()


@pytest.fixture(autouse=True)
def _clean_graph():
    T.get_graph().reset()
    yield
    T.get_graph().reset()


@pytest.fixture(scope="session")
def tiny_task():
    """A small synthetic translation task: (train, dev, src_vocab, tgt_vocab)."""
    spec = SyntheticSpec(src_vocab=30, tgt_vocab=30, n_train=300, n_dev=40, n_test=40,
                         min_len=2, max_len=6, seed=3)
    tr, dv, _ = make_synthetic_task(spec)
    sv = build_vocab([s for s, _ in tr])
    tv = build_vocab([t for _, t in tr])
    train, _ = make_examples(tr, sv, tv, 50)
    dev, _ = make_examples(dv, sv, tv, 50, start_id=10_000)
    return train, dev, sv, tv


# ---------------------------------------------------------------------------
# acceptance summary: one pass/fail line per criterion test

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_acceptance_lines: dict[int, str] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m or not (report.when == "call" or report.failed):
        return
    num, title = int(m.group(1)), m.group(2).replace("_", " ")
    detail = "; ".join(f"{k}={v}" for k, v in report.user_properties)
    status = "PASS" if report.passed else "FAIL"
    _acceptance_lines[num] = f"criterion {num:2d} {status}  {title}" + (f"  [{detail}]" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_lines:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_acceptance_lines):
        terminalreporter.write_line(_acceptance_lines[num])
