import re

import numpy as np
import pytest

from attnlab.data import make_toy_data
from attnlab.model import AttentionModel, ModelConfig

_CRITERION = re.compile(r"test_c(\d\d)_")
_results: dict = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m or "test_acceptance" not in report.nodeid:
        return
    num = int(m.group(1))
    if report.when == "call" or report.failed or report.skipped:
        prev = _results.get(num, "PASS")
        state = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        if report.when == "call" or state != "PASS":
            _results[num] = state if prev == "PASS" else prev


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_results):
        terminalreporter.write_line(f"criterion {num:2d}: {_results[num]}")


@pytest.fixture(scope="session")
def toy_small(tmp_path_factory):
    """A 20/5 toy corpus on disk, shared by the slower integration tests."""
    return make_toy_data(tmp_path_factory.mktemp("toy_small"), num_train=20, num_dev=5, seed=0)


def random_model(seed: int, vocab: int = 5, input_dim: int = 3, units: int = 4) -> AttentionModel:
    mc = ModelConfig(vocab_size=vocab, input_dim=input_dim, enc_layers=2, enc_units=units, pooling=(2,),
                     dec_units=units + 2)
    return AttentionModel.create(mc, seed).as_dtype(np.float64)
