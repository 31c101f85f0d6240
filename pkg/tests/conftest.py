import numpy as np
import pytest

from fastadvprop.data import synth_blobs
from fastadvprop.nn import build_reference_cnn


@pytest.fixture
def tiny_ds():
    return synth_blobs(96, classes=4, shape=(1, 8, 8), separation=1.5, seed=3)


@pytest.fixture
def tiny_net():
    return build_reference_cnn(in_shape=(1, 8, 8), classes=4, widths=(4, 6), seed=11)


@pytest.fixture
def tiny_net64():
    return build_reference_cnn(in_shape=(1, 8, 8), classes=4, widths=(3, 4), seed=5, dtype=np.float64)


# -- acceptance summary --------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
