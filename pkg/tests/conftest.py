import numpy as np
import pytest
import torch
from hypothesis import settings

torch.set_num_threads(1)
settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

ACCEPTANCE = []


def record(criterion: int, passed: bool, detail: str, gating: bool = True) -> None:
    status = ("PASS" if passed else "FAIL") if gating else ("HOLDS" if passed else "DOES NOT HOLD")
    tag = "" if gating else " [non-gating]"
    line = f"criterion {criterion}{tag}: {status} - {detail}"
    ACCEPTANCE.append((criterion, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE, key=lambda x: x[0]):
            terminalreporter.write_line(line)


def unit_rows(raw):
    raw = np.asarray(raw, dtype=np.float64)
    return np.sqrt(raw.shape[-1]) * raw / np.linalg.norm(raw, axis=-1, keepdims=True)


@pytest.fixture
def rng():
    from cdcd.numerics import RngStream

    return RngStream(1234, 0)
