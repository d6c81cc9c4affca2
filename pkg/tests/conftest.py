import numpy as np
import pytest

from mext.model import ModelConfig, init


@pytest.fixture
def tiny_cfg():
    return ModelConfig(k=3, hidden=16, heads=2, ffn=32, vocab=30, classes=2, max_len=8, seed=3)


@pytest.fixture
def tiny_store(tiny_cfg):
    return init(tiny_cfg)


@pytest.fixture
def tokens():
    rng = np.random.default_rng(5)
    tok = rng.integers(4, 30, size=(4, 7)).astype(np.int32)
    tok[:, 0] = 2
    tok[1, 5:] = 0
    tok[3, 3:] = 0
    return tok


# -- acceptance reporting -----------------------------------------------------

_ACCEPTANCE: dict[int, str] = {}


def report(criterion: int, ok: bool, detail: str) -> None:
    """Record one acceptance line; printed in the terminal summary."""
    _ACCEPTANCE[criterion] = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(_ACCEPTANCE[criterion])


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[key])
