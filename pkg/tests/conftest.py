import numpy as np
import pytest

from kbformer.folding import random_cross_params, random_kb
from kbformer.rng import Rng


def bits(a):
    """Raw bytes of a float64 array, for bitwise comparisons."""
    return np.ascontiguousarray(a, dtype=np.float64).tobytes()


@pytest.fixture
def cross_instance():
    """Random H, KB and cross-attention params at a small mixed shape."""

    def make(seed=0, d=8, d_e=6, size=12, d_k=4, n=5):
        rng = Rng(seed)
        p = random_cross_params(rng, d, d_e, d_k)
        kb = random_kb(rng, size, d_e)
        return rng.normal_matrix(n, d), kb, p

    return make


_ACCEPTANCE: list[str] = []


def record_acceptance(line: str) -> None:
    _ACCEPTANCE.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("] ")[1].split(".")[0])):
            terminalreporter.write_line(line)
