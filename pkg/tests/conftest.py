import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from graph_retarget.denoiser import DenoiserConfig
from graph_retarget.synthetic import biped, humanoid, walking_clip

TINY = DenoiserConfig(latent=32, heads=4, layers=2, ffn_dim=64, dropout=0.0,
                      temporal_window=7, t_max=16, j_max=8, cross_heads=6)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def biped_pair():
    src, dst = biped("biped"), biped("biped_x2", scale=2.0)
    ref = walking_clip(src, 12, t_max=16, j_max=8)
    return src, dst, ref


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def robots():
    return biped("biped"), humanoid("humanoid")


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record a one-line verdict for an acceptance criterion, then assert it."""

    def record(label: str, ok: bool, detail: str) -> None:
        ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {label}: {detail}")
        print(ACCEPTANCE_LINES[-1])
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
