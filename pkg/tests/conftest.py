import sys

import numpy as np
import pytest

from gaal import model as M
from gaal.numerics import RngStream


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_state(seed=0, d_img=5, d_tab=4, hidden=(6,), latent=4, n_classes=3, fused=False):
    """Random model with well under 500 parameters, biases randomised too."""
    chain = list(hidden) + [latent]
    st = M.init_params([d_img] + chain, [d_tab] + chain, n_classes, RngStream(seed, 9), fused=fused)
    g = np.random.default_rng(seed)
    for t in st.tensors():
        if t.ndim == 1:
            t[:] = g.normal(scale=0.3, size=t.shape)
    return st


def n_params(state):
    return sum(t.size for t in state.tensors())


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
