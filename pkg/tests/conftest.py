import sys

import numpy as np
import pytest

from goalflow.bundle import AEConfig, WMConfig, init_bundle
from goalflow.msth import MSTHParams

TINY_MSTH = MSTHParams(K=6, P=2, r=1, M=2)


def tiny_bundle(seed=0, randomize=True, pos_emb=True):
    """A few-hundred-parameter bundle; output layers are re-drawn so no
    gradient path is trivially zero."""
    wm = WMConfig(G=8, d_z=4, L=2, width=8, heads=2, n_frames=4, n_v=3, t_dim=4, pos_emb=pos_emb)
    ae = AEConfig(L=2, width=4, heads=2, n_actions=4, n_a=3, p_exec=2, pos_emb=pos_emb)
    b = init_bundle(wm, ae, TINY_MSTH, seed=seed)
    if randomize:
        gen = np.random.default_rng(seed + 100)
        b.params = {k: v + 0.3 * gen.normal(size=v.shape) for k, v in b.params.items()}
    return b


@pytest.fixture
def tiny():
    return tiny_bundle()


def pytest_terminal_summary(terminalreporter):
    # one line per acceptance criterion, in order
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
