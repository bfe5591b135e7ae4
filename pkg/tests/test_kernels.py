import math
import os
import subprocess
import sys

import numpy as np
import pytest

from goalflow import _kernels as K

needs_numba = pytest.mark.skipif(K.NUMBA_KERNELS is None, reason="numba not installed")


def _x(shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape) * 3


def test_gelu_matches_scalar_formula():
    x = np.linspace(-6, 6, 41)
    ref = [0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v ** 3))) for v in x]
    np.testing.assert_allclose(K.NUMPY_KERNELS["gelu_fwd"](x), ref, rtol=1e-14, atol=1e-15)


def test_softmax_matches_scalar_formula():
    x = _x((3, 5))
    for row, p in zip(x, K.NUMPY_KERNELS["softmax_fwd"](x)):
        e = [math.exp(v) for v in row]
        np.testing.assert_allclose(p, [v / sum(e) for v in e], rtol=1e-14)


@needs_numba
@pytest.mark.parametrize("name", ["layer_norm", "softmax", "gelu"])
def test_numba_matches_numpy(name):
    x = _x((7, 13), 1)
    g = _x((7, 13), 2)
    nb, npk = K.NUMBA_KERNELS, K.NUMPY_KERNELS
    if name == "layer_norm":
        y1, r1 = nb["layer_norm_fwd"](x, 1e-5)
        y2, r2 = npk["layer_norm_fwd"](x, 1e-5)
        np.testing.assert_allclose(y1, y2, rtol=1e-12, atol=1e-13)
        np.testing.assert_allclose(r1, r2, rtol=1e-12)
        np.testing.assert_allclose(nb["layer_norm_bwd"](g, y1, r1), npk["layer_norm_bwd"](g, y2, r2),
                                   rtol=1e-11, atol=1e-12)
    elif name == "softmax":
        p1, p2 = nb["softmax_fwd"](x), npk["softmax_fwd"](x)
        np.testing.assert_allclose(p1, p2, rtol=1e-13, atol=1e-15)
        np.testing.assert_allclose(nb["softmax_bwd"](g, p1), npk["softmax_bwd"](g, p2), rtol=1e-12, atol=1e-14)
    else:
        np.testing.assert_allclose(nb["gelu_fwd"](x), npk["gelu_fwd"](x), rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(nb["gelu_bwd"](g, x), npk["gelu_bwd"](g, x), rtol=1e-11, atol=1e-13)


@needs_numba
@pytest.mark.parametrize("square", [False, True])
def test_draw_kernels_agree(square):
    gen = np.random.default_rng(3)
    cx, cy = gen.uniform(size=4), gen.uniform(size=4)
    a, b = np.zeros((16, 16)), np.zeros((16, 16))
    K.NUMBA_KERNELS["draw_discs"](a, cx, cy, 0.08, 0.6, square)
    K.NUMPY_KERNELS["draw_discs"](b, cx, cy, 0.08, 0.6, square)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)
    pts = gen.uniform(size=(4, 3))
    a, b = np.zeros((16, 16)), np.zeros((16, 16))
    K.NUMBA_KERNELS["draw_segments"](a, pts[0], pts[1], pts[2], pts[3], 0.03, 0.3)
    K.NUMPY_KERNELS["draw_segments"](b, pts[0], pts[1], pts[2], pts[3], 0.03, 0.3)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)


def test_disc_coverage_is_bounded():
    img = np.zeros((16, 16))
    K.NUMPY_KERNELS["draw_discs"](img, np.array([0.5]), np.array([0.5]), 0.1, 1.0, False)
    assert img.max() == 1.0 and img.min() == 0.0
    # pixel centre exactly at the disc centre is fully covered, far corner is empty
    assert img[8, 8] == 1.0 and img[0, 0] == 0.0


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, GOALFLOW_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", "import goalflow; print(goalflow.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
