"""Hot inner loops: row-wise normalisation, softmax, GELU and the disc/segment
rasteriser used by the environments.

Every kernel exists twice: a pure-numpy version and a numba ``@njit`` version
with the same signature. The public names at the bottom of this module are
bound to one of the two at import time. Set ``GOALFLOW_NUMBA=0`` to force the
numpy path (numba is also skipped when it cannot be imported).

All kernels work on C-contiguous float64 arrays. 2-D kernels treat the last
axis as the feature axis; callers reshape.
"""
import math
import os

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


# ---------------------------------------------------------------------------
# numpy implementations

def np_layer_norm_fwd(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[:, 0]


def np_layer_norm_bwd(g, y, rstd):
    gm = g.mean(axis=-1, keepdims=True)
    gym = (g * y).mean(axis=-1, keepdims=True)
    return rstd[:, None] * (g - gm - y * gym)


def np_softmax_fwd(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def np_softmax_bwd(g, p):
    return p * (g - (g * p).sum(axis=-1, keepdims=True))


def np_gelu_fwd(x):
    # in-place chain: x ** 3 and fresh temporaries dominate otherwise
    u = x * x
    u *= _GELU_A
    u += 1.0
    u *= x
    u *= _GELU_C
    np.tanh(u, out=u)
    u += 1.0
    u *= x
    u *= 0.5
    return u


def np_gelu_bwd(g, x):
    x2 = x * x
    th = x2 * _GELU_A
    th += 1.0
    th *= x
    th *= _GELU_C
    np.tanh(th, out=th)
    du = x2
    du *= 3.0 * _GELU_A
    du += 1.0
    du *= _GELU_C
    du *= x
    du *= 1.0 - th * th
    du += 1.0 + th
    du *= 0.5
    du *= g
    return du


def np_draw_discs(img, cx, cy, radius, intensity, square):
    """Alpha-composite anti-aliased discs (or squares) onto ``img`` in place.

    Positions and radius are in workspace units ([0,1]); coverage ramps
    linearly over one pixel at the boundary.
    """
    g = img.shape[0]
    centers = (np.arange(g) + 0.5) / g
    for k in range(cx.shape[0]):
        dx = np.abs(centers[None, :] - cx[k])
        dy = np.abs(centers[:, None] - cy[k])
        if square:
            d = np.maximum(dx, dy)
        else:
            d = np.sqrt(dx * dx + dy * dy)
        cov = np.clip((radius - d) * g + 0.5, 0.0, 1.0)
        img *= 1.0 - cov
        img += intensity * cov


def np_draw_segments(img, x0, y0, x1, y1, half_width, intensity):
    g = img.shape[0]
    centers = (np.arange(g) + 0.5) / g
    px = np.broadcast_to(centers[None, :], (g, g))
    py = np.broadcast_to(centers[:, None], (g, g))
    for k in range(x0.shape[0]):
        ex = x1[k] - x0[k]
        ey = y1[k] - y0[k]
        ll = ex * ex + ey * ey
        if ll > 0.0:
            s = np.clip(((px - x0[k]) * ex + (py - y0[k]) * ey) / ll, 0.0, 1.0)
        else:
            s = np.zeros((g, g))
        qx = px - (x0[k] + s * ex)
        qy = py - (y0[k] + s * ey)
        d = np.sqrt(qx * qx + qy * qy)
        cov = np.clip((half_width - d) * g + 0.5, 0.0, 1.0)
        img *= 1.0 - cov
        img += intensity * cov


# ---------------------------------------------------------------------------
# numba implementations

try:
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None

if njit is not None:

    @njit(cache=True, inline="always")
    def _tanh(u):
        # exp-based; libm tanh is the bottleneck of the scalar loop
        e = math.exp(-2.0 * abs(u))
        t = (1.0 - e) / (1.0 + e)
        return -t if u < 0.0 else t

    @njit(cache=True)
    def layer_norm_fwd(x, eps):
        n, d = x.shape
        y = np.empty_like(x)
        rstd = np.empty(n)
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                t = x[i, j] - mu
                var += t * t
            var /= d
            r = 1.0 / math.sqrt(var + eps)
            rstd[i] = r
            for j in range(d):
                y[i, j] = (x[i, j] - mu) * r
        return y, rstd

    @njit(cache=True)
    def layer_norm_bwd(g, y, rstd):
        n, d = g.shape
        gx = np.empty_like(g)
        for i in range(n):
            gm = 0.0
            gym = 0.0
            for j in range(d):
                gm += g[i, j]
                gym += g[i, j] * y[i, j]
            gm /= d
            gym /= d
            for j in range(d):
                gx[i, j] = rstd[i] * (g[i, j] - gm - y[i, j] * gym)
        return gx

    @njit(cache=True)
    def softmax_fwd(x):
        n, d = x.shape
        p = np.empty_like(x)
        for i in range(n):
            m = x[i, 0]
            for j in range(1, d):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(d):
                e = math.exp(x[i, j] - m)
                p[i, j] = e
                s += e
            for j in range(d):
                p[i, j] /= s
        return p

    @njit(cache=True)
    def softmax_bwd(g, p):
        n, d = g.shape
        gx = np.empty_like(g)
        for i in range(n):
            dot = 0.0
            for j in range(d):
                dot += g[i, j] * p[i, j]
            for j in range(d):
                gx[i, j] = p[i, j] * (g[i, j] - dot)
        return gx

    @njit(cache=True)
    def gelu_fwd(x):
        flat = x.ravel()
        out = np.empty_like(flat)
        for i in range(flat.shape[0]):
            v = flat[i]
            out[i] = 0.5 * v * (1.0 + _tanh(_GELU_C * (v + _GELU_A * v * v * v)))
        return out.reshape(x.shape)

    @njit(cache=True)
    def gelu_bwd(g, x):
        fx = x.ravel()
        fg = g.ravel()
        out = np.empty_like(fx)
        for i in range(fx.shape[0]):
            v = fx[i]
            th = _tanh(_GELU_C * (v + _GELU_A * v * v * v))
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
            out[i] = fg[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)
        return out.reshape(x.shape)

    @njit(cache=True)
    def draw_discs(img, cx, cy, radius, intensity, square):
        g = img.shape[0]
        for k in range(cx.shape[0]):
            # only pixels within radius + 1px can be touched
            lo_x = max(0, int((cx[k] - radius) * g) - 1)
            hi_x = min(g, int((cx[k] + radius) * g) + 2)
            lo_y = max(0, int((cy[k] - radius) * g) - 1)
            hi_y = min(g, int((cy[k] + radius) * g) + 2)
            for r in range(lo_y, hi_y):
                py = (r + 0.5) / g
                for c in range(lo_x, hi_x):
                    px = (c + 0.5) / g
                    dx = abs(px - cx[k])
                    dy = abs(py - cy[k])
                    if square:
                        d = max(dx, dy)
                    else:
                        d = math.sqrt(dx * dx + dy * dy)
                    cov = min(1.0, max(0.0, (radius - d) * g + 0.5))
                    img[r, c] = img[r, c] * (1.0 - cov) + intensity * cov

    @njit(cache=True)
    def draw_segments(img, x0, y0, x1, y1, half_width, intensity):
        g = img.shape[0]
        for k in range(x0.shape[0]):
            ex = x1[k] - x0[k]
            ey = y1[k] - y0[k]
            ll = ex * ex + ey * ey
            for r in range(g):
                py = (r + 0.5) / g
                for c in range(g):
                    px = (c + 0.5) / g
                    s = 0.0
                    if ll > 0.0:
                        s = ((px - x0[k]) * ex + (py - y0[k]) * ey) / ll
                        s = min(1.0, max(0.0, s))
                    qx = px - (x0[k] + s * ex)
                    qy = py - (y0[k] + s * ey)
                    d = math.sqrt(qx * qx + qy * qy)
                    cov = min(1.0, max(0.0, (half_width - d) * g + 0.5))
                    img[r, c] = img[r, c] * (1.0 - cov) + intensity * cov

    NUMBA_KERNELS = {
        "layer_norm_fwd": layer_norm_fwd,
        "layer_norm_bwd": layer_norm_bwd,
        "softmax_fwd": softmax_fwd,
        "softmax_bwd": softmax_bwd,
        "gelu_fwd": gelu_fwd,
        "gelu_bwd": gelu_bwd,
        "draw_discs": draw_discs,
        "draw_segments": draw_segments,
    }
else:  # pragma: no cover
    NUMBA_KERNELS = None


NUMPY_KERNELS = {
    "layer_norm_fwd": np_layer_norm_fwd,
    "layer_norm_bwd": np_layer_norm_bwd,
    "softmax_fwd": np_softmax_fwd,
    "softmax_bwd": np_softmax_bwd,
    "gelu_fwd": np_gelu_fwd,
    "gelu_bwd": np_gelu_bwd,
    "draw_discs": np_draw_discs,
    "draw_segments": np_draw_segments,
}

_want_numba = os.environ.get("GOALFLOW_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")
BACKEND = "numba" if (_want_numba and NUMBA_KERNELS is not None) else "numpy"
_active = NUMBA_KERNELS if BACKEND == "numba" else NUMPY_KERNELS

layer_norm_fwd = _active["layer_norm_fwd"]
layer_norm_bwd = _active["layer_norm_bwd"]
softmax_fwd = _active["softmax_fwd"]
softmax_bwd = _active["softmax_bwd"]
gelu_fwd = _active["gelu_fwd"]
gelu_bwd = _active["gelu_bwd"]
draw_discs = _active["draw_discs"]
draw_segments = _active["draw_segments"]
