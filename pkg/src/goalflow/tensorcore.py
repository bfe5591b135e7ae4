"""Small deterministic reverse-mode autodiff over float64 numpy arrays.

Ops executed while a :class:`Tape` is active are recorded if any input
requires a gradient; :func:`backward` replays the tape in reverse. Outside a
tape the same ops run as plain numpy (inference path).

Shapes follow numpy conventions: leading axes are batch axes and broadcast
like numpy. Gradients of broadcast operands are summed back to the operand
shape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def rng(seed: int, *stream) -> np.random.Generator:
    """Counter-based generator for ``(seed, *stream)``.

    Distinct stream tuples give independent Philox streams, so per-episode and
    per-batch randomness never depends on call order elsewhere.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(s) & 0xFFFFFFFF for s in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def param(cls, data, name):
        return cls(data, requires_grad=True, name=name)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, idx):
        return take(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    vjp: object  # g -> tuple of input grads (None where not needed)


@dataclass
class Tape:
    """Linear record of executed ops; use as a context manager."""

    nodes: list = field(default_factory=list)
    _ids: set = field(default_factory=set)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def record(self, out, inputs, vjp):
        self.nodes.append(_Node(out, inputs, vjp))
        self._ids.add(id(out))

    def __contains__(self, t):
        return id(t) in self._ids

    def __len__(self):
        return len(self.nodes)


_TAPES: list = []


def _emit(data, inputs, vjp) -> Tensor:
    """Wrap an op result; record on the active tape when any input needs grad."""
    tape = _TAPES[-1] if _TAPES else None
    need = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=need)
    if need:
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# ops

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: dimension mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _emit(ad @ bd, (a, b), vjp)


def linear(x, w, b=None) -> Tensor:
    """``x @ w.T + b`` with ``w`` shaped [d_out, d_in]."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    y = xd @ wd.T
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (wd.shape[0],):
            raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
        y = y + b.data
        inputs = (x, w, b)

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd if x.requires_grad else None
        gw = g2.T @ xd.reshape(-1, xd.shape[-1]) if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _emit(y, inputs, vjp)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _emit(ad * bd, (a, b), vjp)


def scale(t, c: float) -> Tensor:
    t = as_tensor(t)
    c = float(c)
    return _emit(t.data * c, (t,), lambda g: (g * c,))


def tanh_act(t) -> Tensor:
    t = as_tensor(t)
    y = np.tanh(t.data)
    return _emit(y, (t,), lambda g: (g * (1.0 - y * y),))


def gelu_act(t) -> Tensor:
    """GELU, tanh approximation."""
    t = as_tensor(t)
    x = np.ascontiguousarray(t.data)
    return _emit(K.gelu_fwd(x), (t,), lambda g: (K.gelu_bwd(np.ascontiguousarray(g), x),))


def layer_norm(t, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean, unit variance (no affine).

    A constant row maps to zeros: ``eps`` floors the variance.
    """
    if not eps > 0:
        raise ValueError(f"layer_norm: eps must be positive, got {eps}")
    t = as_tensor(t)
    shape = t.shape
    x2 = np.ascontiguousarray(t.data.reshape(-1, shape[-1]))
    y2, rstd = K.layer_norm_fwd(x2, float(eps))

    def vjp(g):
        return (K.layer_norm_bwd(np.ascontiguousarray(g.reshape(-1, shape[-1])), y2, rstd).reshape(shape),)

    return _emit(y2.reshape(shape), (t,), vjp)


def softmax_lastdim(t) -> Tensor:
    t = as_tensor(t)
    shape = t.shape
    p2 = K.softmax_fwd(np.ascontiguousarray(t.data.reshape(-1, shape[-1])))

    def vjp(g):
        return (K.softmax_bwd(np.ascontiguousarray(g.reshape(-1, shape[-1])), p2).reshape(shape),)

    return _emit(p2.reshape(shape), (t,), vjp)


def attention(q, k, v) -> Tensor:
    """Scaled dot-product attention ``softmax(q kᵀ / √d) v`` over the last two axes."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim < 2 or q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: dimension mismatch q{q.shape} k{k.shape} v{v.shape}")
    qd, kd, vd = q.data, k.data, v.data
    c = 1.0 / math.sqrt(qd.shape[-1])
    s = (qd @ np.swapaxes(kd, -1, -2)) * c
    sshape = s.shape
    p = K.softmax_fwd(np.ascontiguousarray(s.reshape(-1, sshape[-1]))).reshape(sshape)
    out = p @ vd

    def vjp(g):
        gv = _unbroadcast(np.swapaxes(p, -1, -2) @ g, vd.shape) if v.requires_grad else None
        gq = gk = None
        if q.requires_grad or k.requires_grad:
            gp = g @ np.swapaxes(vd, -1, -2)
            gs = K.softmax_bwd(np.ascontiguousarray(gp.reshape(-1, sshape[-1])),
                               np.ascontiguousarray(p.reshape(-1, sshape[-1]))).reshape(sshape) * c
            if q.requires_grad:
                gq = _unbroadcast(gs @ kd, qd.shape)
            if k.requires_grad:
                gk = _unbroadcast(np.swapaxes(gs, -1, -2) @ qd, kd.shape)
        return gq, gk, gv

    return _emit(out, (q, k, v), vjp)


def reshape(t, shape) -> Tensor:
    t = as_tensor(t)
    old = t.shape
    return _emit(t.data.reshape(shape), (t,), lambda g: (g.reshape(old),))


def transpose(t, axes) -> Tensor:
    t = as_tensor(t)
    inv = np.argsort(axes)
    return _emit(np.transpose(t.data, axes), (t,), lambda g: (np.transpose(g, inv),))


def concat(ts, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _emit(data, tuple(ts), vjp)


def take(t, idx) -> Tensor:
    """Basic (slice/int) indexing."""
    t = as_tensor(t)
    shape = t.shape

    def vjp(g):
        out = np.zeros(shape)
        out[idx] = g
        return (out,)

    return _emit(t.data[idx], (t,), vjp)


def tsum(t, axis=None) -> Tensor:
    t = as_tensor(t)
    shape = t.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.sum(t.data, axis=axis), (t,), vjp)


def mean(t, axis=None) -> Tensor:
    t = as_tensor(t)
    n = t.data.size if axis is None else t.shape[axis]
    return scale(tsum(t, axis), 1.0 / n)


def mse(pred, target) -> Tensor:
    """Mean of squared differences over every element."""
    d = sub(pred, target)
    return mean(mul(d, d))


# ---------------------------------------------------------------------------
# gradients

def backward(loss: Tensor, tape: Tape, params=None) -> dict:
    """Gradients of scalar ``loss`` for every named leaf that requires grad.

    ``params`` (optional iterable of parameter Tensors) guarantees an entry
    for each listed parameter; unreached ones get zeros. Keys are parameter
    names, or ``id(tensor)`` for unnamed leaves.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss not in tape:
        raise ValueError("backward: loss was not produced on this tape")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp not in tape:
                leaves[key] = inp
    out = {}
    for key, leaf in leaves.items():
        out[leaf.name if leaf.name is not None else key] = grads[key]
    if params is not None:
        for p in params:
            k = p.name if p.name is not None else id(p)
            if k not in out:
                out[k] = np.zeros_like(p.data)
    return out


def finite_diff_check(f, params: dict, h: float = 1e-5, floor: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a dict name -> Tensor to a scalar Tensor. ``params`` maps
    name -> ndarray. Relative error per coordinate is
    ``|a - b| / max(|a|, |b|, floor)``.
    """
    if not h > 0:
        raise ValueError(f"finite_diff_check: h must be positive, got {h}")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    with Tape() as tape:
        tens = {k: Tensor.param(v, k) for k, v in base.items()}
        loss = f(tens)
    grads = backward(loss, tape, tens.values())

    def evaluate(vals):
        val = f({k: Tensor(v, name=k) for k, v in vals.items()}).data
        if not np.all(np.isfinite(val)):
            raise NonFiniteError("finite_diff_check: non-finite function value")
        return float(val)

    worst = 0.0
    for name, arr in base.items():
        flat = arr.reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = evaluate(base)
            flat[i] = old - h
            fm = evaluate(base)
            flat[i] = old
            num = (fp - fm) / (2.0 * h)
            err = abs(num - gflat[i]) / max(abs(num), abs(gflat[i]), floor)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# optimisation

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: dict, grads: dict, state: OptimizerState) -> dict:
    """One Adam step. Returns new parameter arrays; ``state`` is advanced in place.

    Only names present in ``grads`` are updated.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    out = dict(params)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"optimizer_step: grad {g.shape} vs param {p.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"optimizer_step: non-finite gradient for {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        out[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


# ---------------------------------------------------------------------------
# low-rank adapters

@dataclass
class AdapterizedWeight:
    base: np.ndarray  # [d_out, d_in]
    down: np.ndarray  # [rank, d_in]
    up: np.ndarray  # [d_out, rank]
    scale: float

    @property
    def rank(self):
        return self.down.shape[0]

    def validate(self):
        d_out, d_in = self.base.shape
        r = self.down.shape[0]
        if r < 1 or self.down.shape != (r, d_in) or self.up.shape != (d_out, r):
            raise ShapeError(
                f"adapter: base {self.base.shape}, down {self.down.shape}, up {self.up.shape} inconsistent")


def init_adapter(base: np.ndarray, rank: int, gen: np.random.Generator) -> AdapterizedWeight:
    """Adapter with small uniform ``down``, zero ``up`` and scale 1/rank."""
    d_out, d_in = base.shape
    if rank < 1:
        raise ShapeError(f"adapter rank must be >= 1, got {rank}")
    bound = 1.0 / math.sqrt(d_in)
    down = gen.uniform(-bound, bound, size=(rank, d_in))
    return AdapterizedWeight(base, down, np.zeros((d_out, rank)), 1.0 / rank)


def adapter_effective(w: AdapterizedWeight, down=None, up=None) -> Tensor:
    """``base + scale * up @ down`` on the tape.

    ``down``/``up`` may be passed as parameter Tensors so gradients reach
    them; ``base`` always enters as a constant.
    """
    w.validate()
    down = Tensor(w.down) if down is None else down
    up = Tensor(w.up) if up is None else up
    if not np.any(up.data) and not up.requires_grad:
        return Tensor(w.base)
    return add(Tensor(w.base), scale(matmul(up, down), w.scale))
