"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Operations on :class:`Tensor` values are recorded on the innermost active
:class:`Tape` whenever at least one input participates in differentiation.
Outside a tape every primitive is a plain numpy evaluation, which is how the
flow runs at sampling time.

    >>> x = Tensor(3.0, requires_grad=True)
    >>> with Tape() as tape:
    ...     y = x * x
    >>> float(backward(tape, y)[x])
    6.0
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DegenerateBatchError, InvalidInputError, InvalidShapeError

__all__ = [
    "Tensor",
    "Tape",
    "BatchNormState",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "linear",
    "transpose",
    "reshape",
    "relu",
    "exp",
    "cos",
    "tsum",
    "mean",
    "mask_apply",
    "batchnorm",
    "getitem",
    "concat",
    "custom",
    "straight_through",
]

_state = threading.local()


def _tape_stack():
    st = getattr(_state, "stack", None)
    if st is None:
        st = _state.stack = []
    return st


def active_tape():
    st = _tape_stack()
    return st[-1] if st else None


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "name", "_recorded", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._recorded = False

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
        return f"Tensor(shape={self.data.shape}{tag})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    vjp: Callable


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in evaluation order, so inputs always precede the
    node that consumes them; :func:`backward` walks them in exact reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        st = _tape_stack()
        st.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out: Tensor, inputs, vjp):
        out._recorded = True
        self.nodes.append(_Node(out, tuple(inputs), vjp))


def _tracked(t) -> bool:
    return isinstance(t, Tensor) and (t.requires_grad or t._recorded)


def _emit(value, inputs, vjp) -> Tensor:
    out = Tensor(value)
    tape = active_tape()
    if tape is not None and any(_tracked(i) for i in inputs):
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise InvalidShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def mask_apply(a, mask) -> Tensor:
    """Elementwise product with a constant {0, 1} mask."""
    a = _as_tensor(a)
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    if not np.all((m == 0) | (m == 1)):
        raise InvalidInputError("mask_apply expects a {0,1} mask")
    _check_broadcast(a.data, m, "mask_apply")
    sa = a.shape
    return _emit(a.data * m, (a,), lambda g: (_unbroadcast(g * m, sa),))


def matmul(a, b) -> Tensor:
    """Batched matrix product following numpy broadcasting for >=2-D operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise InvalidShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise InvalidShapeError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        # stacked @ matrix: one GEMM over the flattened leading axes
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def vjp2(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _emit(out, (a, b), vjp2)

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _emit(ad @ bd, (a, b), vjp)


def linear(x, W, b) -> Tensor:
    """Fused ``x @ W + b`` for a 2-D weight and 1-D bias."""
    x, W, b = _as_tensor(x), _as_tensor(W), _as_tensor(b)
    if W.ndim != 2 or b.shape != (W.shape[1],) or x.shape[-1] != W.shape[0]:
        raise InvalidShapeError(f"linear: {x.shape} @ {W.shape} + {b.shape}")
    xd, Wd = x.data, W.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = (x2 @ Wd + b.data).reshape(xd.shape[:-1] + (Wd.shape[1],))

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        return (g2 @ Wd.T).reshape(xd.shape), x2.T @ g2, g2.sum(axis=0)

    return _emit(out, (x, W, b), vjp)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise InvalidShapeError(f"transpose: bad axes {axes} for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    sa = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise InvalidShapeError(f"reshape: cannot reshape {sa} to {shape}") from None
    return _emit(out, (a,), lambda g: (g.reshape(sa),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    on = a.data > 0  # subgradient 0 at exactly 0
    return _emit(a.data * on, (a,), lambda g: (g * on,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    return _emit(y, (a,), lambda g: (g * y,))


def cos(a) -> Tensor:
    a = _as_tensor(a)
    s = np.sin(a.data)
    return _emit(np.cos(a.data), (a,), lambda g: (-g * s,))


def tsum(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    sa = a.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, sa).copy(),)

    return _emit(a.data.sum(axis=axis), (a,), vjp)


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    sa = a.shape
    n = a.data.size if axis is None else np.prod([sa[i] for i in np.atleast_1d(axis)])

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, sa).copy(),)

    return _emit(a.data.mean(axis=axis), (a,), vjp)


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)
    sa = a.shape

    def vjp(g):
        out = np.zeros(sa)
        np.add.at(out, idx, g)
        return (out,)

    return _emit(a.data[idx], (a,), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise InvalidShapeError("concat: incompatible shapes") from None
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit(out, ts, lambda g: tuple(np.split(g, cuts, axis=axis)))


def custom(inputs, value, vjp) -> Tensor:
    """Record an externally computed value with a user-supplied VJP.

    ``vjp(g)`` must return one cotangent per input (``None`` to skip).
    """
    inputs = tuple(_as_tensor(i) for i in inputs)
    return _emit(np.asarray(value, dtype=np.float64), inputs, vjp)


def straight_through(a, fn) -> Tensor:
    """Apply a non-differentiable map ``fn`` with an identity gradient."""
    a = _as_tensor(a)
    return _emit(fn(a.data), (a,), lambda g: (g,))


@dataclass
class BatchNormState:
    """Running statistics of one batch-normalization layer.

    Statistics are per feature (last axis) and reduced over every other axis.
    Running variance uses the unbiased batch estimate.
    """

    num_features: int
    momentum: float = 0.1
    eps: float = 1e-5
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)
    mode: str = "training"

    def __post_init__(self):
        if not 0 < self.momentum < 1:
            raise InvalidInputError("batchnorm momentum must lie in (0, 1)")
        if not self.eps > 0:
            raise InvalidInputError("batchnorm epsilon must be > 0")
        if self.running_mean is None:
            self.running_mean = np.zeros(self.num_features)
        if self.running_var is None:
            self.running_var = np.ones(self.num_features)
        if self.mode not in ("training", "inference"):
            raise InvalidInputError(f"unknown batchnorm mode {self.mode!r}")


def batchnorm(x, gamma, beta, state: BatchNormState, training: bool | None = None,
              update_stats: bool = True) -> Tensor:
    """Normalize over all but the last axis, then scale and shift.

    In training mode the batch statistics are used (and, with
    ``update_stats``, folded into the running estimates); in inference mode
    the frozen running statistics are used and nothing is mutated.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if training is None:
        training = state.mode == "training"
    if x.shape[-1] != state.num_features:
        raise InvalidShapeError(
            f"batchnorm: expected {state.num_features} features, got {x.shape[-1]}")
    gd, bd = gamma.data, beta.data
    red = tuple(range(x.ndim - 1))
    if not training:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean) * inv
        out = xhat * gd + bd

        def vjp_eval(g):
            g2 = g.reshape(-1, g.shape[-1])
            return g * gd * inv, (g2 * xhat.reshape(g2.shape)).sum(0), g2.sum(0)

        return _emit(out, (x, gamma, beta), vjp_eval)

    if x.ndim < 2 or x.shape[0] < 2:
        raise DegenerateBatchError("batchnorm in training mode needs a batch of size >= 2")
    n = int(np.prod([x.shape[i] for i in red]))
    mu = x.data.mean(axis=red)
    var = x.data.var(axis=red)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv
    out = xhat * gd + bd
    if update_stats:
        m = state.momentum
        unbiased = var * n / max(n - 1, 1)
        state.running_mean = (1 - m) * state.running_mean + m * mu
        state.running_var = (1 - m) * state.running_var + m * unbiased

    def vjp(g):
        dxhat = g * gd
        s1 = dxhat.sum(axis=red)
        s2 = (dxhat * xhat).sum(axis=red)
        dx = inv / n * (n * dxhat - s1 - xhat * s2)
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _emit(out, (x, gamma, beta), vjp)


# ------------------------------------------------------------------ backward

def backward(tape: Tape, seed: Tensor, wrt=None, scale: float = 1.0) -> dict:
    """Reverse sweep from scalar ``seed``.

    Returns a mapping from every leaf tensor (``requires_grad=True``) reached
    on the tape to its gradient; ``wrt`` restricts the mapping and fills
    unreached leaves with zeros.
    """
    if not isinstance(seed, Tensor) or seed.data.size != 1:
        raise InvalidInputError("backward seed must be a scalar tensor")
    grads: dict[int, np.ndarray] = {id(seed): np.full(seed.shape, float(scale))}
    leaves: dict[int, Tensor] = {}
    if seed.requires_grad and not seed._recorded:
        leaves[id(seed)] = seed
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        cts = node.vjp(g)
        for inp, ct in zip(node.inputs, cts):
            if ct is None or not _tracked(inp):
                continue
            k = id(inp)
            grads[k] = grads[k] + ct if k in grads else np.asarray(ct, dtype=np.float64)
            if inp.requires_grad and not inp._recorded:
                leaves[k] = inp
    out = {leaves[k]: np.asarray(grads[k]).reshape(leaves[k].shape)
           for k in leaves if k in grads}
    if wrt is not None:
        wrt = list(wrt)
        return {p: out.get(p, np.zeros(p.shape)) for p in wrt}
    return out


def grad_check(function: Callable[[Tensor], Tensor], point, h: float = 1e-6,
               atol: float = 1e-6) -> float:
    """Maximum per-coordinate relative error of the tape gradient.

    The reference is a central difference with step ``h``. Each coordinate's
    error is ``|analytic - numeric| / max(|analytic|, |numeric|, atol)``.
    """
    x0 = np.array(point, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        y = function(leaf)
    if y.data.size != 1:
        raise InvalidInputError("grad_check needs a scalar-valued function")
    analytic = backward(tape, y, wrt=[leaf])[leaf]
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += h
        xm = flat.copy()
        xm[i] -= h
        fp = float(function(Tensor(xp.reshape(x0.shape))).data)
        fm = float(function(Tensor(xm.reshape(x0.shape))).data)
        nflat[i] = (fp - fm) / (2 * h)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)
    return float(np.max(np.abs(analytic - numeric) / scale)) if x0.size else 0.0
