"""Reverse-mode automatic differentiation on dense float64 arrays.

Every differentiable computation in the package is recorded on a :class:`Tape`
as a flat list of primitive nodes.  :func:`backward` walks the list in reverse
append order and accumulates adjoints with the chain rule.

A :class:`Tensor` without a tape is a constant: operations whose operands are
all constants are evaluated eagerly and nothing is recorded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes do not conform to the requested primitive."""


class NonFiniteError(ArithmeticError):
    """A value that must be finite is not."""


@dataclass
class _Node:
    kind: str
    inputs: tuple[int, ...]  # -1 marks a constant operand
    vjp: Callable | None
    shape: tuple[int, ...]


class Tape:
    """Append-only record of primitive operations."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def _append(self, node: _Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, value, name: str | None = None) -> "Tensor":
        """Register ``value`` as an independent variable on this tape."""
        data = np.array(value, dtype=DTYPE)
        idx = self._append(_Node(name or "leaf", (), None, data.shape))
        return Tensor(data, self, idx)


class Tensor:
    """Dense float64 array, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        where = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{where})"

    # arithmetic sugar
    def __add__(self, other):
        return record("add", [self, other])

    def __radd__(self, other):
        return record("add", [other, self])

    def __sub__(self, other):
        return record("sub", [self, other])

    def __rsub__(self, other):
        return record("sub", [other, self])

    def __mul__(self, other):
        return record("mul", [self, other])

    def __rmul__(self, other):
        return record("mul", [other, self])

    def __truediv__(self, other):
        return record("div", [self, other])

    def __rtruediv__(self, other):
        return record("div", [other, self])

    def __neg__(self):
        return record("neg", [self])

    def __matmul__(self, other):
        return record("matmul", [self, other])

    def __getitem__(self, index):
        return record("getitem", [self], index=index)

    def sum(self, axis=None, keepdims=False):
        return record("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return record("mean", [self], axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return record("reshape", [self], shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return record("transpose", [self], axes=axes or None)

    @property
    def T(self):
        return self.transpose()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitive table
# ---------------------------------------------------------------------------

# Each entry maps (*arrays, **attrs) -> (value, vjp) where
# vjp(g, needs) returns one adjoint (or None) per operand.
PRIMITIVES: dict[str, Callable] = {}


def primitive(kind: str):
    def register(fn):
        PRIMITIVES[kind] = fn
        return fn

    return register


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot combine shapes {a.shape} and {b.shape}") from None


@primitive("add")
def _add(a, b):
    _check_broadcast("add", a, b)

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return a + b, vjp


@primitive("sub")
def _sub(a, b):
    _check_broadcast("sub", a, b)

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return a - b, vjp


@primitive("mul")
def _mul(a, b):
    _check_broadcast("mul", a, b)

    def vjp(g, needs):
        return (_unbroadcast(g * b, a.shape) if needs[0] else None,
                _unbroadcast(g * a, b.shape) if needs[1] else None)

    return a * b, vjp


@primitive("div")
def _div(a, b):
    _check_broadcast("div", a, b)
    out = a / b

    def vjp(g, needs):
        return (_unbroadcast(g / b, a.shape) if needs[0] else None,
                _unbroadcast(-g * out / b, b.shape) if needs[1] else None)

    return out, vjp


@primitive("neg")
def _neg(a):
    return -a, lambda g, needs: (-g,)


@primitive("square")
def _square(a):
    return a * a, lambda g, needs: (2.0 * a * g,)


@primitive("sin")
def _sin(a):
    return np.sin(a), lambda g, needs: (g * np.cos(a),)


@primitive("cos")
def _cos(a):
    return np.cos(a), lambda g, needs: (-g * np.sin(a),)


@primitive("exp")
def _exp(a):
    out = np.exp(a)
    return out, lambda g, needs: (g * out,)


@primitive("log")
def _log(a):
    return np.log(a), lambda g, needs: (g / a,)


@primitive("sqrt")
def _sqrt(a):
    out = np.sqrt(a)
    return out, lambda g, needs: (0.5 * g / out,)


@primitive("sigmoid")
def _sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a))
    return out, lambda g, needs: (g * out * (1.0 - out),)


@primitive("silu")
def _silu(a):
    sig = 0.5 * (1.0 + np.tanh(0.5 * a))
    out = a * sig
    return out, lambda g, needs: (g * (sig + out * (1.0 - sig)),)


@primitive("relu")
def _relu(a):
    mask = a > 0
    return np.where(mask, a, 0.0), lambda g, needs: (g * mask,)


@primitive("step")
def _step(a):
    # Heaviside step, derivative of relu; zero derivative almost everywhere.
    return (a > 0).astype(DTYPE), lambda g, needs: (None,)


@primitive("matmul")
def _matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")

    def vjp(g, needs):
        return (g @ b.T if needs[0] else None, a.T @ g if needs[1] else None)

    return a @ b, vjp


@primitive("affine")
def _affine(x, w, b):
    """Row-wise ``x @ w.T + b`` with ``w`` of shape (out, in)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"affine: incompatible shapes x={x.shape}, W={w.shape}, b={b.shape}")

    def vjp(g, needs):
        return (g @ w if needs[0] else None,
                g.T @ x if needs[1] else None,
                g.sum(axis=0) if needs[2] else None)

    return x @ w.T + b, vjp


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


@primitive("sum")
def _sum(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    out = a.sum(axis=axes, keepdims=keepdims)

    def vjp(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return out, vjp


@primitive("mean")
def _mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    count = math.prod(a.shape[ax] for ax in axes)
    out = a.mean(axis=axes, keepdims=keepdims)

    def vjp(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return out, vjp


@primitive("reshape")
def _reshape(a, shape):
    out = a.reshape(shape)
    return out, lambda g, needs: (g.reshape(a.shape),)


@primitive("transpose")
def _transpose(a, axes=None):
    out = np.transpose(a, axes)
    inv = None if axes is None else np.argsort(axes)
    return out, lambda g, needs: (np.transpose(g, inv),)


@primitive("getitem")
def _getitem(a, index):
    out = a[index]

    def vjp(g, needs):
        full = np.zeros_like(a)
        np.add.at(full, index, g)
        return (full,)

    return np.array(out, dtype=DTYPE), vjp


@primitive("concat")
def _concat(*arrays, axis=0):
    out = np.concatenate(arrays, axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in arrays])

    def vjp(g, needs):
        return tuple(
            np.take(g, range(lo, hi), axis=axis) if need else None
            for lo, hi, need in zip(bounds[:-1], bounds[1:], needs)
        )

    return out, vjp


@primitive("softmax")
def _softmax(a, axis=0):
    z = a - a.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g, needs):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return out, vjp


@primitive("avgpool2")
def _avgpool2(a):
    """2x average pooling over the three trailing spatial axes of (C, H, W, D)."""
    c, h, w, d = a.shape
    if h % 2 or w % 2 or d % 2:
        raise ShapeError(f"avgpool2: spatial extents must be even, got {a.shape}")
    out = a.reshape(c, h // 2, 2, w // 2, 2, d // 2, 2).mean(axis=(2, 4, 6))

    def vjp(g, needs):
        up = np.repeat(np.repeat(np.repeat(g, 2, axis=1), 2, axis=2), 2, axis=3)
        return (up / 8.0,)

    return out, vjp


@primitive("upsample2")
def _upsample2(a):
    """Nearest-neighbour 2x upsampling of (C, H, W, D)."""
    c, h, w, d = a.shape
    out = np.repeat(np.repeat(np.repeat(a, 2, axis=1), 2, axis=2), 2, axis=3)

    def vjp(g, needs):
        return (g.reshape(c, h, 2, w, 2, d, 2).sum(axis=(2, 4, 6)),)

    return out, vjp


# 3x3x3 stencil convolution ---------------------------------------------------

BOUNDARIES = ("zero", "reflect")

_OFFSETS = [(i, j, k) for i in range(3) for j in range(3) for k in range(3)]


def pad1(x: np.ndarray, boundary: str) -> np.ndarray:
    """Pad the three trailing axes by one voxel.

    ``reflect`` mirrors about the boundary face, so the ghost layer equals the
    adjacent edge voxel and the centred normal difference vanishes.
    """
    if boundary not in BOUNDARIES:
        raise ValueError(f"unknown boundary policy {boundary!r}; expected one of {BOUNDARIES}")
    lead = x.shape[:-3]
    h, w, d = x.shape[-3:]
    out = np.zeros(lead + (h + 2, w + 2, d + 2))
    out[..., 1:-1, 1:-1, 1:-1] = x
    if boundary == "reflect":
        out[..., 0, :, :] = out[..., 1, :, :]
        out[..., -1, :, :] = out[..., -2, :, :]
        out[..., :, 0, :] = out[..., :, 1, :]
        out[..., :, -1, :] = out[..., :, -2, :]
        out[..., :, :, 0] = out[..., :, :, 1]
        out[..., :, :, -1] = out[..., :, :, -2]
    return out


def unpad1(gp: np.ndarray, boundary: str) -> np.ndarray:
    """Adjoint of :func:`pad1`."""
    if boundary == "reflect":
        gp = gp.copy()
        for ax in (-3, -2, -1):
            lo = [slice(None)] * gp.ndim
            hi = [slice(None)] * gp.ndim
            lo[ax], hi[ax] = 1, -2
            ghost_lo = [slice(None)] * gp.ndim
            ghost_hi = [slice(None)] * gp.ndim
            ghost_lo[ax], ghost_hi[ax] = 0, -1
            gp[tuple(lo)] += gp[tuple(ghost_lo)]
            gp[tuple(hi)] += gp[tuple(ghost_hi)]
    return gp[..., 1:-1, 1:-1, 1:-1]


def _shifted_gemm(blocks, src, shifts, start, length, chunk=9):
    """``sum_t blocks[t] @ src[:, start + shifts[t] : ... + length]``.

    Taps are stacked into one GEMM per chunk, which reads ``src`` once per
    chunk instead of once per tap.
    """
    m = blocks.shape[1]
    lo = start + min(shifts)
    hi = start + max(shifts) + length
    window = src[:, lo:hi]
    out = np.zeros((m, length))
    for c0 in range(0, len(shifts), chunk):
        part = blocks[c0:c0 + chunk]
        z = (part.reshape(-1, part.shape[2]) @ window).reshape(len(part), m, -1)
        for zt, s in zip(z, shifts[c0:c0 + chunk]):
            off = start + s - lo
            out += zt[:, off:off + length]
    return out


@primitive("conv3d")
def _conv3d(x, w, b=None, boundary="zero"):
    """Stride-1 3x3x3 convolution (cross-correlation) of (Cin, H, W, D) input.

    ``w`` has shape (Cout, Cin, 3, 3, 3); output keeps the spatial extents.
    The padded volume is flattened so every tap is a constant shift.
    """
    if x.ndim != 4 or w.ndim != 5 or w.shape[2:] != (3, 3, 3) or w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv3d: incompatible input {x.shape} and kernel {w.shape}")
    cin, h, wd, d = x.shape
    cout = w.shape[0]
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv3d: bias shape {b.shape} does not match {cout} output channels")
    xp = pad1(x, boundary)
    ph, pw, pd = h + 2, wd + 2, d + 2
    npad = ph * pw * pd
    flat = xp.reshape(cin, npad)
    sx, sy = pw * pd, pd
    q0 = sx + sy + 1
    q1 = npad - q0
    taps = [t for t in range(27) if w[:, :, t // 9, (t // 3) % 3, t % 3].any()]
    shifts = [(t // 9 - 1) * sx + ((t // 3) % 3 - 1) * sy + (t % 3 - 1) for t in range(27)]
    wt = np.ascontiguousarray(w.reshape(cout, cin, 27).transpose(2, 0, 1))  # (27, Cout, Cin)

    acc = np.zeros((cout, npad))
    if taps:
        acc[:, q0:q1] = _shifted_gemm(wt[taps], flat, [shifts[t] for t in taps], q0, q1 - q0)
    out = acc.reshape(cout, ph, pw, pd)[:, 1:-1, 1:-1, 1:-1].copy()
    if b is not None:
        out += b[:, None, None, None]

    def vjp(g, needs):
        gfull = np.zeros((cout, ph, pw, pd))
        gfull[:, 1:-1, 1:-1, 1:-1] = g
        gflat = gfull.reshape(cout, npad)
        gx = gw = gb = None
        if needs[1]:
            gr = gflat[:, q0:q1]
            gw = np.stack([gr @ flat[:, q0 + s:q1 + s].T for s in shifts], axis=-1)
            gw = gw.reshape(w.shape)
        if needs[0]:
            use = list(range(27)) if needs[1] else taps
            gext = np.zeros((cout, npad + 2 * q0))
            gext[:, q0:q0 + npad] = gflat
            back = np.ascontiguousarray(wt[use].transpose(0, 2, 1))  # (T, Cin, Cout)
            gxp = _shifted_gemm(back, gext, [-shifts[t] for t in use], q0, npad)
            gx = unpad1(gxp.reshape(cin, ph, pw, pd), boundary)
        if b is not None and len(needs) > 2 and needs[2]:
            gb = g.sum(axis=(1, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    return out, vjp


# ---------------------------------------------------------------------------
# recording and backward pass
# ---------------------------------------------------------------------------

def record(kind: str, operands: Sequence, **attrs) -> Tensor:
    """Apply primitive ``kind`` to ``operands`` and record it on their tape.

    Non-Tensor operands are treated as constants.  Operands attached to
    different tapes are rejected.
    """
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    tensors = [as_tensor(op) for op in operands]
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError(f"{kind}: operands belong to different tapes")
            tape = t.tape
    value, vjp = fn(*(t.data for t in tensors), **attrs)
    value = np.asarray(value, dtype=DTYPE)
    if tape is None:
        return Tensor(value)
    inputs = tuple(t.node if t.tape is tape else -1 for t in tensors)
    idx = tape._append(_Node(kind, inputs, vjp, value.shape))
    return Tensor(value, tape, idx)


class Adjoints(dict):
    """Mapping node id -> adjoint array; unreachable nodes read as zeros."""

    def __init__(self, tape: Tape):
        super().__init__()
        self._tape = tape

    def __missing__(self, key):
        return np.zeros(self._tape.nodes[key].shape)

    def of(self, t: Tensor) -> np.ndarray:
        return self[t.node]


def backward(tape: Tape, root: Tensor, leaves_only: bool = False) -> Adjoints:
    """Reverse sweep from the scalar ``root``.

    With ``leaves_only`` the adjoints of interior nodes are dropped as soon as
    they have been propagated, which bounds memory for long tapes.
    """
    if root.tape is not tape or root.node is None:
        raise ValueError("root is not recorded on this tape")
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    adj = Adjoints(tape)
    adj[root.node] = np.ones(root.shape)
    nodes = tape.nodes
    for idx in range(root.node, -1, -1):
        if idx not in adj:
            continue
        node = nodes[idx]
        if node.vjp is None:
            continue
        g = adj[idx] if not leaves_only else adj.pop(idx)
        needs = tuple(j >= 0 for j in node.inputs)
        grads = node.vjp(g, needs)
        for j, gj in zip(node.inputs, grads):
            if j < 0 or gj is None:
                continue
            if j in adj:
                adj[j] = adj[j] + gj
            else:
                adj[j] = np.asarray(gj, dtype=DTYPE).reshape(nodes[j].shape)
    return adj


def grad_check(function: Callable[[Tensor], Tensor], point, epsilon: float = 1e-5,
               coords: Iterable[int] | None = None) -> float:
    """Max relative error of the tape gradient against central differences.

    The error per coordinate is ``|ad - fd| / max(1, |fd|)``.  ``coords``
    restricts the comparison to a subset of flat indices.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    point = np.array(point, dtype=DTYPE)
    tape = Tape()
    x = tape.leaf(point)
    y = function(x)
    if not np.all(np.isfinite(y.data)):
        raise NonFiniteError("function value is not finite at the check point")
    ad = backward(tape, y).of(x).reshape(-1)

    flat = point.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for c in idx:
        shifted = flat.copy()
        shifted[c] = flat[c] + epsilon
        fp = function(Tensor(shifted.reshape(point.shape))).item()
        shifted[c] = flat[c] - epsilon
        fm = function(Tensor(shifted.reshape(point.shape))).item()
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"non-finite evaluation at coordinate {c}")
        fd = (fp - fm) / (2.0 * epsilon)
        worst = max(worst, abs(ad[c] - fd) / max(1.0, abs(fd)))
    return worst


# functional helpers ----------------------------------------------------------

def sin(x):
    return record("sin", [x])


def cos(x):
    return record("cos", [x])


def exp(x):
    return record("exp", [x])


def log(x):
    return record("log", [x])


def sqrt(x):
    return record("sqrt", [x])


def square(x):
    return record("square", [x])


def sigmoid(x):
    return record("sigmoid", [x])


def relu(x):
    return record("relu", [x])


def silu(x):
    return record("silu", [x])


def step(x):
    return record("step", [x])


def affine(x, w, b):
    return record("affine", [x, w, b])


def concat(tensors, axis=0):
    return record("concat", list(tensors), axis=axis)


def softmax(x, axis=0):
    return record("softmax", [x], axis=axis)


def conv3d(x, w, b=None, boundary="zero"):
    ops = [x, w] if b is None else [x, w, b]
    return record("conv3d", ops, boundary=boundary)


def avgpool2(x):
    return record("avgpool2", [x])


def upsample2(x):
    return record("upsample2", [x])
