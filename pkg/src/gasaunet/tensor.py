"""Reverse-mode automatic differentiation on n-dimensional float64 arrays.

The engine is define-by-run: every operation returns a new Tensor that
remembers its parents and a closure that routes the output gradient back to
them. backward() seeds the scalar root with 1 and replays the closures in
reverse topological order. Everything is float64; there is no device or
dtype story beyond that.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    InvalidProbability,
    KernelTooLarge,
    NotScalar,
    ShapeMismatch,
)

Array = np.ndarray

_U64 = np.uint64
_MASK64 = (1 << 64) - 1
_SM64_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM64_M1 = np.uint64(0xBF58476D1CE4E5B9)
_SM64_M2 = np.uint64(0x94D049BB133111EB)
_TWO53_INV = 1.0 / (1 << 53)


class Rng:
    """Counter-based deterministic random stream (splitmix64).

    The i-th raw draw is a pure function of (seed, counter + i), so bulk
    generation with numpy uint64 arithmetic produces bitwise the same stream
    as repeated scalar calls. State is the pair (seed, counter) and can be
    checkpointed exactly.
    """

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter) & _MASK64

    # -- raw stream ---------------------------------------------------------

    def _next_u64(self, n: int) -> Array:
        idx = np.arange(1, n + 1, dtype=np.uint64) + _U64(self.counter)
        self.counter = (self.counter + n) & _MASK64
        z = (_U64(self.seed) + idx * _SM64_GAMMA).astype(np.uint64)
        z = (z ^ (z >> _U64(30))) * _SM64_M1
        z = (z ^ (z >> _U64(27))) * _SM64_M2
        return z ^ (z >> _U64(31))

    # -- derived draws ------------------------------------------------------

    def uniform_array(self, n: int) -> Array:
        """n doubles in [0, 1)."""
        return (self._next_u64(n) >> _U64(11)).astype(np.float64) * _TWO53_INV

    def uniform(self) -> float:
        return float(self.uniform_array(1)[0])

    def randint(self, n: int) -> int:
        """Integer in [0, n)."""
        return int(self.uniform() * n)

    def normal_array(self, n: int) -> Array:
        """n standard normals via Box-Muller (consumes 2n raw draws)."""
        raw = self._next_u64(2 * n)
        u1 = ((raw[:n] >> _U64(11)).astype(np.float64) + 1.0) * _TWO53_INV
        u2 = (raw[n:] >> _U64(11)).astype(np.float64) * _TWO53_INV
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def normal(self) -> float:
        return float(self.normal_array(1)[0])

    def spawn(self, key: int) -> "Rng":
        """Independent substream derived from (seed, key)."""
        z = (self.seed + ((int(key) & _MASK64) + 1) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 30)) * 0x94D049BB133111EB) & _MASK64
        return Rng(z ^ (z >> 31))

    @property
    def state(self) -> tuple[int, int]:
        return (self.seed, self.counter)

    @classmethod
    def from_state(cls, state: Sequence[int]) -> "Rng":
        return cls(state[0], state[1])


class Tensor:
    """Float64 array plus gradient bookkeeping.

    grad is allocated lazily on first accumulation. Intermediate tensors keep
    references to their parents and a backward closure; leaves keep neither.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple["Tensor", ...] = ()
        self._backward: Callable[[], None] | None = None

    # -- basics -------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{req})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def accumulate_grad(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    # -- autograd core ------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar root.

        Repeated calls without zero_grad accumulate into leaf gradients.
        """
        if self.data.size != 1:
            raise NotScalar(f"backward() root must be scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor_new(shape: Sequence[int], values: Sequence[float], requires_grad: bool = False) -> Tensor:
    """Leaf tensor from an explicit shape and flat row-major value list."""
    shape = tuple(int(s) for s in shape)
    vals = np.asarray(values, dtype=np.float64).reshape(-1)
    n = 1
    for s in shape:
        n *= s
    if n != vals.size:
        raise ShapeMismatch(f"shape {shape} needs {n} values, got {vals.size}")
    return Tensor(vals.reshape(shape), requires_grad=requires_grad)


def _node(data: Array, parents: Iterable[Tensor], backward: Callable[[], None]) -> Tensor:
    """Result tensor; records the graph edge only when a parent needs grads."""
    parents = tuple(parents)
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum g down to shape, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / reduction ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def bw():
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad, b.shape))

    out = _node(out_data, (a, b), bw)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def bw():
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-out.grad, b.shape))

    out = _node(out_data, (a, b), bw)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def bw():
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad * a.data, b.shape))

    out = _node(out_data, (a, b), bw)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data / b.data

    def bw():
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad / b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))

    out = _node(out_data, (a, b), bw)
    return out


def pow_scalar(a: Tensor, exponent: float) -> Tensor:
    out_data = a.data ** exponent

    def bw():
        if a.requires_grad:
            a.accumulate_grad(out.grad * exponent * a.data ** (exponent - 1.0))

    out = _node(out_data, (a,), bw)
    return out


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bw():
        if a.requires_grad:
            a.accumulate_grad(out.grad * out_data)

    out = _node(out_data, (a,), bw)
    return out


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def bw():
        if a.requires_grad:
            a.accumulate_grad(out.grad / a.data)

    out = _node(out_data, (a,), bw)
    return out


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient is zero where the floor is active."""
    keep = a.data > floor
    out_data = np.where(keep, a.data, floor)

    def bw():
        if a.requires_grad:
            a.accumulate_grad(out.grad * keep)

    out = _node(out_data, (a,), bw)
    return out


def tsum(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw():
        if a.requires_grad:
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a.accumulate_grad(np.broadcast_to(g, a.shape).copy())

    out = _node(out_data, (a,), bw)
    return out


def tmean(a: Tensor) -> Tensor:
    return mul(tsum(a), Tensor(1.0 / a.size))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    pos = a.data > 0
    out_data = np.where(pos, a.data, slope * a.data)

    def bw():
        if a.requires_grad:
            a.accumulate_grad(out.grad * np.where(pos, 1.0, slope))

    out = _node(out_data, (a,), bw)
    return out


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def bw():
        if a.requires_grad:
            a.accumulate_grad(out.grad.reshape(a.shape))

    out = _node(out_data, (a,), bw)
    return out


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeMismatch(f"transpose2d expects 2-d input, got shape {a.shape}")
    out_data = a.data.T.copy()

    def bw():
        if a.requires_grad:
            a.accumulate_grad(out.grad.T)

    out = _node(out_data, (a,), bw)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.shape[axis] for t in tensors]

    def bw():
        offset = 0
        for t, ext in zip(tensors, extents):
            if t.requires_grad:
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(offset, offset + ext)
                t.accumulate_grad(out.grad[tuple(sl)])
            offset += ext

    out = _node(out_data, tensors, bw)
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out_data = a.data[sl].copy()

    def bw():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[sl] = out.grad
            a.accumulate_grad(g)

    out = _node(out_data, (a,), bw)
    return out


def upsample_nearest(a: Tensor, factors: Sequence[int]) -> Tensor:
    """Nearest-neighbor upsampling of a [C, W, H, D] tensor by integer factors."""
    if a.data.ndim != 4:
        raise ShapeMismatch(f"upsample_nearest expects [C,W,H,D], got {a.shape}")
    fw, fh, fd = (int(f) for f in factors)
    out_data = a.data.repeat(fw, axis=1).repeat(fh, axis=2).repeat(fd, axis=3)

    def bw():
        if a.requires_grad:
            c, w, h, d = a.shape
            g = out.grad.reshape(c, w, fw, h, fh, d, fd).sum(axis=(2, 4, 6))
            a.accumulate_grad(g)

    out = _node(out_data, (a,), bw)
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"inner extents disagree: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bw():
        if a.requires_grad:
            a.accumulate_grad(out.grad @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ out.grad)

    out = _node(out_data, (a, b), bw)
    return out


def softmax_lastdim(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    if a.shape[-1] < 1:
        raise ShapeMismatch("softmax_lastdim needs a nonempty last axis")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw():
        if a.requires_grad:
            g = out.grad
            a.accumulate_grad(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    out = _node(y, (a,), bw)
    return out


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

_NORM_EPS = 1e-5


def _normalize(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    """(x - mean) / sqrt(var + eps) over the given axes (population variance)."""
    mu = a.data.mean(axis=axes, keepdims=True)
    var = a.data.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + _NORM_EPS)
    y = (a.data - mu) * inv_std

    def bw():
        if a.requires_grad:
            g = out.grad
            gm = g.mean(axis=axes, keepdims=True)
            gym = (g * y).mean(axis=axes, keepdims=True)
            a.accumulate_grad(inv_std * (g - gm - y * gym))

    out = _node(y, (a,), bw)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Normalize over the last axis, then apply the per-feature affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(
            f"layer_norm affine must have shape ({d},), got {gamma.shape}/{beta.shape}"
        )
    return add(mul(_normalize(x, (-1,)), gamma), beta)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel normalization of a [C, W, H, D] tensor over its spatial axes."""
    if x.data.ndim != 4:
        raise ShapeMismatch(f"instance_norm expects [C,W,H,D], got {x.shape}")
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(
            f"instance_norm affine must have shape ({c},), got {gamma.shape}/{beta.shape}"
        )
    g = reshape(gamma, (c, 1, 1, 1))
    b = reshape(beta, (c, 1, 1, 1))
    return add(mul(_normalize(x, (1, 2, 3)), g), b)


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------


def dropout(x: Tensor, p: float, training: bool, rng: Rng | None = None) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-p) so inference is identity."""
    if not 0.0 <= p < 1.0:
        raise InvalidProbability(f"dropout p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise InvalidProbability("training dropout needs an Rng")
    keep = (rng.uniform_array(x.size) >= p).reshape(x.shape)
    scale = 1.0 / (1.0 - p)
    out_data = x.data * keep * scale

    def bw():
        if x.requires_grad:
            x.accumulate_grad(out.grad * keep * scale)

    out = _node(out_data, (x,), bw)
    return out


# ---------------------------------------------------------------------------
# 3-d convolution
# ---------------------------------------------------------------------------


def _conv3d_geometry(x_shape, w_shape, stride, padding):
    cin, w, h, d = x_shape
    cout, cin_w, kw, kh, kd = w_shape
    if cin_w != cin:
        raise ShapeMismatch(f"conv3d channels: input {cin}, kernel expects {cin_w}")
    sw, sh, sd = stride
    pw, ph, pd = padding
    ow = (w + 2 * pw - kw) // sw + 1
    oh = (h + 2 * ph - kh) // sh + 1
    od = (d + 2 * pd - kd) // sd + 1
    if kw > w + 2 * pw or kh > h + 2 * ph or kd > d + 2 * pd:
        raise KernelTooLarge(
            f"kernel ({kw},{kh},{kd}) exceeds padded input ({w + 2 * pw},{h + 2 * ph},{d + 2 * pd})"
        )
    return (cout, ow, oh, od), (sw, sh, sd), (pw, ph, pd)


def conv3d(
    x: Tensor,
    w: Tensor,
    b: Tensor,
    stride: Sequence[int] = (1, 1, 1),
    padding: Sequence[int] = (0, 0, 0),
) -> Tensor:
    """3-d cross-correlation of [Cin,W,H,D] with [Cout,Cin,kw,kh,kd] plus bias.

    Implemented as im2col + one matmul; the column buffer is kept alive for
    the backward pass. No implicit padding: `padding` is explicit, default 0.
    """
    if x.data.ndim != 4:
        raise ShapeMismatch(f"conv3d input must be [Cin,W,H,D], got {x.shape}")
    if w.data.ndim != 5:
        raise ShapeMismatch(f"conv3d kernel must be [Cout,Cin,kw,kh,kd], got {w.shape}")
    out_shape, stride, padding = _conv3d_geometry(x.shape, w.shape, stride, padding)
    cout, ow, oh, od = out_shape
    cin = x.shape[0]
    _, _, kw, kh, kd = w.shape
    sw, sh, sd = stride
    pw, ph, pd = padding
    if b.shape != (cout,):
        raise ShapeMismatch(f"conv3d bias must have shape ({cout},), got {b.shape}")

    if pw or ph or pd:
        xp = np.pad(x.data, ((0, 0), (pw, pw), (ph, ph), (pd, pd)))
    else:
        xp = x.data
    cols = np.empty((cin, kw, kh, kd, ow, oh, od), dtype=np.float64)
    for a in range(kw):
        for bb in range(kh):
            for c in range(kd):
                cols[:, a, bb, c] = xp[
                    :,
                    a : a + sw * ow : sw,
                    bb : bb + sh * oh : sh,
                    c : c + sd * od : sd,
                ]
    cols_2d = cols.reshape(cin * kw * kh * kd, ow * oh * od)
    out_data = (w.data.reshape(cout, -1) @ cols_2d) + b.data[:, None]
    out_data = out_data.reshape(cout, ow, oh, od)

    def bw():
        g2d = out.grad.reshape(cout, -1)
        if w.requires_grad:
            w.accumulate_grad((g2d @ cols_2d.T).reshape(w.shape))
        if b.requires_grad:
            b.accumulate_grad(g2d.sum(axis=1))
        if x.requires_grad:
            dcols = (w.data.reshape(cout, -1).T @ g2d).reshape(cols.shape)
            dxp = np.zeros_like(xp)
            for a in range(kw):
                for bb in range(kh):
                    for c in range(kd):
                        dxp[
                            :,
                            a : a + sw * ow : sw,
                            bb : bb + sh * oh : sh,
                            c : c + sd * od : sd,
                        ] += dcols[:, a, bb, c]
            if pw or ph or pd:
                dxp = dxp[:, pw : pw + x.shape[1], ph : ph + x.shape[2], pd : pd + x.shape[3]]
            x.accumulate_grad(dxp)

    out = _node(out_data, (x, w, b), bw)
    return out


# ---------------------------------------------------------------------------
# parameter init
# ---------------------------------------------------------------------------


def init_uniform(shape: Sequence[int], fan_in: int, rng: Rng) -> Tensor:
    """Learnable leaf drawn from uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))."""
    shape = tuple(shape)
    n = int(np.prod(shape)) if shape else 1
    bound = 1.0 / math.sqrt(fan_in)
    vals = (rng.uniform_array(n) * 2.0 - 1.0) * bound
    return Tensor(vals.reshape(shape), requires_grad=True)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=requires_grad)
