"""Reverse-mode automatic differentiation over float32 numpy arrays.

Every op returns a new :class:`Tensor`. When gradient recording is enabled and
at least one input requires a gradient, the output keeps references to its
inputs plus a closure that maps the output gradient to input gradients. The
closures form the tape that :func:`backward` walks in reverse topological
order. The tape is released once backward has consumed it.

Image-shaped tensors use NHWC layout throughout the package.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float32

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (sampling, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """n-dimensional float32 value with an optional gradient."""

    __slots__ = ("data", "grad", "_requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self._requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A named, optimizable tensor. Locked parameters never receive gradients."""

    __slots__ = ("name", "locked")

    def __init__(self, data, name: str = "", locked: bool = False):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.locked = bool(locked)

    @property
    def requires_grad(self) -> bool:
        return not self.locked

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, locked={self.locked})"


def _raise_nonscalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, out: np.ndarray) -> None:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op}: non-finite values in output of shape {out.shape}")


def _result(op: str, out: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = np.asarray(out, dtype=DTYPE)
    _check_finite(op, out)
    t = Tensor(out)
    t.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        t._requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward_fn
    return t


def _colsum(a2: np.ndarray) -> np.ndarray:
    """Sum over rows of a 2-D array; BLAS is far faster than ``ndarray.sum(0)`` here."""
    return (np.ones((1, a2.shape[0]), dtype=DTYPE) @ a2)[0]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    k = len(shape)
    size = int(np.prod(shape)) if k else 1
    if g.shape[g.ndim - k :] == tuple(shape):
        return _colsum(g.reshape(-1, size)).reshape(shape)
    if g.ndim == 4 and k == 4 and shape[1] == shape[2] == 1 and shape[0] == g.shape[0] and shape[3] == g.shape[3]:
        n, h, w, c = g.shape
        ones = np.ones((1, h * w), dtype=DTYPE)
        return np.matmul(ones, g.reshape(n, h * w, c)).reshape(shape)
    while g.ndim > k:
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _bshape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ----------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("mul", a.data * b.data, (a, b), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result("relu", np.where(mask, x.data, 0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _result("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return expit(v).astype(DTYPE, copy=False)


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    out = x.data * s
    return _result("silu", out, (x,), lambda g: (g * (s + out * (1 - s)),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _result("tanh", t, (x,), lambda g: (g * (1 - t * t),))


def log(x, min_value: float = 0.0) -> Tensor:
    """Natural log of ``max(x, min_value)``; no gradient where clamped."""
    x = as_tensor(x)
    clamped = np.maximum(x.data, DTYPE(min_value)) if min_value > 0 else x.data
    live = x.data >= min_value if min_value > 0 else np.ones(x.shape, bool)
    return _result("log", np.log(clamped), (x,), lambda g: (g * live / clamped,))


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _result("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


# ----------------------------------------------------------------- reductions


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims, dtype=DTYPE)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _result("sum", out, (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def mse(a, b) -> Tensor:
    """Mean of squared differences, a scalar."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    d = a.data - b.data
    n = DTYPE(d.size)
    out = np.mean(d.astype(np.float64) ** 2)

    def bw(g):
        gd = (2 * g / n) * d
        return gd, -gd

    return _result("mse", out, (a, b), bw)


# ----------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _result("matmul", a.data @ b.data, (a, b), bw)


# ----------------------------------------------------------------- shape ops


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            s != s0 for i, (s, s0) in enumerate(zip(t.shape, ts[0].shape)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {[t.shape for t in ts]} differ off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        idx = [slice(None)] * g.ndim
        outs = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            outs.append(g[tuple(idx)])
        return tuple(outs)

    return _result("concat", np.concatenate([t.data for t in ts], axis=ax), ts, bw)


def avgpool2(x) -> Tensor:
    """2x2 average pooling with stride 2 on an NHWC tensor."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError(f"avgpool2: need NHWC with even H, W, got {x.shape}")
    d = x.data
    out = (d[:, ::2, ::2] + d[:, 1::2, ::2] + d[:, ::2, 1::2] + d[:, 1::2, 1::2]) * DTYPE(0.25)

    def bw(g):
        dx = np.empty(x.shape, dtype=DTYPE)
        q = g * DTYPE(0.25)
        for a in (0, 1):
            for b in (0, 1):
                dx[:, a::2, b::2] = q
        return (dx,)

    return _result("avgpool2", out, (x,), bw)


def nearest_upsample2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling on an NHWC tensor."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"nearest_upsample2: need NHWC, got {x.shape}")
    n, h, w, c = x.shape
    out = np.empty((n, 2 * h, 2 * w, c), dtype=DTYPE)
    for a in (0, 1):
        for b in (0, 1):
            out[:, a::2, b::2] = x.data

    def bw(g):
        return (g[:, ::2, ::2] + g[:, 1::2, ::2] + g[:, ::2, 1::2] + g[:, 1::2, 1::2],)

    return _result("nearest_upsample2", out, (x,), bw)


# ----------------------------------------------------------------- normalization


def _group_sums(a3: np.ndarray, groups: int) -> np.ndarray:
    """Per-(sample, group) sums of an (n, hw, c) array, broadcast back to (n, 1, c)."""
    n, hw, c = a3.shape
    per_channel = np.matmul(np.ones((1, hw), dtype=DTYPE), a3)  # n, 1, c
    per_group = per_channel.reshape(n, groups, c // groups).sum(axis=-1, keepdims=True)
    return np.broadcast_to(per_group, (n, groups, c // groups)).reshape(n, 1, c)


def group_norm(x, groups: int, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Group normalization over NHWC input, per-channel affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"group_norm: need NHWC, got {x.shape}")
    n, h, w, c = x.shape
    if c % groups or gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"group_norm: {c} channels, {groups} groups, gamma {gamma.shape}, beta {beta.shape}"
        )
    m = DTYPE(h * w * (c // groups))
    x3 = x.data.reshape(n, h * w, c)
    xc = x3 - _group_sums(x3, groups) / m
    var = _group_sums(xc * xc, groups) / m
    inv = DTYPE(1.0) / np.sqrt(var + DTYPE(eps))
    xhat = xc * inv
    out = (xhat * gamma.data + beta.data).reshape(x.shape)

    def bw(g):
        g3 = g.reshape(n, h * w, c)
        dgamma = _colsum((g3 * xhat).reshape(-1, c))
        dbeta = _colsum(g3.reshape(-1, c))
        dxhat = g3 * gamma.data
        s1 = _group_sums(dxhat, groups)
        s2 = _group_sums(dxhat * xhat, groups)
        dx = (inv / m) * (m * dxhat - s1 - xhat * s2)
        return dx.reshape(x.shape), dgamma, dbeta

    return _result("group_norm", out, (x, gamma, beta), bw)


# ----------------------------------------------------------------- convolution


def _conv_geometry(x, weight, stride, padding):
    n, h, w, c = x.shape
    o, _, kh, kw = weight.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    return n, c, o, kh, kw, ho, wo


def _tap(xp: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """View of the padded input seen by kernel tap (i, j)."""
    return xp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]


def _conv_weight_grad(xp, g, kh, kw, stride, ho, wo) -> np.ndarray:
    n, hp, wp, c = xp.shape
    o = g.shape[-1]
    dw = np.empty((kh, kw, c, o), dtype=DTYPE)
    if stride != 1:
        g2 = g.reshape(-1, o)
        for i in range(kh):
            for j in range(kw):
                dw[i, j] = _tap(xp, i, j, stride, ho, wo).reshape(-1, c).T @ g2
        return dw.transpose(3, 2, 0, 1)
    # Flatten rows of the padded input; tap (i, j) is then a contiguous run
    # starting at i * wp + j. Output columns beyond wo see zero gradient.
    flat = np.pad(xp, ((0, 0), (0, 1), (0, 0), (0, 0))).reshape(n, (hp + 1) * wp, c)
    g_ext = np.zeros((n, ho, wp, o), dtype=DTYPE)
    g_ext[:, :, :wo] = g
    gf = g_ext.reshape(n, ho * wp, o)
    span = ho * wp
    for i in range(kh):
        for j in range(kw):
            s = i * wp + j
            dw[i, j] = np.matmul(flat[:, s : s + span].transpose(0, 2, 1), gf).sum(axis=0)
    return dw.transpose(3, 2, 0, 1)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``x`` is NHWC, ``weight`` is (out, in, kh, kw).

    Computed as a sum over kernel taps of (shifted input view) @ (in x out)
    matrices, which avoids materialising an im2col buffer.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[3] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} (NHWC) incompatible with weight {weight.shape}")
    n, c, o, kh, kw, ho, wo = _conv_geometry(x, weight, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape}")
    taps = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0))  # kh, kw, in, out
    taps_t = np.ascontiguousarray(taps.transpose(0, 1, 3, 2))
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    out = np.zeros((n, ho, wo, o), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out += _tap(xp, i, j, stride, ho, wo) @ taps[i, j]
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias {bias.shape} does not match {o} output channels")
        out += bias.data
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(-1, o)
        dx = None
        if x.requires_grad:
            dxp = np.zeros(xp.shape, dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    _tap(dxp, i, j, stride, ho, wo)[...] += g @ taps_t[i, j]
            dx = dxp[:, padding : padding + x.shape[1], padding : padding + x.shape[2]] if padding else dxp
        dw = None
        if weight.requires_grad:
            dw = _conv_weight_grad(xp, g, kh, kw, stride, ho, wo)
        grads = [dx, dw]
        if bias is not None:
            grads.append(_colsum(g2))
        return tuple(grads)

    return _result("conv2d", out, parents, bw)


# ----------------------------------------------------------------- dispatch

OPS: dict[str, Callable] = {
    "conv2d": conv2d,
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "silu": silu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "log": log,
    "abs": abs,
    "sum": sum,
    "mean": mean,
    "reshape": reshape,
    "concat": lambda *xs, axis=-1: concat(xs, axis=axis),
    "avgpool2": avgpool2,
    "nearest_upsample2": nearest_upsample2,
    "group_norm": group_norm,
    "mse": mse,
}


def forward_op(kind: str, *inputs, **attrs) -> Tensor:
    """Run op ``kind`` by name, e.g. ``forward_op("conv2d", x, w, padding=1)``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; known: {sorted(OPS)}") from None
    return fn(*inputs, **attrs)


# ----------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable leaf that requires a gradient.

    Gradients accumulate into existing ``.grad`` arrays, so several backward
    passes before an optimizer step sum their contributions.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf
            if isinstance(node, Parameter) and node.locked:
                continue
            g = np.asarray(g, dtype=DTYPE)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    # release the tape
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
