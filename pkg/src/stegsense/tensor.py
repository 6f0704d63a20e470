"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations the detector needs are provided. Every op returns a new
:class:`Tensor`; when any input requires a gradient, the result records its
parents and a backward closure so :func:`backward` can replay the graph.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "DimensionError", "DomainError", "UsageError", "NonFiniteError",
    "tensor", "no_grad", "ordered_reductions", "backward", "validate",
    "conv2d", "linear", "global_avg_pool", "concat_channels", "relu", "abs_",
    "sigmoid", "min_with_zero", "add", "sub", "mul", "scalar_mul", "square",
    "sqrt", "clamp", "add_channel_bias", "floor_at", "avg_pool2d", "pad2d", "batch_norm",
    "sum_", "mean", "take_rows", "reshape", "binary_cross_entropy",
    "contrastive_pairs", "finite_diff_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An operand lies outside the domain of the function."""


class UsageError(RuntimeError):
    """The autodiff API was called in an unsupported way."""


class NonFiniteError(FloatingPointError):
    """A tensor holds NaN or Inf."""


_GRAD_ENABLED = True
_ORDERED = False
_BRANCHES: "_BranchLog | None" = None


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def ordered_reductions(enabled: bool = True):
    """Route convolution through the fixed-order accumulation kernel.

    The ordered kernel accumulates over (in_channel, row, col) of the
    kernel in row-major order, one multiply-add at a time per output
    element, so it is bit-identical to a plain nested-loop implementation.
    It is much slower than the BLAS path and meant for verification.
    """
    global _ORDERED
    prev = _ORDERED
    _ORDERED = enabled
    try:
        yield
    finally:
        _ORDERED = prev


class _BranchLog:
    """Branch choices of non-smooth ops, recorded once and then replayed."""

    def __init__(self):
        self.masks: list[np.ndarray] = []
        self.replaying = False
        self.pos = 0

    def take(self, mask: np.ndarray) -> np.ndarray:
        if not self.replaying:
            self.masks.append(mask)
            return mask
        if self.pos >= len(self.masks) or self.masks[self.pos].shape != mask.shape:
            raise UsageError("frozen branches replayed on a different sequence of operations")
        out = self.masks[self.pos]
        self.pos += 1
        return out

    def rewind(self) -> None:
        self.replaying = True
        self.pos = 0


def _branch(mask: np.ndarray) -> np.ndarray:
    """Pass a branch mask through the active branch log, if any."""
    return mask if _BRANCHES is None else _BRANCHES.take(mask)


@contextlib.contextmanager
def _frozen_branches(log: _BranchLog):
    global _BRANCHES
    prev = _BRANCHES
    _BRANCHES = log
    try:
        yield
    finally:
        _BRANCHES = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    """Build a leaf tensor, rejecting non-finite input."""
    t = Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, name=name)
    validate(t)
    return t


def validate(t: Tensor, what: str | None = None) -> Tensor:
    """Raise :class:`NonFiniteError` if ``t`` holds NaN/Inf (data or grad)."""
    label = what or t.name or t.op
    if not np.all(np.isfinite(t.data)):
        bad = np.argwhere(~np.isfinite(t.data))[0].tolist()
        raise NonFiniteError(f"non-finite value in {label} at index {bad}")
    if t.grad is not None and not np.all(np.isfinite(t.grad)):
        bad = np.argwhere(~np.isfinite(t.grad))[0].tolist()
        raise NonFiniteError(f"non-finite gradient in {label} at index {bad}")
    return t


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# --------------------------------------------------------------------------
# graph traversal
# --------------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
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
    """Accumulate d(loss)/d(leaf) into ``grad`` of every requiring leaf.

    Intermediate gradients live only for the duration of the call; leaf
    buffers accumulate across calls until reset with ``zero_grad``.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("tensor is not attached to a graph (no input requires grad)")
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.data.size == 1 or b.data.size == 1:
        return
    # bias row: trailing axis of the larger operand
    small, big = (a, b) if a.ndim < b.ndim else (b, a)
    if small.ndim == 1 and big.ndim >= 1 and small.shape[0] == big.shape[-1]:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                   "mul")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scalar_mul")


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    y = np.sqrt(a.data)

    def back(g):
        safe = np.where(y > 0, y, 1.0)
        return (np.where(y > 0, 0.5 * g / safe, 0.0),)

    return _result(y, (a,), back, "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = _branch(a.data > 0)
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def min_with_zero(a: Tensor) -> Tensor:
    mask = _branch(a.data < 0)
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "min_with_zero")


def abs_(a: Tensor) -> Tensor:
    sign = _branch(np.sign(a.data))
    y = np.where(sign == 0, 0.0, sign * a.data)
    return _result(y, (a,), lambda g: (g * sign,), "abs")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only strictly inside."""
    side = _branch(np.where(a.data <= lo, -1, np.where(a.data >= hi, 1, 0)).astype(np.int8))
    inside = side == 0
    y = np.where(inside, a.data, np.where(side < 0, lo, hi))
    return _result(y, (a,), lambda g: (g * inside,), "clamp")


def floor_at(x: Tensor, floor: Tensor) -> Tensor:
    """``max(x[n,c,...], floor[n,c])`` with per-(sample, channel) floors.

    Where ``x <= floor`` the output is the floor and the gradient goes to it.
    """
    if x.ndim < 2 or floor.shape != x.shape[:2]:
        raise DimensionError(f"floor_at: floor shape {floor.shape} does not match {x.shape[:2]}")
    extra = (1,) * (x.ndim - 2)
    f = floor.data.reshape(floor.shape + extra)
    keep = _branch(x.data > f)
    y = np.where(keep, x.data, f)

    def back(g):
        gx = g * keep
        gf = np.where(keep, 0.0, g)
        if x.ndim > 2:
            gf = gf.reshape(gf.shape[0], gf.shape[1], -1).sum(axis=2)
        return gx, gf

    return _result(y, (x, floor), back, "floor_at")


# --------------------------------------------------------------------------
# reductions, reshapes
# --------------------------------------------------------------------------

def sum_(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _result(np.asarray(a.data.mean()), (a,),
                   lambda g: (np.full(a.shape, float(g) / n),), "mean")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    y = a.data.reshape(shape)
    return _result(y, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take_rows(a: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.intp)

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _result(a.data[idx], (a,), back, "take_rows")


def global_avg_pool(a: Tensor) -> Tensor:
    if a.ndim != 4:
        raise DimensionError(f"global_avg_pool expects [N,C,H,W], got {a.shape}")
    n, c, h, w = a.shape
    if h < 1 or w < 1:
        raise DimensionError("global_avg_pool: empty spatial extent")
    y = a.data.reshape(n, c, h * w).sum(axis=2) / (h * w)

    def back(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], a.shape).copy(),)

    return _result(y, (a,), back, "global_avg_pool")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_channels: leading dims differ ({a.shape} vs {b.shape})")
    c1 = a.shape[1]
    y = np.concatenate([a.data, b.data], axis=1)
    return _result(y, (a, b), lambda g: (g[:, :c1], g[:, c1:]), "concat")


# --------------------------------------------------------------------------
# dense layers
# --------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped [D, K]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} and weight {weight.shape} inner dims differ")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} does not match output width {weight.shape[1]}")
    y = x.data @ weight.data
    if bias is not None:
        y = y + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        grads = [g @ weight.data.T, x.data.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _result(y, parents, back, "linear")


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, (int, np.integer)) else tuple(v)


def pad2d(x: Tensor, pad: int, mode: str = "zeros") -> Tensor:
    """Pad the two spatial axes; ``mode`` is ``zeros`` or ``edge`` (replicate)."""
    if x.ndim != 4:
        raise DimensionError(f"pad2d expects [N,C,H,W], got {x.shape}")
    if pad == 0:
        return x
    n, c, h, w = x.shape
    if mode == "zeros":
        y = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        return _result(y, (x,), lambda g: (g[:, :, pad:pad + h, pad:pad + w],), "pad_zeros")
    if mode != "edge":
        raise ValueError(f"unknown pad mode {mode!r}")
    y = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")

    def back(g):
        g = g.copy()
        g[:, :, pad, :] += g[:, :, :pad, :].sum(axis=2)
        g[:, :, pad + h - 1, :] += g[:, :, pad + h:, :].sum(axis=2)
        g = g[:, :, pad:pad + h, :]
        g[:, :, :, pad] += g[:, :, :, :pad].sum(axis=3)
        g[:, :, :, pad + w - 1] += g[:, :, :, pad + w:].sum(axis=3)
        return (g[:, :, :, pad:pad + w],)

    return _result(y, (x,), back, "pad_edge")


def _conv_ordered(xp: np.ndarray, k: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
    n = xp.shape[0]
    cout, cin, kh, kw = k.shape
    out = np.zeros((n, cout, ho, wo))
    for ci in range(cin):
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, ci, i: i + (ho - 1) * stride + 1: stride, j: j + (wo - 1) * stride + 1: stride]
                out += k[None, :, ci, i, j, None, None] * patch[:, None]
    return out


_WORKSPACE: dict[str, np.ndarray] = {}


def _workspace(role: str, shape: tuple[int, ...]) -> np.ndarray:
    """Reusable scratch buffer, one per role, grown on demand.

    Contents are only valid until the next call with the same role, so
    nothing returned from an op may alias it.
    """
    size = int(np.prod(shape))
    buf = _WORKSPACE.get(role)
    if buf is None or buf.size < size:
        buf = _WORKSPACE[role] = np.empty(size)
    return buf[:size].reshape(shape)


class _FlatGrid:
    """Channel-major padded layout where a kernel tap is a flat offset.

    The padded input is stored as [Cin, N*Hp*Wp (+ tail)]; output position
    (n, h, w) of a stride-1 correlation lives at flat index n*Hp*Wp + h*Wp + w
    and reads input at that index plus ``i*Wp + j`` for tap (i, j).
    """

    def __init__(self, n, cin, h, w, kh, kw, padding):
        self.n, self.cin, self.h, self.w = n, cin, h, w
        self.kh, self.kw, self.p = kh, kw, padding
        self.hp, self.wp = h + 2 * padding, w + 2 * padding
        self.ho1, self.wo1 = self.hp - kh + 1, self.wp - kw + 1
        self.length = n * self.hp * self.wp
        self.tail = (kh - 1) * self.wp + (kw - 1)
        self.offsets = [i * self.wp + j for i in range(kh) for j in range(kw)]

    def pack(self, x: np.ndarray) -> np.ndarray:
        flat = np.zeros((self.cin, self.length + self.tail))
        view = flat[:, : self.length].reshape(self.cin, self.n, self.hp, self.wp)
        view[:, :, self.p: self.p + self.h, self.p: self.p + self.w] = x.transpose(1, 0, 2, 3)
        return flat

    def columns(self, flat: np.ndarray) -> np.ndarray:
        ntap = len(self.offsets)
        cols = _workspace("conv_cols", (self.cin * ntap, self.length))
        view = cols.reshape(self.cin, ntap, self.length)
        for t, off in enumerate(self.offsets):
            view[:, t] = flat[:, off: off + self.length]
        return cols

    def unpack_out(self, y: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
        grid = y.reshape(-1, self.n, self.hp, self.wp)
        sel = grid[:, :, : (ho - 1) * stride + 1: stride, : (wo - 1) * stride + 1: stride]
        # always a copy: ``y`` may live in a workspace buffer
        return np.array(sel.transpose(1, 0, 2, 3), order="C")

    def pack_out_grad(self, g: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
        cout = g.shape[1]
        grid = np.zeros((cout, self.n, self.hp, self.wp))
        grid[:, :, : (ho - 1) * stride + 1: stride, : (wo - 1) * stride + 1: stride] = g.transpose(1, 0, 2, 3)
        return grid.reshape(cout, self.length)

    def unpack_in_grad(self, gcols: np.ndarray) -> np.ndarray:
        gcols = gcols.reshape(self.cin, len(self.offsets), self.length)
        gflat = np.zeros((self.cin, self.length + self.tail))
        for t, off in enumerate(self.offsets):
            gflat[:, off: off + self.length] += gcols[:, t]
        grid = gflat[:, : self.length].reshape(self.cin, self.n, self.hp, self.wp)
        return np.ascontiguousarray(grid[:, :, self.p: self.p + self.h, self.p: self.p + self.w].transpose(1, 0, 2, 3))


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must be [N,Cin,H,W], got {x.shape}")
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d: kernel must be [Cout,Cin,kH,kW], got {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise DimensionError(f"conv2d: Cin axis mismatch (input {cin}, kernel {kcin})")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kH/kW axes must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be positive and padding non-negative")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(f"conv2d: H/W axes ({h}x{w}) + padding too small for {kh}x{kw} kernel")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    grid = _FlatGrid(n, cin, h, w, kh, kw, padding)
    kmat = kernel.data.reshape(cout, cin * kh * kw)

    if _ORDERED:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        y = _conv_ordered(xp, kernel.data, stride, ho, wo)
    else:
        cols = grid.columns(grid.pack(x.data))
        prod = np.matmul(kmat, cols, out=_workspace("conv_out", (cout, grid.length)))
        y = grid.unpack_out(prod, stride, ho, wo)

    def back(g):
        gflat = grid.pack_out_grad(g, stride, ho, wo)
        gx = gk = None
        if kernel.requires_grad:
            gk = (gflat @ grid.columns(grid.pack(x.data)).T).reshape(kernel.shape)
        if x.requires_grad:
            gcols = np.matmul(kmat.T, gflat, out=_workspace("conv_gcols", (cin * kh * kw, grid.length)))
            gx = grid.unpack_in_grad(gcols)
        return gx, gk

    return _result(y, (x, kernel), back, "conv2d")


def centered_conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """Valid correlation of neighbour-minus-center differences with the off-center taps.

    Computes ``y = sum_{t != c} w_t * (x[. + t] - x[.])`` for odd square
    kernels. This equals ``conv2d(x, kernel)`` whenever the kernel's center
    is minus its off-center sum, but a constant input gives exactly zero
    instead of a rounding residue. The center tap is not read, so its
    gradient is zero.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"centered_conv2d: expected 4-D input and kernel, got {x.shape}, {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise DimensionError(f"centered_conv2d: Cin axis mismatch (input {cin}, kernel {kcin})")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"centered_conv2d: kH/kW axes must be odd, got {kh}x{kw}")
    if h < kh or w < kw:
        raise DimensionError(f"centered_conv2d: H/W axes ({h}x{w}) too small for {kh}x{kw} kernel")
    ho, wo = h - kh + 1, w - kw + 1
    ci_, cj_ = kh // 2, kw // 2
    taps = [(i, j) for i in range(kh) for j in range(kw) if (i, j) != (ci_, cj_)]
    center = x.data[:, :, ci_:ci_ + ho, cj_:cj_ + wo]
    diffs = np.empty((n, cin, len(taps), ho, wo))
    for t, (i, j) in enumerate(taps):
        np.subtract(x.data[:, :, i:i + ho, j:j + wo], center, out=diffs[:, :, t])
    cols = diffs.reshape(n, cin * len(taps), ho * wo)
    kflat = kernel.data.reshape(cout, cin, kh * kw)
    keep = [i * kw + j for i, j in taps]
    wmat = kflat[:, :, keep].reshape(cout, cin * len(taps))
    y = np.matmul(wmat, cols).reshape(n, cout, ho, wo)

    def back(g):
        g2 = g.reshape(n, cout, ho * wo)
        gx = gk = None
        if kernel.requires_grad:
            gw = np.einsum("nkp,ntp->kt", g2, cols).reshape(cout, cin, len(taps))
            gk = np.zeros((cout, cin, kh * kw))
            gk[:, :, keep] = gw
            gk = gk.reshape(kernel.shape)
        if x.requires_grad:
            gd = np.matmul(wmat.T, g2).reshape(n, cin, len(taps), ho, wo)
            gx = np.zeros(x.shape)
            for t, (i, j) in enumerate(taps):
                gx[:, :, i:i + ho, j:j + wo] += gd[:, :, t]
            gx[:, :, ci_:ci_ + ho, cj_:cj_ + wo] -= gd.sum(axis=2)
        return gx, gk

    return _result(y, (x, kernel), back, "centered_conv2d")


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 4 or bias.shape != (x.shape[1],):
        raise DimensionError(f"add_channel_bias: bias {bias.shape} does not match channels of {x.shape}")
    y = x.data + bias.data[None, :, None, None]
    return _result(y, (x, bias), lambda g: (g, g.sum(axis=(0, 2, 3))), "channel_bias")


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping average pooling with stride equal to ``size``."""
    if x.ndim != 4:
        raise DimensionError(f"avg_pool2d expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise DimensionError(f"avg_pool2d: spatial size {h}x{w} too small for pool {size}")
    xc = x.data[:, :, : ho * size, : wo * size]
    y = xc.reshape(n, c, ho, size, wo, size).mean(axis=(3, 5))

    def back(g):
        gx = np.zeros(x.shape)
        up = np.repeat(np.repeat(g / (size * size), size, axis=2), size, axis=3)
        gx[:, :, : ho * size, : wo * size] = up
        return (gx,)

    return _result(y, (x,), back, "avg_pool2d")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode batch statistics are used and the running buffers are
    updated in place; otherwise the running buffers are used.
    """
    n, c, h, w = x.shape
    if training:
        m = n * h * w
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    y = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def back(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data[None, :, None, None]
        if training:
            m = n * h * w
            gx = (inv[None, :, None, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            )
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx, gg, gb

    return _result(y, (x, gamma, beta), back, "batch_norm")


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

P_CLAMP = 1e-12


def binary_cross_entropy(p: Tensor, labels) -> Tensor:
    """Mean of -log(p) for label 1 and -log(1-p) for label 0.

    ``p`` is clamped to [1e-12, 1-1e-12]; clamped entries get no gradient.
    """
    y = np.asarray(labels, dtype=np.float64).reshape(p.shape)
    pc = np.clip(p.data, P_CLAMP, 1.0 - P_CLAMP)
    inside = (p.data > P_CLAMP) & (p.data < 1.0 - P_CLAMP)
    losses = np.where(y == 1, -np.log(pc), -np.log1p(-pc))
    n = losses.size

    def back(g):
        dp = np.where(y == 1, -1.0 / pc, 1.0 / (1.0 - pc))
        return (float(g) * dp * inside / n,)

    return _result(np.asarray(losses.sum() / n), (p,), back, "bce")


def contrastive_pairs(features: Tensor, idx_a, idx_b, y, margin: float) -> Tensor:
    """Mean pair loss ``(1-y)/2 d^2 + y/2 max(0, m-d)^2`` over index pairs.

    ``d`` is the Euclidean distance between rows ``idx_a[i]`` and
    ``idx_b[i]``. For a y=1 pair at d=0 the direction is undefined and the
    gradient is taken as 0.
    """
    ia = np.asarray(idx_a, dtype=np.intp)
    ib = np.asarray(idx_b, dtype=np.intp)
    yy = np.asarray(y, dtype=np.float64)
    if not (ia.shape == ib.shape == yy.shape) or ia.ndim != 1 or ia.size == 0:
        raise DimensionError("contrastive_pairs: index and label arrays must be equal-length 1-D")
    if features.ndim != 2:
        raise DimensionError(f"contrastive_pairs: features must be [M,D], got {features.shape}")
    diff = features.data[ia] - features.data[ib]
    d = np.sqrt((diff * diff).sum(axis=1))
    active = _branch(d < margin)
    hinge = np.where(active, margin - d, 0.0)
    per = (1.0 - yy) * 0.5 * d * d + yy * 0.5 * hinge * hinge
    npairs = per.size

    def back(g):
        safe = np.where(d > 0, d, 1.0)
        coef = (1.0 - yy) - yy * np.where(d > 0, hinge / safe, 0.0)
        gd = (float(g) / npairs) * coef[:, None] * diff
        out = np.zeros_like(features.data)
        np.add.at(out, ia, gd)
        np.add.at(out, ib, -gd)
        return (out,)

    return _result(np.asarray(per.sum() / npairs), (features,), back, "contrastive")


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

_EPS64 = float(np.finfo(np.float64).eps)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                      indices: Sequence[int] | None = None, freeze_branches: bool = False) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``f`` maps ``x`` to a scalar tensor; it may also close over other
    tensors, in which case ``x`` is simply the one being perturbed. Flat
    components with ``|x_i| < 10 h`` are skipped as potential kink points.
    ``indices`` restricts the check to a subset of flat positions.

    With ``freeze_branches`` every non-smooth op (relu, abs, clamp,
    floor_at, the contrastive hinge) keeps the branch it took at ``x``
    while the perturbed points are evaluated. Deep networks have so many
    units near a kink that some stencil ``x +- h`` almost always crosses
    one, and the plain difference then measures a slope that is not the
    derivative at ``x``; freezing makes both sides differentiate the same
    piece. ``f`` must run the same sequence of ops on every call.

    A difference below the round-off resolution of the central difference
    itself, ``4 eps (|f(x+h)| + |f(x-h)|) / (2h)``, counts as agreement:
    below it the stencil cannot tell the two gradients apart.
    """
    prev_flag, prev_grad = x.requires_grad, x.grad
    x.data = np.ascontiguousarray(x.data)
    x.requires_grad = True
    x.grad = None
    branches = _BranchLog() if freeze_branches else None
    try:
        with contextlib.ExitStack() as stack:
            if branches is not None:
                stack.enter_context(_frozen_branches(branches))
            out = f(x)
        if out.requires_grad:
            backward(out)
        g_ad = np.zeros(x.data.size) if x.grad is None else x.grad.reshape(-1).copy()
        flat = x.data.reshape(-1)
        positions = range(flat.size) if indices is None else indices

        def at(value):
            flat[i] = value
            with contextlib.ExitStack() as stack:
                if branches is not None:
                    branches.rewind()
                    stack.enter_context(_frozen_branches(branches))
                return float(f(x).data)

        worst = 0.0
        with no_grad():
            for i in positions:
                xi = flat[i]
                if abs(xi) < 10 * h:
                    continue
                fp, fm = at(xi + h), at(xi - h)
                flat[i] = xi
                g_fd = (fp - fm) / (2 * h)
                gap = abs(g_ad[i] - g_fd)
                if gap <= _EPS64 * 4 * (abs(fp) + abs(fm)) / (2 * h):
                    continue
                err = gap / max(1e-12, abs(g_ad[i]) + abs(g_fd))
                worst = max(worst, err)
        return worst
    finally:
        x.requires_grad, x.grad = prev_flag, prev_grad
