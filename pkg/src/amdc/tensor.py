"""Dense float64 tensors with a reverse-mode differentiation tape.

Every learnable component in this package is built on this module. The
design is a classic Wengert list: operations executed inside a ``with
Tape():`` block append nodes to the active tape, and :func:`backward`
replays the tape in reverse to accumulate vector-Jacobian products into a
:class:`GradMap` keyed by the leaf tensors.

Conventions:

* all data is 64-bit IEEE, row-major;
* there is no implicit broadcasting — elementwise operands must have equal
  shapes (scalars are accepted explicitly);
* tensors are immutable values after construction; the optimizer produces
  new leaves rather than mutating old ones;
* a tape is confined to one logical execution context, and may be replayed
  any number of times (``backward`` does not consume it).
"""

from __future__ import annotations

import itertools
import math
from collections import namedtuple
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor", "Tape", "GradMap", "no_tape",
    "tensor", "zeros", "full", "uniform", "gaussian",
    "add", "sub", "mul", "scale", "matmul", "conv2d",
    "sigmoid", "relu", "gelu", "softmax", "layer_norm",
    "reshape", "permute", "roll", "window_partition", "window_merge",
    "upsample", "downsample",
    "sum_all", "mean_all", "sum_axis", "repeat_axis", "add_vec", "concat",
    "custom_op", "backward", "grad_check",
]

_ids = itertools.count()

# Inputs beyond this magnitude are clamped before exp() so sigmoid stays
# strictly inside (0, 1) in float64.
_SIG_CLAMP = 36.0

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def check_shape(dims: Sequence[int]) -> tuple[int, ...]:
    """Validate extents (every extent >= 1) and return them as a tuple."""
    dims = tuple(int(d) for d in dims)
    if any(d < 1 for d in dims):
        raise ShapeError(f"invalid shape {dims}: all extents must be >= 1")
    return dims


# ======================================================================
# Tensor, tape and gradient map
# ======================================================================

_Node = namedtuple("_Node", "name out_id inputs")  # inputs: ((leaf_id, vjp), ...)


class Tensor:
    """Immutable dense float64 array plus differentiation bookkeeping."""

    __slots__ = ("data", "requires_grad", "_id", "_tape", "_node_idx")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        check_shape(arr.shape)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._id = next(_ids)
        self._tape = None
        self._node_idx = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all arithmetic routes through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, c):
        if isinstance(c, Tensor):
            raise ContractError("tensor/tensor division is not provided; divide by a scalar")
        return scale(self, 1.0 / float(c))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only record of operations; topological order equals append order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


class _TapeOff:
    """Context manager that suspends recording (used by finite differences)."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


def no_tape() -> _TapeOff:
    return _TapeOff()


_TAPE_STACK: list = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class GradMap:
    """Leaf tensor id -> gradient array. Missing entries mean zero gradient."""

    def __init__(self, grads: dict):
        self._grads = grads

    def get(self, t: Tensor):
        arr = self._grads.get(t._id)
        return None if arr is None else Tensor(arr)

    def __contains__(self, t: Tensor) -> bool:
        return t._id in self._grads

    def __getitem__(self, t: Tensor) -> Tensor:
        g = self.get(t)
        if g is None:
            raise KeyError(f"no gradient recorded for tensor id {t._id}")
        return g

    def __len__(self):
        return len(self._grads)


def custom_op(name: str, out_data: np.ndarray, pairs) -> Tensor:
    """Create a tensor from a hand-written operation.

    ``pairs`` is a sequence of ``(input_tensor, vjp)`` where ``vjp`` maps the
    output gradient array to this input's gradient array (or ``None`` for
    non-differentiable inputs). This is the extension point used by the
    optics module for its custom linear operators.
    """
    rg = any(t.requires_grad for t, _ in pairs)
    out = Tensor(out_data, requires_grad=rg)
    tape = _active_tape()
    if rg and tape is not None:
        recorded = tuple(
            (t._id, fn) for t, fn in pairs if t.requires_grad and fn is not None
        )
        tape.nodes.append(_Node(name, out._id, recorded))
        out._tape = tape
        out._node_idx = len(tape.nodes) - 1
    return out


def backward(root: Tensor) -> GradMap:
    """Reverse sweep from a scalar root; returns gradients for all leaves.

    The tape is left intact, so several roots recorded on the same tape can
    each be differentiated; the training loop simply opens a fresh tape per
    step.
    """
    if root.size != 1:
        raise ContractError("backward() root must be a single-element tensor")
    if root._tape is None:
        raise ContractError("backward() root was not produced by a taped computation")
    tape = root._tape
    grads: dict = {root._id: np.ones_like(root.data)}
    for node in reversed(tape.nodes[: root._node_idx + 1]):
        g = grads.pop(node.out_id, None)
        if g is None:
            continue
        for leaf_id, vjp in node.inputs:
            contrib = vjp(g)
            prev = grads.get(leaf_id)
            if prev is None:
                grads[leaf_id] = contrib
            else:
                grads[leaf_id] = prev + contrib
    return GradMap(grads)


# ======================================================================
# Creation
# ======================================================================

def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(check_shape(shape)), requires_grad=requires_grad)


def full(shape, value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(check_shape(shape), float(value)), requires_grad=requires_grad)


def uniform(shape, seed: int, requires_grad: bool = False) -> Tensor:
    """Uniform samples in [0, 1); deterministic per seed."""
    rng = np.random.default_rng(seed)
    return Tensor(rng.random(check_shape(shape)), requires_grad=requires_grad)


def gaussian(shape, seed: int, requires_grad: bool = False) -> Tensor:
    """Standard normal samples (mean 0, stddev 1); scale at the call site."""
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal(check_shape(shape)), requires_grad=requires_grad)


# ======================================================================
# Elementwise arithmetic (no implicit broadcasting)
# ======================================================================

def _as_scalar(x) -> float:
    if isinstance(x, (int, float, np.integer, np.floating)):
        return float(x)
    raise ShapeError(f"expected a scalar, got {type(x).__name__}")


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape} "
                         "(no implicit broadcasting)")


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "add")
        out = a.data + b.data
        return custom_op("add", out, [(a, lambda g: g), (b, lambda g: g)])
    c = _as_scalar(b)
    return custom_op("add_scalar", a.data + c, [(a, lambda g: g)])


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "sub")
        out = a.data - b.data
        return custom_op("sub", out, [(a, lambda g: g), (b, lambda g: -g)])
    c = _as_scalar(b)
    return custom_op("sub_scalar", a.data - c, [(a, lambda g: g)])


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "mul")
        ad, bd = a.data, b.data
        return custom_op("mul", ad * bd, [(a, lambda g: g * bd), (b, lambda g: g * ad)])
    c = _as_scalar(b)
    return custom_op("mul_scalar", a.data * c, [(a, lambda g: g * c)])


def scale(a: Tensor, c: float) -> Tensor:
    return mul(a, _as_scalar(c))


def neg(a: Tensor) -> Tensor:
    return custom_op("neg", -a.data, [(a, lambda g: -g)])


# ======================================================================
# Linear algebra and convolution
# ======================================================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return custom_op(
        "matmul", ad @ bd,
        [(a, lambda g: g @ bd.T), (b, lambda g: ad.T @ g)],
    )


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation.

    Args:
        x: input features, shape (C_in, H, W).
        k: kernels, shape (C_out, C_in, kh, kw) with odd kh, kw.
        stride: positive step between output positions.
        pad: zero padding applied to both spatial borders.

    Returns:
        Features of shape (C_out, H', W') with H' = (H + 2*pad - kh)/stride + 1;
        a non-integral extent raises ShapeError.
    """
    if x.data.ndim != 3 or k.data.ndim != 4:
        raise ShapeError(f"conv2d expects x rank 3 and k rank 4, got {x.shape}, {k.shape}")
    c_out, c_in, kh, kw = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if x.shape[0] != c_in:
        raise ShapeError(f"conv2d channel mismatch: x has {x.shape[0]}, kernel expects {c_in}")
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d requires stride >= 1 and pad >= 0")
    _, h, w = x.shape
    if (h + 2 * pad - kh) % stride or (w + 2 * pad - kw) % stride:
        raise ShapeError(f"conv2d output extent is not integral for input {x.shape}, "
                         f"kernel {kh}x{kw}, stride {stride}, pad {pad}")
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (w + 2 * pad - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError("conv2d output would be empty")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    out = np.tensordot(k.data, win, axes=([1, 2, 3], [0, 3, 4]))

    kd = k.data

    def vjp_x(g):
        # Scatter grad back through every kernel offset.
        t = np.tensordot(kd, g, axes=([0], [0]))  # (C_in, kh, kw, H', W')
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + (h_out - 1) * stride + 1:stride,
                    j:j + (w_out - 1) * stride + 1:stride] += t[:, i, j]
        return gxp[:, pad:pad + h, pad:pad + w] if pad else gxp

    def vjp_k(g):
        return np.tensordot(g, win, axes=([1, 2], [1, 2]))

    return custom_op("conv2d", out, [(x, vjp_x), (k, vjp_k)])


# ======================================================================
# Activations and normalization
# ======================================================================

def sigmoid(x: Tensor) -> Tensor:
    d = np.clip(x.data, -_SIG_CLAMP, _SIG_CLAMP)
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                   np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def vjp(g):
        return g * out * (1.0 - out)

    return custom_op("sigmoid", out, [(x, vjp)])


def relu(x: Tensor) -> Tensor:
    d = x.data
    out = np.maximum(d, 0.0)
    return custom_op("relu", out, [(x, lambda g: g * (d > 0.0))])


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    d = x.data
    cdf = 0.5 * (1.0 + erf(d * _INV_SQRT2))
    out = d * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * d * d) * _INV_SQRT2PI
        return g * (cdf + d * pdf)

    return custom_op("gelu", out, [(x, vjp)])


def softmax(x: Tensor, axis: int) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True))

    return custom_op("softmax", out, [(x, vjp)])


def layer_norm(x: Tensor, axis: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis``, then affine.

    ``gamma`` and ``beta`` are rank-1 with length equal to the axis extent
    and are applied along that axis at every other position.
    """
    nd = x.data.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"layer_norm axis {axis} invalid for shape {x.shape}")
    axis = axis % nd
    n = x.shape[axis]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm gamma/beta must have shape ({n},), got "
                         f"{gamma.shape} and {beta.shape}")
    bshape = [1] * nd
    bshape[axis] = n
    gam = gamma.data.reshape(bshape)
    bet = beta.data.reshape(bshape)

    mean = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gam + bet

    other_axes = tuple(i for i in range(nd) if i != axis)

    def vjp_x(g):
        gh = g * gam
        m1 = gh.mean(axis=axis, keepdims=True)
        m2 = (gh * xhat).mean(axis=axis, keepdims=True)
        return (gh - m1 - xhat * m2) * inv_std

    def vjp_gamma(g):
        return (g * xhat).sum(axis=other_axes)

    def vjp_beta(g):
        return g.sum(axis=other_axes)

    return custom_op("layer_norm", out,
                     [(x, vjp_x), (gamma, vjp_gamma), (beta, vjp_beta)])


# ======================================================================
# Bijective index remappings
# ======================================================================

def reshape(x: Tensor, shape) -> Tensor:
    shape = check_shape(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape {x.shape} -> {shape} changes element count")
    old = x.shape
    return custom_op("reshape", x.data.reshape(shape),
                     [(x, lambda g: g.reshape(old))])


def permute(x: Tensor, order) -> Tensor:
    order = tuple(int(o) for o in order)
    if sorted(order) != list(range(x.data.ndim)):
        raise ShapeError(f"permute order {order} invalid for rank {x.data.ndim}")
    inverse = tuple(np.argsort(order))
    return custom_op("permute", np.transpose(x.data, order),
                     [(x, lambda g: np.transpose(g, inverse))])


def roll(x: Tensor, axis: int, offset: int) -> Tensor:
    """Cyclic shift by ``offset`` along ``axis``; inverse is roll(-offset)."""
    return custom_op("roll", np.roll(x.data, offset, axis=axis),
                     [(x, lambda g: np.roll(g, -offset, axis=axis))])


def window_partition(x: Tensor, window: int) -> Tensor:
    """(C, H, W) -> (C, n_tiles, window*window) tile flattening."""
    if x.data.ndim != 3:
        raise ShapeError(f"window_partition expects rank 3, got {x.shape}")
    c, h, w = x.shape
    if h % window or w % window:
        raise ShapeError(f"window {window} does not divide spatial extents {h}x{w}")
    nh, nw = h // window, w // window
    out = (x.data.reshape(c, nh, window, nw, window)
           .transpose(0, 1, 3, 2, 4)
           .reshape(c, nh * nw, window * window))

    def vjp(g):
        return (g.reshape(c, nh, nw, window, window)
                .transpose(0, 1, 3, 2, 4)
                .reshape(c, h, w))

    return custom_op("window_partition", out, [(x, vjp)])


def window_merge(x: Tensor, window: int, height: int, width: int) -> Tensor:
    """Inverse of :func:`window_partition` for the given spatial extents."""
    if x.data.ndim != 3:
        raise ShapeError(f"window_merge expects rank 3, got {x.shape}")
    c, nt, ww = x.shape
    nh, nw = height // window, width // window
    if height % window or width % window or nt != nh * nw or ww != window * window:
        raise ShapeError(f"window_merge: {x.shape} inconsistent with "
                         f"{height}x{width} windows of {window}")
    out = (x.data.reshape(c, nh, nw, window, window)
           .transpose(0, 1, 3, 2, 4)
           .reshape(c, height, width))

    def vjp(g):
        return (g.reshape(c, nh, window, nw, window)
                .transpose(0, 1, 3, 2, 4)
                .reshape(c, nt, ww))

    return custom_op("window_merge", out, [(x, vjp)])


# ======================================================================
# Resampling
# ======================================================================

def upsample(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor replication of the spatial axes of (C, H, W)."""
    if x.data.ndim != 3:
        raise ShapeError(f"upsample expects rank 3, got {x.shape}")
    if factor < 1:
        raise ShapeError("upsample factor must be >= 1")
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def vjp(g):
        return g.reshape(c, h, factor, w, factor).sum(axis=(2, 4))

    return custom_op("upsample", out, [(x, vjp)])


def downsample(x: Tensor, factor: int) -> Tensor:
    """Average pooling of the spatial axes of (C, H, W)."""
    if x.data.ndim != 3:
        raise ShapeError(f"downsample expects rank 3, got {x.shape}")
    c, h, w = x.shape
    if factor < 1 or h % factor or w % factor:
        raise ShapeError(f"downsample factor {factor} does not divide {h}x{w}")
    out = x.data.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    inv = 1.0 / (factor * factor)

    def vjp(g):
        return np.repeat(np.repeat(g, factor, axis=1), factor, axis=2) * inv

    return custom_op("downsample", out, [(x, vjp)])


# ======================================================================
# Reductions, replication, concatenation
# ======================================================================

def sum_all(x: Tensor) -> Tensor:
    shp = x.shape
    return custom_op("sum_all", np.asarray(x.data.sum()),
                     [(x, lambda g: np.broadcast_to(g, shp).copy())])


def mean_all(x: Tensor) -> Tensor:
    shp, n = x.shape, x.size
    return custom_op("mean_all", np.asarray(x.data.mean()),
                     [(x, lambda g: np.broadcast_to(g / n, shp).copy())])


def sum_axis(x: Tensor, axis: int) -> Tensor:
    nd = x.data.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"sum_axis axis {axis} invalid for shape {x.shape}")
    axis = axis % nd
    n = x.shape[axis]

    def vjp(g):
        return np.repeat(np.expand_dims(g, axis), n, axis=axis)

    return custom_op("sum_axis", x.data.sum(axis=axis), [(x, vjp)])


def repeat_axis(x: Tensor, n: int, axis: int) -> Tensor:
    """Insert a new axis of ``n`` identical copies (explicit replication)."""
    if n < 1:
        raise ShapeError("repeat count must be >= 1")
    out = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return custom_op("repeat_axis", out, [(x, lambda g: g.sum(axis=axis))])


def add_vec(x: Tensor, v: Tensor, axis: int) -> Tensor:
    """Add a rank-1 vector along ``axis`` (an explicit bias broadcast)."""
    nd = x.data.ndim
    axis = axis % nd
    if v.data.ndim != 1 or v.shape[0] != x.shape[axis]:
        raise ShapeError(f"add_vec: vector {v.shape} does not match axis {axis} "
                         f"of {x.shape}")
    bshape = [1] * nd
    bshape[axis] = v.shape[0]
    out = x.data + v.data.reshape(bshape)
    other_axes = tuple(i for i in range(nd) if i != axis)

    return custom_op("add_vec", out,
                     [(x, lambda g: g), (v, lambda g: g.sum(axis=other_axes))])


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    nd = parts[0].data.ndim
    axis = axis % nd
    for p in parts[1:]:
        if p.data.ndim != nd:
            raise ShapeError("concat rank mismatch")
        for ax in range(nd):
            if ax != axis and p.shape[ax] != parts[0].shape[ax]:
                raise ShapeError(f"concat shapes disagree off-axis: "
                                 f"{parts[0].shape} vs {p.shape}")
    out = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def make_vjp(i):
        sl = [slice(None)] * nd
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return custom_op("concat", out, [(p, make_vjp(i)) for i, p in enumerate(parts)])


# ======================================================================
# Gradient checking (finite-difference oracle)
# ======================================================================

def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor],
               eps: float = 1e-6) -> float:
    """Compare tape gradients of ``f`` to central finite differences.

    ``f`` must be scalar-valued and pure. Every coordinate of every tensor
    in ``inputs`` is perturbed by ``+-eps``; the worst relative error is
    returned, with differences below the 1e-8 absolute floor counted as
    zero.
    """
    leaves = [Tensor(t.data.copy(), requires_grad=True) for t in inputs]
    with Tape():
        out = f(*leaves)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ContractError("grad_check requires a scalar-valued function")
    gm = backward(out)

    def eval_at(arrays) -> float:
        with no_tape():
            r = f(*[Tensor(a) for a in arrays])
        return float(r.data.reshape(-1)[0])

    base = [l.data.copy() for l in leaves]
    worst = 0.0
    for which, leaf in enumerate(leaves):
        g = gm.get(leaf)
        g_flat = (np.zeros(leaf.size) if g is None else g.data.reshape(-1))
        flat = base[which].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = eval_at(base)
            flat[i] = orig - eps
            f_minus = eval_at(base)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            diff = abs(g_flat[i] - fd)
            if diff > 1e-8:
                rel = diff / max(abs(g_flat[i]), abs(fd))
                worst = max(worst, rel)
    return worst
