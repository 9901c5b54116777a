"""Reverse-mode automatic differentiation over double-precision arrays.

Every operation records the tensors it consumed and a closure holding the
context its backward rule needs; the recorded nodes form a DAG whose
construction order is a topological order. Calling :meth:`Tensor.backward`
on a scalar result walks that DAG once in reverse and accumulates gradients
into every ``requires_grad`` tensor, summing contributions when a tensor
feeds several consumers.

Image tensors are channel-first: ``(C, H, W)`` or ``(N, C, H, W)``.
All arithmetic is float64.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.special import erf

from .errors import ShapeError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A float64 array with an optional gradient slot.

    Leaf tensors created with ``requires_grad=True`` start with a zero
    gradient; tensors produced by operations carry references to their
    operands so gradients can flow back through them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            # first contribution: own a writable copy (grad may be a view)
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad += grad

    def backward(self) -> None:
        """Run the chain rule from this scalar back to every leaf.

        Each recorded node is visited exactly once, in reverse topological
        order; tensors consumed by several operations receive the sum of
        their branch gradients. Leaves that do not lie on a path to this
        tensor keep their zero gradient.
        """
        if self.data.size != 1:
            raise ValueError("backward requires a scalar tensor")
        if not self.requires_grad:
            return
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # ------------------------------------------------------------------
    # arithmetic
    # ------------------------------------------------------------------

    def __add__(self, other):
        other = _coerce(other)
        a, b = self, other

        def backward_fn(g):
            a._accumulate(_unbroadcast(g, a.data.shape))
            b._accumulate(_unbroadcast(g, b.data.shape))

        return _make(a.data + b.data, (a, b), backward_fn)

    __radd__ = __add__

    def __sub__(self, other):
        other = _coerce(other)
        a, b = self, other

        def backward_fn(g):
            a._accumulate(_unbroadcast(g, a.data.shape))
            b._accumulate(_unbroadcast(-g, b.data.shape))

        return _make(a.data - b.data, (a, b), backward_fn)

    def __rsub__(self, other):
        return _coerce(other).__sub__(self)

    def __neg__(self):
        a = self

        def backward_fn(g):
            a._accumulate(-g)

        return _make(-a.data, (a,), backward_fn)

    def __mul__(self, other):
        other = _coerce(other)
        a, b = self, other

        def backward_fn(g):
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

        return _make(a.data * b.data, (a, b), backward_fn)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _coerce(other)
        a, b = self, other
        out_data = a.data / b.data

        def backward_fn(g):
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
            b._accumulate(_unbroadcast(-g * out_data / b.data, b.data.shape))

        return _make(out_data, (a, b), backward_fn)

    def __rtruediv__(self, other):
        return _coerce(other).__truediv__(self)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise ValueError("power expects a scalar exponent")
        a = self
        p = float(exponent)

        def backward_fn(g):
            a._accumulate(g * p * a.data ** (p - 1.0))

        return _make(a.data**p, (a,), backward_fn)

    def __matmul__(self, other):
        other = _coerce(other)
        a, b = self, other
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise ShapeError("matmul expects 2-d operands")
        if a.data.shape[1] != b.data.shape[0]:
            raise ShapeError(
                f"matmul inner dimensions differ: {a.data.shape} vs {b.data.shape}"
            )

        def backward_fn(g):
            a._accumulate(g @ b.data.T)
            b._accumulate(a.data.T @ g)

        return _make(a.data @ b.data, (a, b), backward_fn)

    def __getitem__(self, idx):
        # basic (slice/int) indexing only; duplicates in fancy indices would
        # need scatter-add, which nothing here requires
        a = self
        out_data = np.ascontiguousarray(a.data[idx])

        def backward_fn(g):
            buf = np.zeros_like(a.data)
            buf[idx] = g.reshape(buf[idx].shape)
            a._accumulate(buf)

        return _make(out_data, (a,), backward_fn)

    # ------------------------------------------------------------------
    # reductions and reshaping
    # ------------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        axes = _normalize_axes(axis, a.data.ndim)
        out = a.data.sum(axis=axes, keepdims=keepdims)

        def backward_fn(g):
            gg = g
            if axes is not None and not keepdims:
                gg = np.expand_dims(g, axis=axes)
            a._accumulate(np.broadcast_to(gg, a.data.shape))

        return _make(out, (a,), backward_fn)

    def mean(self, axis=None, keepdims: bool = False):
        a = self
        axes = _normalize_axes(axis, a.data.ndim)
        out = a.data.mean(axis=axes, keepdims=keepdims)
        if axes is None:
            count = a.data.size
        else:
            count = int(np.prod([a.data.shape[i] for i in axes]))

        def backward_fn(g):
            gg = g
            if axes is not None and not keepdims:
                gg = np.expand_dims(g, axis=axes)
            a._accumulate(np.broadcast_to(gg / count, a.data.shape))

        return _make(out, (a,), backward_fn)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        orig = a.data.shape

        def backward_fn(g):
            a._accumulate(g.reshape(orig))

        return _make(a.data.reshape(shape), (a,), backward_fn)

    def t(self):
        if self.data.ndim != 2:
            raise ShapeError("t() expects a 2-d tensor")
        a = self

        def backward_fn(g):
            a._accumulate(g.T)

        return _make(a.data.T.copy(), (a,), backward_fn)

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)

        def backward_fn(g):
            a._accumulate(g * 0.5 / out_data)

        return _make(out_data, (a,), backward_fn)

    def clamp_min(self, floor: float):
        """Elementwise max with ``floor``; gradient flows where data > floor."""
        a = self
        mask = a.data > floor

        def backward_fn(g):
            a._accumulate(g * mask)

        return _make(np.maximum(a.data, floor), (a,), backward_fn)


def _coerce(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data if isinstance(data, np.ndarray) else _as_array(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out._parents = ()
        out._backward_fn = None
    return out


def _normalize_axes(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


# ----------------------------------------------------------------------
# neural-network operations
# ----------------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(
    gcols: np.ndarray,
    padded_shape: tuple[int, int, int, int],
    kh: int,
    kw: int,
    stride: int,
    oh: int,
    ow: int,
) -> np.ndarray:
    n, c = padded_shape[:2]
    g6 = gcols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros(padded_shape, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += g6[:, :, i, j]
    return out


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: int = 0, stride: int = 1) -> Tensor:
    """2-d cross-correlation with zero padding and per-channel bias.

    ``x`` is ``(N, C_in, H, W)``, ``kernel`` is ``(C_out, C_in, kH, kW)``,
    ``bias`` is ``(C_out,)``. Output spatial size is
    ``floor((H + 2*padding - kH) / stride) + 1`` per axis.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects a 4-d input and a 4-d kernel")
    if not isinstance(stride, int) or stride < 1:
        raise ValueError("stride must be a positive integer")
    if not isinstance(padding, int) or padding < 0:
        raise ValueError("padding must be a non-negative integer")
    n, c_in, h, w = x.data.shape
    c_out, kc, kh, kw = kernel.data.shape
    if kc != c_in:
        raise ShapeError(f"kernel expects {kc} input channels, input has {c_in}")
    if bias.data.shape != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},), got {bias.data.shape}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError("kernel larger than padded input")

    w2 = kernel.data.reshape(c_out, -1)
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        # pointwise convolution is pure channel mixing; no patch extraction
        xf = x.data.reshape(n, c_in, h * w)
        out = np.matmul(w2, xf).reshape(n, c_out, h, w) + bias.data.reshape(1, -1, 1, 1)

        def backward_fn(g):
            g2 = g.reshape(n, c_out, h * w)
            if bias.requires_grad:
                bias._accumulate(g2.sum(axis=(0, 2)))
            if kernel.requires_grad:
                gw = np.matmul(g2, xf.transpose(0, 2, 1)).sum(axis=0)
                kernel._accumulate(gw.reshape(kernel.data.shape))
            if x.requires_grad:
                x._accumulate(np.matmul(w2.T, g2).reshape(n, c_in, h, w))

        return _make(out, (x, kernel, bias), backward_fn)

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    hp, wp = xp.shape[2:]
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    out = np.matmul(w2, cols).reshape(n, c_out, oh, ow) + bias.data.reshape(1, -1, 1, 1)

    def backward_fn(g):
        g2 = g.reshape(n, c_out, oh * ow)
        if bias.requires_grad:
            bias._accumulate(g2.sum(axis=(0, 2)))
        if kernel.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            kernel._accumulate(gw.reshape(kernel.data.shape))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            gxp = _col2im(gcols, (n, c_in, hp, wp), kh, kw, stride, oh, ow)
            x._accumulate(gxp[:, :, padding : padding + h, padding : padding + w])

    return _make(out, (x, kernel, bias), backward_fn)


def _resize_grid(src: int, dst: int):
    """Half-pixel-center source coordinates, clamped to the valid range."""
    coords = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    coords = np.clip(coords, 0.0, float(src - 1))
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    frac = coords - lo
    return lo, hi, frac


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling with half-pixel centers and edge clamping.

    Written in lerp form (``a + f*(b - a)``) so constant inputs reproduce
    exactly and a same-size resize is the identity bit for bit.
    """
    if x.data.ndim != 4:
        raise ShapeError("bilinear_resize expects a 4-d input")
    if out_h < 1 or out_w < 1:
        raise ValueError("target size must be at least 1x1")
    n, c, h, w = x.data.shape
    y0, y1, fy = _resize_grid(h, out_h)
    x0, x1, fx = _resize_grid(w, out_w)
    fy_col = fy[:, None]

    top = x.data[:, :, y0, :]
    bot = x.data[:, :, y1, :]
    rows = top + fy_col * (bot - top)
    left = rows[:, :, :, x0]
    right = rows[:, :, :, x1]
    out = left + fx * (right - left)

    def backward_fn(g):
        if not x.requires_grad:
            return
        g_rows = np.zeros((n, c, out_h, w), dtype=np.float64)
        np.add.at(g_rows, (slice(None), slice(None), slice(None), x0), g * (1.0 - fx))
        np.add.at(g_rows, (slice(None), slice(None), slice(None), x1), g * fx)
        gx = np.zeros((n, c, h, w), dtype=np.float64)
        np.add.at(gx, (slice(None), slice(None), y0, slice(None)), g_rows * (1.0 - fy_col))
        np.add.at(gx, (slice(None), slice(None), y1, slice(None)), g_rows * fy_col)
        x._accumulate(gx)

    return _make(out, (x,), backward_fn)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit ``x * Phi(x)`` (erf form)."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def backward_fn(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        x._accumulate(g * (cdf + x.data * pdf))

    return _make(out, (x,), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic function."""
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward_fn(g):
        x._accumulate(g * out * (1.0 - out))

    return _make(out, (x,), backward_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for ``x`` of shape ``(N, d_in)``."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError("linear expects 2-d input and weight")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(
            f"input width {x.data.shape[1]} does not match weight width {weight.data.shape[1]}"
        )
    if bias.data.shape != (weight.data.shape[0],):
        raise ShapeError("bias width must match weight rows")
    out = x.data @ weight.data.T + bias.data

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return _make(out, (x, weight, bias), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: ``(N, C, H, W) -> (N, C)``."""
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool expects a 4-d input")
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def backward_fn(g):
        x._accumulate(np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape))

    return _make(out, (x,), backward_fn)


def max_pool2d(x: Tensor, size: int = 2, stride: int = 2) -> Tensor:
    """Max pooling; ties route gradient to the first window position in
    row-major scan order."""
    if x.data.ndim != 4:
        raise ShapeError("max_pool2d expects a 4-d input")
    n, c, h, w = x.data.shape
    if h < size or w < size:
        raise ShapeError("input smaller than the pooling window")
    oh = (h - size) // stride + 1
    ow = (w - size) // stride + 1
    win = np.empty((n, c, oh, ow, size * size), dtype=np.float64)
    for i in range(size):
        for j in range(size):
            win[:, :, :, :, i * size + j] = x.data[
                :, :, i : i + stride * oh : stride, j : j + stride * ow : stride
            ]
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        if not x.requires_grad:
            return
        wi, wj = arg // size, arg % size
        oy = np.arange(oh)[None, None, :, None]
        ox = np.arange(ow)[None, None, None, :]
        ys = oy * stride + wi
        xs = ox * stride + wj
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        gx = np.zeros_like(x.data)
        np.add.at(gx, (ni, ci, ys, xs), g)
        x._accumulate(gx)

    return _make(out, (x,), backward_fn)


def softmax(x: Tensor) -> Tensor:
    """Row-wise exp-normalization of a ``(N, K)`` tensor, max-shifted for
    stability; invariant under adding a constant to a row."""
    if x.data.ndim != 2:
        raise ShapeError("softmax expects a 2-d input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=1, keepdims=True)

    def backward_fn(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        x._accumulate(out * (g - inner))

    return _make(out, (x,), backward_fn)


def cross_entropy_loss(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under row-wise softmax."""
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy_loss expects 2-d logits")
    n, k = logits.data.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range for {k} classes")
    m = logits.data.max(axis=1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + m
    losses = lse[:, 0] - logits.data[np.arange(n), labels]
    out = losses.mean()

    def backward_fn(g):
        p = np.exp(logits.data - lse)
        p[np.arange(n), labels] -= 1.0
        logits._accumulate(p * (float(g.reshape(())) / n))

    return _make(out, (logits,), backward_fn)


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    """Learnable tensor drawn uniformly from ``[-sqrt(1/fan_in), +sqrt(1/fan_in)]``."""
    bound = float(np.sqrt(1.0 / fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(shape: tuple[int, ...]) -> Tensor:
    """Zero-initialized learnable tensor (used for every bias)."""
    return Tensor(np.zeros(shape), requires_grad=True)
