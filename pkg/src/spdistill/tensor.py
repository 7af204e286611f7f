"""Dense tensors with reverse-mode automatic differentiation.

Everything is backed by numpy arrays. An op records a backward closure on
its output tensor; calling ``backward()`` on a scalar walks the recorded
graph in reverse topological order and accumulates gradients additively
into every reachable tensor that has ``requires_grad`` set.

Two precision conventions are used throughout the package: float64 for
tests and gradient checks (central differences are unreliable in float32)
and float32 for training runs.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError

__all__ = [
    "Tensor",
    "add",
    "avg_pool2d",
    "conv2d",
    "grad_check",
    "linear",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "relu",
    "reshape",
    "row_l2_normalize",
    "softmax",
    "sqrt",
    "tensor_sum",
    "transpose",
]


class Tensor:
    """A dense n-d float array, optionally tracked for gradients.

    Tensors are immutable after construction except for ``grad``, which is
    populated (additively) during a backward pass. ``grad`` is a plain
    numpy array of the same shape, or None before any backward pass.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw array data, not another Tensor")
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._prev = ()

    # -- construction helper used by every op -------------------------------
    @staticmethod
    def _from_op(data: np.ndarray, parents, backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        tracked = tuple(p for p in parents if p.requires_grad)
        out.requires_grad = bool(tracked)
        # Only tracked parents matter for the traversal; the closure itself
        # re-checks requires_grad before accumulating.
        out._prev = tracked
        out._backward = backward if tracked else None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")

    def detach(self) -> "Tensor":
        """Same data, no gradient tracking and no graph history."""
        return Tensor(self.data)

    def backward(self) -> None:
        """Reverse-mode pass from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ShapeError(f"backward() starts from a scalar, got shape {self.shape}")
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
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))
        if self.grad is None:
            self.grad = np.ones_like(self.data)
        else:
            self.grad = self.grad + np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _lift(-1.0, self.dtype))

    def __sub__(self, other):
        return add(self, -_lift(other, self.dtype))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), -self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; divide by a scalar")
        return mul(self, _lift(1.0 / other, self.dtype))

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        return _pow(self, float(exponent))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # convenience method forms of the module-level reductions
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to ``shape``, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return Tensor._from_op(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return Tensor._from_op(data, (a, b), backward)


def _pow(a: Tensor, exponent: float) -> Tensor:
    data = a.data ** exponent

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * exponent * a.data ** (exponent - 1.0))

    return Tensor._from_op(data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * (a.data > 0))

    return Tensor._from_op(data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise NumericError("sqrt of negative values")
    data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            # subgradient 0 at the origin keeps losses built on norms of
            # identical inputs finite
            safe = np.where(data > 0, data, 1.0)
            _accumulate(a, np.where(data > 0, g * 0.5 / safe, 0.0))

    return Tensor._from_op(data, (a,), backward)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(a.shape))

    return Tensor._from_op(data, (a,), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    data = a.data.T

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.T)

    return Tensor._from_op(data, (a,), backward)


def permute(a: Tensor, axes: tuple) -> Tensor:
    """Reorder axes (a differentiable numpy transpose)."""
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute axes {axes} invalid for rank {a.ndim}")
    inverse = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))
    data = np.ascontiguousarray(a.data.transpose(axes))

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.transpose(inverse))

    return Tensor._from_op(data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape) if keepdims or g.ndim == 0 else np.full(shape, g)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _expand_reduced(np.asarray(g), a.shape, axis, keepdims))

    return Tensor._from_op(np.asarray(data), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _expand_reduced(np.asarray(g), a.shape, axis, keepdims) / count)

    return Tensor._from_op(np.asarray(data), (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return Tensor._from_op(data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map x @ w + b with b broadcast over rows."""
    return add(matmul(x, w), b)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def _check_rows(z: Tensor, name: str) -> None:
    if z.ndim != 2:
        raise ShapeError(f"{name} expects a b x n matrix, got shape {z.shape}")
    if not np.all(np.isfinite(z.data)):
        raise NumericError(f"{name} received non-finite input")


def softmax(z: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-wise softmax of z / temperature, stabilized by max subtraction."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    _check_rows(z, "softmax")
    scaled = z.data / temperature
    shifted = scaled - scaled.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        if z.requires_grad:
            inner = (g * s).sum(axis=1, keepdims=True)
            _accumulate(z, (s * (g - inner)) / temperature)

    return Tensor._from_op(s, (z,), backward)


def log_softmax(z: Tensor) -> Tensor:
    _check_rows(z, "log_softmax")
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        if z.requires_grad:
            _accumulate(z, g - probs * g.sum(axis=1, keepdims=True))

    return Tensor._from_op(out, (z,), backward)


# ---------------------------------------------------------------------------
# row-wise L2 normalization (shared by Gram rows and attention maps)
# ---------------------------------------------------------------------------

def row_l2_normalize(x: Tensor, zero_eps: float = 1e-12) -> Tensor:
    """Divide each row by its L2 norm; rows with norm < zero_eps stay zero."""
    if x.ndim != 2:
        raise ShapeError(f"row_l2_normalize expects a matrix, got shape {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    live = norms >= zero_eps
    safe = np.where(live, norms, 1.0)
    y = np.where(live, x.data / safe, 0.0)

    def backward(g):
        if x.requires_grad:
            inner = (g * y).sum(axis=1, keepdims=True)
            _accumulate(x, np.where(live, (g - y * inner) / safe, 0.0))

    return Tensor._from_op(y, (x,), backward)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    b, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    _, _, ho, wo, _, _ = win.shape
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
    return np.ascontiguousarray(cols), ho, wo


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation (no kernel flip) over a b x c x h x w batch."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and weight, got {x.shape} and {w.shape}")
    b, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, weight expects {cin_w}")
    if kh != kw:
        raise ShapeError(f"conv2d supports square kernels, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    k = kh
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1 or k > h + 2 * padding or k > wd + 2 * padding:
        raise ShapeError(
            f"conv2d output extent not positive: input {h}x{wd}, kernel {k}, "
            f"stride {stride}, padding {padding}"
        )
    cols, ho, wo = _im2col(x.data, k, stride, padding)
    wmat = w.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * ho * wo, cout)
        if w.requires_grad:
            # cols is recomputed so forward graphs do not pin large buffers
            cols_b, _, _ = _im2col(x.data, k, stride, padding)
            _accumulate(w, (gmat.T @ cols_b).reshape(w.shape))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(b, ho, wo, cin, k, k)
            hp, wp = h + 2 * padding, wd + 2 * padding
            dxp = np.zeros((b, cin, hp, wp), dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + wd]
            _accumulate(x, dxp)

    out = np.ascontiguousarray(out)
    return Tensor._from_op(out, (x, w), backward)


def conv_bias_relu_nhwc(x: Tensor, w: Tensor, bias: Tensor, stride: int = 1,
                        padding: int = 0, activation: str = "relu") -> Tensor:
    """Fused relu(conv + bias) on channels-last (b, h, w, c) activations.

    Numerically equivalent to conv2d -> bias add -> relu on the matching
    channels-first layout, but with a single channels-last im2col gather
    whose innermost runs are whole channel vectors, one GEMM, and a
    zero-copy output reshape. The gathered column matrix stays alive for
    the backward pass (batch * h * w * cin * k * k floats per layer).

    The weight keeps the public (cout, cin, k, k) layout.
    """
    b, h, wd, cin = x.shape
    cout, cin_w, k, kw = w.shape
    if cin != cin_w or k != kw:
        raise ShapeError(f"weight {w.shape} incompatible with input {x.shape}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"empty conv output for input {h}x{wd}, kernel {k}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if padding:
        xp = np.zeros((b, hp, wp, cin), dtype=x.dtype)
        xp[:, padding:padding + h, padding:padding + wd, :] = x.data
    else:
        xp = np.ascontiguousarray(x.data)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    # axis order (b, ho, wo, i, j, c) keeps channel runs contiguous
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(
        b * ho * wo, k * k * cin
    )
    if activation not in ("relu", "none"):
        raise ValueError(f"unknown activation {activation!r}")
    wmat = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0)).reshape(k * k * cin, cout)
    flat = cols @ wmat
    flat += bias.data
    if activation == "relu":
        np.maximum(flat, 0.0, out=flat)
    out = flat.reshape(b, ho, wo, cout)

    def backward(g):
        gmat = g.reshape(b * ho * wo, cout)
        if activation == "relu":
            gmat = gmat * (flat > 0)
        if bias.requires_grad:
            _accumulate(bias, gmat.sum(axis=0))
        if w.requires_grad:
            dwmat = cols.T @ gmat
            _accumulate(w, dwmat.reshape(k, k, cin, cout).transpose(3, 2, 0, 1))
        if x.requires_grad:
            if stride == 1 and ho >= 16:
                # input gradient as a transposed convolution: correlate the
                # padded output gradient with the spatially flipped kernel
                # (one gather + one GEMM instead of a k*k scatter loop);
                # at small spatial extents the padded fringe costs more than
                # the scatter saves, so those keep the scatter path
                gp = np.zeros((b, ho + 2 * (k - 1), wo + 2 * (k - 1), cout),
                              dtype=x.dtype)
                gp[:, k - 1:k - 1 + ho, k - 1:k - 1 + wo, :] = gmat.reshape(
                    b, ho, wo, cout
                )
                gwin = sliding_window_view(gp, (k, k), axis=(1, 2))
                gcols = np.ascontiguousarray(gwin.transpose(0, 1, 2, 4, 5, 3)).reshape(
                    b * hp * wp, k * k * cout
                )
                wback = np.ascontiguousarray(
                    w.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1)
                ).reshape(k * k * cout, cin)
                dxp = (gcols @ wback).reshape(b, hp, wp, cin)
            else:
                dcols = (gmat @ wmat.T).reshape(b, ho, wo, k, k, cin)
                dxp = np.zeros((b, hp, wp, cin), dtype=x.dtype)
                for i in range(k):
                    for j in range(k):
                        dxp[:, i:i + stride * ho:stride,
                            j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
            if padding:
                dxp = dxp[:, padding:padding + h, padding:padding + wd, :]
            _accumulate(x, np.ascontiguousarray(dxp))

    return Tensor._from_op(out, (x, w, bias), backward)


def avg_pool2d(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping average pooling; spatial extents must divide evenly."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d expects rank-4 input, got shape {x.shape}")
    b, c, h, w = x.shape
    if kernel < 1 or h % kernel or w % kernel:
        raise ShapeError(f"avg_pool2d kernel {kernel} must evenly divide spatial dims {h}x{w}")
    ho, wo = h // kernel, w // kernel
    data = x.data.reshape(b, c, ho, kernel, wo, kernel).mean(axis=(3, 5))

    def backward(g):
        if x.requires_grad:
            expanded = np.broadcast_to(
                g[:, :, :, None, :, None], (b, c, ho, kernel, wo, kernel)
            ).reshape(b, c, h, w)
            _accumulate(x, expanded / (kernel * kernel))

    return Tensor._from_op(data, (x,), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is |analytic - numeric| divided by
    max(1, |analytic|, |numeric|). x must be float64.
    """
    if x.dtype != np.float64:
        raise ValueError("grad_check requires a float64 tensor")
    if not x.requires_grad:
        raise ValueError("grad_check requires x.requires_grad")
    x.grad = None
    out = f(x)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    numeric = np.empty(x.size, dtype=np.float64)
    for i in range(x.size):
        orig = x.data.flat[i]
        x.data.flat[i] = orig + eps
        f_plus = f(x).item()
        x.data.flat[i] = orig - eps
        f_minus = f(x).item()
        x.data.flat[i] = orig
        numeric[i] = (f_plus - f_minus) / (2.0 * eps)
    numeric = numeric.reshape(x.shape)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
