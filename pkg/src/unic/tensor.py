"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap row-major NumPy buffers (float32 for training, float64 for
verification runs) and record a tape of parent links plus backward
closures. Calling ``backward()`` on a scalar walks the tape in reverse
topological order. Every operation validates that its output is finite;
NaN or Inf raises :class:`NonFiniteError`.

Gradient correctness is verified against central finite differences via
:func:`backprop_check`, which is the independent oracle for the whole
engine and never shares code with the analytic path.
"""

from __future__ import annotations

import contextlib
import ctypes
import math
import os

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)

# The engine allocates many short-lived multi-MB buffers per forward pass.
# glibc's default mmap threshold hands those straight back to the kernel,
# so every step pays page-fault costs again; keeping them on the heap
# roughly halves step time. Opt out with UNIC_NO_MALLOC_TUNE=1.
if not os.environ.get("UNIC_NO_MALLOC_TUNE"):
    try:
        _libc = ctypes.CDLL("libc.so.6", use_errno=True)
        _libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        _libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except OSError:
        pass

# 0.5 * sqrt(2/pi) shows up in the tanh GELU approximation
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


_finite_checks = True
_grad_enabled = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-operation finiteness validation; returns previous state."""
    global _finite_checks
    previous = _finite_checks
    _finite_checks = bool(enabled)
    return previous


@contextlib.contextmanager
def finite_checks(enabled: bool):
    previous = set_finite_checks(enabled)
    try:
        yield
    finally:
        set_finite_checks(previous)


@contextlib.contextmanager
def no_grad():
    """Skip tape construction inside the block (inference-only forwards)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _assert_finite(data: np.ndarray, op: str) -> None:
    # float64 accumulation cannot overflow at our magnitudes, and any
    # NaN/Inf in the buffer propagates into the sum.
    if not np.isfinite(np.sum(data, dtype=np.float64)):
        raise NonFiniteError(f"non-finite values produced by '{op}'")


class Tensor:
    """N-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        if _finite_checks:
            _assert_finite(arr, "tensor")

    # -- construction used by ops ------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents, backward, op: str) -> "Tensor":
        if _finite_checks:
            _assert_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        needed = (
            tuple(p for p in parents if p.requires_grad) if _grad_enabled else ()
        )
        if needed:
            out.requires_grad = True
            out._parents = needed
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    # -- basic properties ----------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------

    def backward(self, grad=None) -> None:
        """Reverse-mode sweep from this node.

        Without an explicit seed gradient the node must be scalar-valued.
        Intermediate gradients are freed as soon as consumed; leaf nodes
        keep theirs in ``.grad``.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)

        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
                # intermediate gradients are not observable; drop them
                node.grad = None
                node._backward = None
                node._parents = ()

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


class Parameter:
    """Named model weight; frozen parameters receive no optimizer update."""

    __slots__ = ("name", "tensor", "trainable")

    def __init__(self, name: str, data, trainable: bool = True):
        self.name = name
        self.tensor = Tensor(data, requires_grad=trainable)
        self.trainable = bool(trainable)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape}, trainable={self.trainable})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise -------------------------------------------------------


def add(a, b) -> Tensor:
    # python scalars stay scalars so float32 operands are not promoted
    if isinstance(a, (int, float)):
        a, b = b, a
    if isinstance(b, (int, float)):
        a = _as_tensor(a)
        data = a.data + float(b)

        def backward_scalar(g):
            a._accumulate(g)

        return Tensor._result(data, (a,), backward_scalar, "add")

    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor._result(data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return add(a, -float(b))
    if isinstance(a, (int, float)):
        b = _as_tensor(b)
        data = float(a) - b.data

        def backward_scalar(g):
            b._accumulate(-g)

        return Tensor._result(data, (b,), backward_scalar, "sub")

    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return Tensor._result(data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = _as_tensor(a)
        scalar = float(b)
        data = a.data * scalar

        def backward_scalar(g):
            a._accumulate(g * scalar)

        return Tensor._result(data, (a,), backward_scalar, "mul")

    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor._result(data, (a, b), backward, "mul")


# -- linear algebra ----------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with NumPy batch broadcasting; gradients for both sides."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                # collapse batch dims into rows: cheaper than broadcast + reduce
                af = a.data.reshape(-1, a.data.shape[-1])
                gf = g.reshape(-1, g.shape[-1])
                b._accumulate(af.T @ gf)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
                b._accumulate(_unbroadcast(gb, b.data.shape))

    return Tensor._result(data, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight + bias with weight (in, out) and bias (out,)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    data = x.data @ weight.data
    if bias is not None:
        bias = _as_tensor(bias)
        data = data + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data.T)
        if weight.requires_grad:
            xf = x.data.reshape(-1, x.data.shape[-1])
            gf = g.reshape(-1, g.shape[-1])
            weight._accumulate(xf.T @ gf)
        if bias is not None and bias.requires_grad:
            gf = g.reshape(-1, g.shape[-1])
            bias._accumulate(gf.sum(axis=0))

    return Tensor._result(data, parents, backward, "linear")


# -- shape manipulation -------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    original = x.data.shape
    data = x.data.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(original))

    return Tensor._result(data, (x,), backward, "reshape")


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = np.ascontiguousarray(x.data.transpose(axes))

    def backward(g):
        x._accumulate(g.transpose(inverse))

    return Tensor._result(data, (x,), backward, "transpose")


def concat(tensors, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(start, stop)
                t._accumulate(np.ascontiguousarray(g[tuple(index)]))

    return Tensor._result(data, tuple(tensors), backward, "concat")


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    x = _as_tensor(x)
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    data = np.ascontiguousarray(x.data[index])

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        x._accumulate(full)

    return Tensor._result(data, (x,), backward, "narrow")


# -- reductions ----------------------------------------------------------


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.data.shape).copy())
        else:
            expanded = g if keepdims else np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(expanded, x.data.shape).copy())

    return Tensor._result(np.asarray(data), (x,), backward, "sum")


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else x.data.shape[axis]

    def backward(g):
        scaled = g / count
        if axis is None:
            x._accumulate(np.broadcast_to(scaled, x.data.shape).copy())
        else:
            expanded = scaled if keepdims else np.expand_dims(scaled, axis)
            x._accumulate(np.broadcast_to(expanded, x.data.shape).copy())

    return Tensor._result(np.asarray(data), (x,), backward, "mean")


def mse(a, b) -> Tensor:
    """Mean squared error over all elements."""
    diff = sub(a, b)
    return reduce_mean(mul(diff, diff))


# -- nonlinearities -------------------------------------------------------


def softmax_rows(x) -> Tensor:
    """Row-wise softmax over the last axis, stabilized by max subtraction."""
    x = _as_tensor(x)
    if x.data.shape[-1] < 1:
        raise ValueError("softmax_rows needs a non-empty last axis")
    data = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(data, out=data)
    data /= data.sum(axis=-1, keepdims=True)

    def backward(g):
        # d softmax: y * (g - sum(g * y))
        inner = np.einsum("...i,...i->...", g, data)[..., None]
        gx = g - inner
        gx *= data
        x._accumulate(gx)

    return Tensor._result(data, (x,), backward, "softmax_rows")


def layer_norm(x, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    x = _as_tensor(x)
    d = x.data.shape[-1]
    if d < 2:
        raise ValueError(f"layer_norm needs last axis >= 2, got {d}")
    mean = x.data.mean(axis=-1, keepdims=True)
    data = x.data - mean
    var = np.einsum("...i,...i->...", data, data)[..., None] / d
    inv = 1.0 / np.sqrt(var + eps)
    data *= inv

    def backward(g):
        g_mean = g.mean(axis=-1, keepdims=True)
        gy_mean = np.einsum("...i,...i->...", g, data)[..., None] / d
        gx = g - g_mean
        gx -= data * gy_mean
        gx *= inv
        x._accumulate(gx)

    return Tensor._result(data, (x,), backward, "layer_norm")


def gelu(x) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(c (x + a x^3)))."""
    x = _as_tensor(x)
    x2 = x.data * x.data
    t = _GELU_A * x2
    t += 1.0
    t *= x.data
    t *= _GELU_C
    np.tanh(t, out=t)
    data = 1.0 + t
    data *= x.data
    data *= 0.5

    def backward(g):
        du = (3.0 * _GELU_A) * x2
        du += 1.0
        du *= _GELU_C
        local = 1.0 - t * t
        local *= du
        local *= x.data
        local += 1.0 + t
        local *= 0.5
        local *= g
        x._accumulate(local)

    return Tensor._result(data, (x,), backward, "gelu")


def attention_weights(q, k) -> Tensor:
    """softmax(q @ k^T) over keys, fused to avoid a second score-sized buffer.

    q is (..., S_q, d) with any scaling already applied; k is (..., S_k, d).
    Equivalent to softmax_rows(matmul(q, transpose(k))).
    """
    q, k = _as_tensor(q), _as_tensor(k)
    if q.data.shape[-1] != k.data.shape[-1]:
        raise ValueError(f"query/key dims differ: {q.data.shape} vs {k.data.shape}")
    kt = np.swapaxes(k.data, -1, -2)
    data = q.data @ kt
    data -= data.max(axis=-1, keepdims=True)
    np.exp(data, out=data)
    data /= data.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = np.einsum("...i,...i->...", g, data)[..., None]
        gs = g - inner
        gs *= data
        if q.requires_grad:
            q._accumulate(_unbroadcast(gs @ k.data, q.data.shape))
        if k.requires_grad:
            k._accumulate(_unbroadcast(np.swapaxes(gs, -1, -2) @ q.data, k.data.shape))

    return Tensor._result(data, (q, k), backward, "attention_weights")


def gather_rows(table, ids) -> Tensor:
    """Look up rows of a 2-D table by an integer index array."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ValueError("gather_rows needs integer indices")
    data = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table._accumulate(full)

    return Tensor._result(data, (table,), backward, "gather_rows")


def rotate_pairs(x, cos_h, sin_h, cos_w, sin_w) -> Tensor:
    """Rotate the two halves of the last axis by per-position angles.

    The first half of the last axis is rotated pairwise by the height
    angles, the second half by the width angles. cos/sin arrays broadcast
    against x's leading axes and have last extent ``x.shape[-1] // 4``.
    The rotation is orthogonal, so the backward pass is the same rotation
    with negated sines.
    """
    x = _as_tensor(x)
    d = x.data.shape[-1]
    if d % 4 != 0:
        raise ValueError(f"rotation needs last axis divisible by 4, got {d}")

    def rotate(buf, ch, sh, cw, sw):
        out = np.empty_like(buf)
        for half, c, s in ((slice(0, d // 2), ch, sh), (slice(d // 2, d), cw, sw)):
            even = buf[..., half][..., 0::2]
            odd = buf[..., half][..., 1::2]
            out[..., half][..., 0::2] = even * c - odd * s
            out[..., half][..., 1::2] = even * s + odd * c
        return out

    data = rotate(x.data, cos_h, sin_h, cos_w, sin_w)

    def backward(g):
        x._accumulate(rotate(g, cos_h, -sin_h, cos_w, -sin_w))

    return Tensor._result(data, (x,), backward, "rotate_pairs")


# -- gradient verification ------------------------------------------------


def backprop_check(
    f,
    params,
    h: float = 1e-5,
    max_coords: int = 16,
    seed: int = 0,
) -> float:
    """Max relative error of analytic gradients vs central finite differences.

    ``f`` is a zero-argument callable returning a scalar Tensor; ``params``
    are the Parameters (or Tensors) to check. Coordinates are subsampled
    per parameter when larger than ``max_coords``. Runs must use float64
    data for the stated tolerances to be meaningful.
    """
    from .rng import make_rng

    tensors = [p.tensor if isinstance(p, Parameter) else p for p in params]
    for t in tensors:
        t.zero_grad()
    out = f()
    if out.data.size != 1:
        raise ValueError("backprop_check needs a scalar-valued computation")
    out.backward()
    analytic = []
    for t in tensors:
        if t.grad is None:
            analytic.append(np.zeros_like(t.data))
        else:
            g = np.asarray(t.grad)
            if not np.isfinite(g).all():
                raise NonFiniteError("non-finite analytic gradient")
            analytic.append(g.copy())

    rng = make_rng(seed)
    worst = 0.0
    for t, grad in zip(tensors, analytic):
        size = t.data.size
        flat = t.data.reshape(-1)
        if size <= max_coords:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=max_coords, replace=False)
        for c in coords:
            original = flat[c]
            flat[c] = original + h
            plus = f().item()
            flat[c] = original - h
            minus = f().item()
            flat[c] = original
            numeric = (plus - minus) / (2.0 * h)
            a = grad.reshape(-1)[c]
            rel = abs(a - numeric) / (abs(a) + 1e-8)
            if rel > worst:
                worst = rel
    return worst
