"""Dense float64 tensors with reverse-mode automatic differentiation.

Every quantity in the pipeline (parameters, activations, losses) lives in a
``Tensor``.  Tensors that participate in training carry ``requires_grad=True``
and accumulate gradients in ``.grad`` after ``backward()``; everything else
(teacher parameters, input images, teacher distributions) is a plain constant
and never receives a gradient.

Design notes:
  - storage is always float64, row-major.  Gradient checking against central
    finite differences is meaningless at lower precision.
  - elementwise ops require exactly matching shapes; the only implicit
    broadcasts are scalar-with-tensor (``add``/``mul``) and the explicit
    ``bias_add`` (last-axis vector).  Silent broadcasting hides shape bugs.
  - softmax / log-softmax subtract the running max before exponentiation so
    that sharpening temperatures (logits/tau reaching +-25 and beyond) cannot
    overflow.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "ShapeError", "ParameterError", "NonFiniteError",
    "add", "sub", "mul", "scale", "matmul", "bmm", "transpose", "reshape",
    "concat", "take_rows", "scatter_rows", "repeat_rows", "bias_add",
    "tsum", "tmean", "tlog", "texp", "gelu", "layer_norm",
    "softmax_t", "log_softmax_t", "l2_normalize", "kl_to_uniform",
    "finite_difference_gradient", "gradient_check", "zero_grads",
    "set_checked", "set_gradient_fault",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ParameterError(ValueError):
    """A numeric parameter (temperature, epsilon, ...) is out of range."""


class NonFiniteError(FloatingPointError):
    """A tensor was constructed with NaN or Inf while checked mode is on."""


_CHECK_FINITE = True
_GRAD_FAULT: str | None = None


def set_checked(enabled: bool) -> None:
    """Toggle NaN/Inf validation at tensor construction (default: on)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def set_gradient_fault(op_name: str | None) -> None:
    """Testing hook: corrupt the backward pass of the named op.

    Used by the gradient-check command to prove the harness detects and names
    a broken analytic gradient.  ``None`` disables the fault.
    """
    global _GRAD_FAULT
    _GRAD_FAULT = op_name


class Tensor:
    """A float64 array plus its place in the reverse-mode graph."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_bw")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 _parents: tuple = (), _bw=None):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        if _CHECK_FINITE and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor from op '{op}'")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = _parents
        self._bw = _bw

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
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- graph traversal ---------------------------------------------------

    def backward(self) -> None:
        """Accumulate dSelf/dAncestor into ``.grad`` of every trainable ancestor.

        Only scalar roots are accepted.  Constant (non-trainable) branches are
        never visited: they were recorded without parents, so the walk stops
        at them and their ``.grad`` stays ``None``.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.shape}")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))

        self.grad = _accum(self.grad, np.ones_like(self.data))
        for node in reversed(topo):
            if node._bw is None or node.grad is None:
                continue
            parent_grads = node._bw(node.grad)
            if _GRAD_FAULT is not None and node.op == _GRAD_FAULT:
                parent_grads = tuple(None if g is None else g * (1.0 + 1e-2)
                                     for g in parent_grads)
            for parent, g in zip(node._parents, parent_grads):
                if g is not None and parent.requires_grad:
                    parent.grad = _accum(parent.grad, g)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        raise TypeError("tensor division is only supported by a python scalar")

    def __matmul__(self, other):
        return matmul(self, _coerce(other))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _accum(current: np.ndarray | None, g: np.ndarray) -> np.ndarray:
    return g.copy() if current is None else current + g


def _make(data: np.ndarray, parents: tuple[Tensor, ...], bw, op: str) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    if rg:
        return Tensor(data, requires_grad=True, op=op, _parents=parents, _bw=bw)
    return Tensor(data, op=op)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    # scalar-with-tensor is the one permitted implicit broadcast
    if a.size == 1 or b.size == 1:
        return
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match "
                         "(only scalar-with-tensor broadcast is allowed)")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # collapse a gradient back onto a scalar-shaped operand
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "add")
    out = a.data + b.data

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(out, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(_coerce(b), -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "mul")
    out = a.data * b.data

    def bw(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _make(out, (a, b), bw, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    a = _coerce(a)
    s = float(s)
    out = a.data * s

    def bw(g):
        return (g * s,)

    return _make(out, (a,), bw, "scale")


# ---------------------------------------------------------------------------
# matrix products and layout


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product: (B,m,k) @ (B,k,n) -> (B,m,n)."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm expects (B,m,k) @ (B,k,n), got {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "bmm")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = _coerce(a)
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for ndim {a.ndim}")
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _make(out, (a,), bw, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    a = _coerce(a)
    shape = tuple(int(x) for x in shape)
    if math.prod(shape) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), bw, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(out, tuple(tensors), bw, "concat")


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather along axis 0 by an integer index set."""
    a = _coerce(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("take_rows expects a 1-D index set")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"take_rows index out of range for axis length {a.shape[0]}")
    out = a.data[idx]

    def bw(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _make(out, (a,), bw, "take_rows")


def scatter_rows(a: Tensor, idx, rows: Tensor) -> Tensor:
    """Replace the rows of ``a`` at ``idx`` with ``rows`` (indices must be unique)."""
    a, rows = _coerce(a), _coerce(rows)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("scatter_rows expects a 1-D index set")
    if np.unique(idx).size != idx.size:
        raise ShapeError("scatter_rows indices must be unique")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"scatter_rows index out of range for axis length {a.shape[0]}")
    if rows.shape != (idx.size,) + a.shape[1:]:
        raise ShapeError(f"scatter_rows rows shape {rows.shape} does not match "
                         f"{(idx.size,) + a.shape[1:]}")
    out = a.data.copy()
    out[idx] = rows.data

    def bw(g):
        ga = g.copy()
        ga[idx] = 0.0
        return ga, g[idx]

    return _make(out, (a, rows), bw, "scatter_rows")


def repeat_rows(v: Tensor, n: int) -> Tensor:
    """Tile a vector (d,) into a matrix (n, d)."""
    v = _coerce(v)
    if v.ndim != 1:
        raise ShapeError(f"repeat_rows expects a vector, got shape {v.shape}")
    out = np.tile(v.data, (int(n), 1))

    def bw(g):
        return (g.sum(axis=0),)

    return _make(out, (v,), bw, "repeat_rows")


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector (d,) to the last axis of ``x``; the documented non-scalar broadcast."""
    x, b = _coerce(x), _coerce(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias_add: {b.shape} does not fit last axis of {x.shape}")
    out = x.data + b.data

    def bw(g):
        gb = g.reshape(-1, b.shape[0]).sum(axis=0) if b.requires_grad else None
        return g, gb

    return _make(out, (x, b), bw, "bias_add")


# ---------------------------------------------------------------------------
# reductions and elementwise functions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis=axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    n = a.size if axis is None else a.shape[axis]

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis=axis)
        return (np.broadcast_to(g, a.shape) / n,)

    return _make(out, (a,), bw, "mean")


def tlog(a: Tensor) -> Tensor:
    a = _coerce(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return _make(out, (a,), bw, "log")


def texp(a: Tensor) -> Tensor:
    a = _coerce(a)
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _make(out, (a,), bw, "exp")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    a = _coerce(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = a.data * cdf

    def bw(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        return (g * (cdf + a.data * pdf),)

    return _make(out, (a,), bw, "gelu")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    x, gain, bias = _coerce(x), _coerce(gain), _coerce(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gxhat = g * gain.data
        # standard layer-norm backward over the last axis
        gvar = np.sum(gxhat * xc, axis=-1, keepdims=True) * (-0.5) * inv ** 3
        gmu = -np.sum(gxhat, axis=-1, keepdims=True) * inv \
            + gvar * np.mean(-2.0 * xc, axis=-1, keepdims=True)
        gx = gxhat * inv + gvar * 2.0 * xc / d + gmu / d
        ggain = np.sum(g * xhat, axis=tuple(range(x.ndim - 1))) if gain.requires_grad else None
        gbias = np.sum(g, axis=tuple(range(x.ndim - 1))) if bias.requires_grad else None
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), bw, "layer_norm")


def softmax_t(x: Tensor, tau: float = 1.0) -> Tensor:
    """Temperature softmax over the last axis, max-subtracted for stability."""
    x = _coerce(x)
    tau = float(tau)
    if tau <= 0.0:
        raise ParameterError(f"softmax temperature must be positive, got {tau}")
    z = (x.data - x.data.max(axis=-1, keepdims=True)) / tau
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return ((g - dot) * out / tau,)

    return _make(out, (x,), bw, "softmax")


def log_softmax_t(x: Tensor, tau: float = 1.0) -> Tensor:
    """log(softmax(x/tau)) computed as a shifted log-sum-exp."""
    x = _coerce(x)
    tau = float(tau)
    if tau <= 0.0:
        raise ParameterError(f"softmax temperature must be positive, got {tau}")
    z = (x.data - x.data.max(axis=-1, keepdims=True)) / tau
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return ((g - sm * g.sum(axis=-1, keepdims=True)) / tau,)

    return _make(out, (x,), bw, "log_softmax")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each last-axis slice to unit Euclidean length."""
    x = _coerce(x)
    norm = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    out = x.data / norm

    def bw(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return ((g - out * dot) / norm,)

    return _make(out, (x,), bw, "l2_normalize")


def kl_to_uniform(p: Tensor) -> Tensor:
    """KL(p || U) = sum_k p_k * log(p_k * K) for a probability vector p.

    Entries equal to zero contribute nothing (the x*log(x) -> 0 limit); their
    gradient entry is defined as zero, which is only reachable for exact-zero
    probabilities that a softmax never produces.
    """
    p = _coerce(p)
    if p.ndim != 1:
        raise ShapeError(f"kl_to_uniform expects a vector, got shape {p.shape}")
    if np.any(p.data < 0.0):
        raise ParameterError("kl_to_uniform requires nonnegative entries")
    k = p.shape[0]
    pos = p.data > 0.0
    terms = np.zeros_like(p.data)
    terms[pos] = p.data[pos] * np.log(p.data[pos] * k)
    out = terms.sum()

    def bw(g):
        gp = np.zeros_like(p.data)
        gp[pos] = (np.log(p.data[pos] * k) + 1.0) * np.asarray(g).item()
        return (gp,)

    return _make(out, (p,), bw, "kl_to_uniform")


# ---------------------------------------------------------------------------
# gradient oracle


def finite_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray,
                               eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    This is the oracle every analytic gradient in the package is tested
    against; it deliberately knows nothing about the Tensor graph.
    """
    if eps <= 0.0:
        raise ParameterError(f"finite-difference step must be positive, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xp[idx] += eps
        xm = x.copy()
        xm[idx] -= eps
        grad[idx] = (f(xp) - f(xm)) / (2.0 * eps)
    return grad


def gradient_check(build: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                   eps: float = 1e-5, coords: int | None = None,
                   rng: np.random.Generator | None = None) -> float:
    """Compare reverse-mode gradients of ``build(*tensors)`` against central differences.

    ``build`` must construct a fresh scalar graph from its Tensor arguments on
    every call.  Returns the maximum relative error over all checked
    coordinates, where relative error is |ad - fd| / max(1, |ad|, |fd|).

    ``coords`` limits the check to that many randomly chosen coordinates per
    input (needed to keep whole-network checks tractable); ``None`` checks all.
    """
    base = [np.asarray(x, dtype=np.float64) for x in inputs]
    tensors = [Tensor(x.copy(), requires_grad=True) for x in base]
    out = build(*tensors)
    if out.size != 1:
        raise ShapeError("gradient_check target must be scalar")
    out.backward()

    worst = 0.0
    for i, x in enumerate(base):
        ad = tensors[i].grad
        if ad is None:
            ad = np.zeros_like(x)

        def f(xi: np.ndarray, i=i) -> float:
            args = [Tensor(b.copy()) for b in base]
            args[i] = Tensor(xi)
            return build(*args).item()

        if coords is None or x.size <= coords:
            fd = finite_difference_gradient(f, x, eps=eps)
            picked = list(np.ndindex(x.shape))
        else:
            picker = rng if rng is not None else np.random.default_rng(0)
            flat = picker.choice(x.size, size=coords, replace=False)
            picked = [np.unravel_index(j, x.shape) for j in flat]
            fd = np.zeros_like(x)
            for idx in picked:
                xp = x.copy()
                xp[idx] += eps
                xm = x.copy()
                xm[idx] -= eps
                fd[idx] = (f(xp) - f(xm)) / (2.0 * eps)

        for idx in picked:
            denom = max(1.0, abs(ad[idx]), abs(fd[idx]))
            worst = max(worst, abs(ad[idx] - fd[idx]) / denom)
    return worst
