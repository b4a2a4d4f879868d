"""Dense 2-D tensors with reverse-mode differentiation over a fixed op set.

The graph is a tape of closures: every operation returns a new Tensor holding
the forward value and, when gradients are enabled, a backward closure that
scatters the output gradient into its parents. ``backward()`` runs the
closures in reverse topological order, so fan-out accumulates correctly and
the reduction order is deterministic (construction order).

Everything is float64. Tensors are treated as immutable after a forward pass
except their ``grad`` buffers; parameters are mutated only between passes.
"""
import contextlib
import math

import numpy as np

from . import kernels
from .errors import ContractError, NumericError, ParameterError, ShapeError

PROB_FLOOR = 1e-12  # below this, p*log(p) is treated as exactly 0

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure forward evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A rows x cols float64 array plus a same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad=False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad = np.zeros_like(arr)
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bwd = None

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self):
        self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return detach(self)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # light operator sugar; module functions carry the real contracts
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data, parents) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
    return out


def _toposort(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(out: Tensor):
    """Accumulate d(out)/d(leaf) into every reachable grad buffer.

    `out` must be a 1x1 scalar. Frozen leaves (requires_grad=False) and
    anything upstream of a detach() boundary receive no gradient.
    """
    if out.data.shape != (1, 1):
        raise ContractError(f"backward() needs a scalar loss, got shape {out.shape}")
    order = _toposort(out)
    out.grad += 1.0
    for node in reversed(order):
        if node._bwd is not None:
            node._bwd()


def detach(x: Tensor) -> Tensor:
    """Stop-gradient: same values, no parents, no gradient flow."""
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    out = _result(a.data @ b.data, (a, b))
    if out.requires_grad:
        def bwd():
            g = out.grad
            if a.requires_grad:
                a.grad += g @ b.data.T
            if b.requires_grad:
                b.grad += a.data.T @ g
        out._bwd = bwd
    return out


def transpose(a: Tensor) -> Tensor:
    out = _result(a.data.T, (a,))
    if out.requires_grad:
        def bwd():
            a.grad += out.grad.T
        out._bwd = bwd
    return out


def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if b.shape == (1, 1):
        return "scalar_b"
    if a.shape == (1, 1):
        return "scalar_a"
    if b.shape == (1, a.cols):
        return "row_b"
    raise ShapeError(f"operands do not broadcast: {a.shape} vs {b.shape}")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    if shape == (1, 1):
        return g.sum().reshape(1, 1)
    return g.sum(axis=0, keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_kind(a, b)
    out = _result(a.data + b.data, (a, b))
    if out.requires_grad:
        def bwd():
            g = out.grad
            if a.requires_grad:
                a.grad += _reduce_to(g, a.shape)
            if b.requires_grad:
                b.grad += _reduce_to(g, b.shape)
        out._bwd = bwd
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_kind(a, b)
    out = _result(a.data - b.data, (a, b))
    if out.requires_grad:
        def bwd():
            g = out.grad
            if a.requires_grad:
                a.grad += _reduce_to(g, a.shape)
            if b.requires_grad:
                b.grad -= _reduce_to(g, b.shape)
        out._bwd = bwd
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b)
    if kind == "row_b":
        raise ShapeError(f"mul: row broadcast not supported, {a.shape} vs {b.shape}")
    out = _result(a.data * b.data, (a, b))
    if out.requires_grad:
        def bwd():
            g = out.grad
            if a.requires_grad:
                a.grad += _reduce_to(g * b.data, a.shape)
            if b.requires_grad:
                b.grad += _reduce_to(g * a.data, b.shape)
        out._bwd = bwd
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b)
    if kind == "row_b":
        raise ShapeError(f"div: row broadcast not supported, {a.shape} vs {b.shape}")
    if np.any(b.data == 0.0):
        raise NumericError("div: zero denominator")
    out = _result(a.data / b.data, (a, b))
    if out.requires_grad:
        def bwd():
            g = out.grad
            if a.requires_grad:
                a.grad += _reduce_to(g / b.data, a.shape)
            if b.requires_grad:
                b.grad += _reduce_to(-g * a.data / (b.data ** 2), b.shape)
        out._bwd = bwd
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = _result(a.data * c, (a,))
    if out.requires_grad:
        def bwd():
            a.grad += out.grad * c
        out._bwd = bwd
    return out


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = _result(a.data + float(c), (a,))
    if out.requires_grad:
        def bwd():
            a.grad += out.grad
        out._bwd = bwd
    return out


def mul_const(a: Tensor, c) -> Tensor:
    """Elementwise product with a constant array (no gradient into c)."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != a.shape:
        raise ShapeError(f"mul_const: shape {c.shape} vs tensor {a.shape}")
    out = _result(a.data * c, (a,))
    if out.requires_grad:
        def bwd():
            a.grad += out.grad * c
        out._bwd = bwd
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0) or not np.all(np.isfinite(a.data)):
        raise NumericError("log: inputs must be finite and positive")
    out = _result(np.log(a.data), (a,))
    if out.requires_grad:
        def bwd():
            a.grad += out.grad / a.data
        out._bwd = bwd
    return out


def plogp(a: Tensor) -> Tensor:
    """x*log(x) elementwise, defined as exactly 0 where x < PROB_FLOOR."""
    live = a.data >= PROB_FLOOR
    safe = np.where(live, a.data, 1.0)
    out = _result(np.where(live, a.data * np.log(safe), 0.0), (a,))
    if out.requires_grad:
        dterm = np.where(live, np.log(safe) + 1.0, 0.0)
        def bwd():
            a.grad += out.grad * dterm
        out._bwd = bwd
    return out


def clamp_min(a: Tensor, floor: float) -> Tensor:
    floor = float(floor)
    out = _result(np.maximum(a.data, floor), (a,))
    if out.requires_grad:
        mask = (a.data >= floor).astype(np.float64)
        def bwd():
            a.grad += out.grad * mask
        out._bwd = bwd
    return out


def row_softmax(x: Tensor, scale_: float) -> Tensor:
    """Row-wise softmax of x / scale_, computed with max subtraction."""
    if not (scale_ > 0.0) or not math.isfinite(scale_):
        raise ParameterError(f"row_softmax: scale must be positive, got {scale_}")
    inv = 1.0 / float(scale_)
    y = kernels.softmax_rows(x.data, inv)
    out = _result(y, (x,))
    if out.requires_grad:
        def bwd():
            x.grad += kernels.softmax_rows_bwd(y, out.grad, inv)
        out._bwd = bwd
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization followed by the affine map gamma*xhat + beta."""
    if eps <= 0.0:
        raise ParameterError(f"layer_norm: eps must be positive, got {eps}")
    if gamma.shape != (1, x.cols) or beta.shape != (1, x.cols):
        raise ShapeError(
            f"layer_norm: gamma/beta must be 1x{x.cols}, got {gamma.shape}, {beta.shape}"
        )
    y, xhat, inv_std = kernels.layer_norm_fwd(x.data, gamma.data, beta.data, float(eps))
    out = _result(y, (x, gamma, beta))
    if out.requires_grad:
        def bwd():
            gx, ggamma, gbeta = kernels.layer_norm_bwd(out.grad, xhat, inv_std, gamma.data)
            if x.requires_grad:
                x.grad += gx
            if gamma.requires_grad:
                gamma.grad += ggamma
            if beta.requires_grad:
                beta.grad += gbeta
        out._bwd = bwd
    return out


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    out = _result(kernels.gelu_fwd(x.data), (x,))
    if out.requires_grad:
        def bwd():
            x.grad += kernels.gelu_bwd(x.data, out.grad)
        out._bwd = bwd
    return out


def mean_rows(x: Tensor) -> Tensor:
    """Column means: collapses rows to a single 1 x cols row."""
    out = _result(x.data.mean(axis=0, keepdims=True), (x,))
    if out.requires_grad:
        inv = 1.0 / x.rows
        def bwd():
            x.grad += out.grad * inv
        out._bwd = bwd
    return out


def sum_all(x: Tensor) -> Tensor:
    out = _result(x.data.sum().reshape(1, 1), (x,))
    if out.requires_grad:
        def bwd():
            x.grad += out.grad[0, 0]
        out._bwd = bwd
    return out


def _check_block(x, r0, r1, c0, c1):
    if not (0 <= r0 < r1 <= x.rows and 0 <= c0 < c1 <= x.cols):
        raise ShapeError(
            f"block [{r0}:{r1}, {c0}:{c1}] out of range for shape {x.shape}"
        )


def block_mean(x: Tensor, r0: int, r1: int, c0: int, c1: int) -> Tensor:
    """Mean over all entries of the sub-block, as a 1x1 tensor."""
    _check_block(x, r0, r1, c0, c1)
    blk = x.data[r0:r1, c0:c1]
    out = _result(np.array([[blk.mean()]]), (x,))
    if out.requires_grad:
        inv = 1.0 / blk.size
        def bwd():
            x.grad[r0:r1, c0:c1] += out.grad[0, 0] * inv
        out._bwd = bwd
    return out


def block_var(x: Tensor, r0: int, r1: int, c0: int, c1: int) -> Tensor:
    """Population variance over all entries of the sub-block, as 1x1."""
    _check_block(x, r0, r1, c0, c1)
    blk = x.data[r0:r1, c0:c1]
    m = blk.mean()
    out = _result(np.array([[((blk - m) ** 2).mean()]]), (x,))
    if out.requires_grad:
        coeff = 2.0 / blk.size
        def bwd():
            x.grad[r0:r1, c0:c1] += out.grad[0, 0] * coeff * (blk - m)
        out._bwd = bwd
    return out


def pick(x: Tensor, i: int, j: int) -> Tensor:
    """Single entry x[i, j] as a 1x1 tensor."""
    if not (0 <= i < x.rows and 0 <= j < x.cols):
        raise ShapeError(f"pick: index ({i}, {j}) out of range for {x.shape}")
    out = _result(np.array([[x.data[i, j]]]), (x,))
    if out.requires_grad:
        def bwd():
            x.grad[i, j] += out.grad[0, 0]
        out._bwd = bwd
    return out
