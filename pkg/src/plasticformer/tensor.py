"""Dense 2-D tensor engine with reverse-mode automatic differentiation.

Every value is a float64 matrix; vectors are (1, n) rows and scalars are
(1, 1). There is no broadcasting: binary ops require exact shape matches,
and the few row/column expansions that exist are explicit ops with their
own adjoints. Backward functions are themselves written in terms of these
ops, so running a backward pass with recording enabled yields gradients
that are part of the graph - this is what makes differentiating through an
inner gradient step possible.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "NonFiniteError", "GradientError",
    "tensor", "parameter", "zeros",
    "add", "sub", "mul", "div", "neg", "scale", "add_const", "cmul", "smul",
    "gated_update", "matmul", "matmul_nt", "matmul_tn", "transpose",
    "reshape", "concat", "block", "pad_block",
    "sum_all", "sum_rows", "broadcast_full", "broadcast_cols",
    "exp", "log", "powc", "sigmoid", "relu",
    "softmax_rows", "layernorm_rows", "l2norm", "log_softmax_row",
    "no_grad", "recording", "is_recording", "set_checked", "checked_mode",
    "grad", "backward", "grad_of_grad", "gradient_check",
]


class ShapeError(ValueError):
    """Operand shapes do not conform to the op's contract."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf was produced while checked mode is active."""


class GradientError(RuntimeError):
    """Raised for invalid differentiation requests (non-scalar output,
    disconnected/detached inputs)."""


_RECORDING = True
_CHECKED = False


def _tune_allocator() -> None:
    """Raise glibc's mmap threshold so weight-sized temporaries are served
    from the reusable heap instead of being mapped and unmapped on every
    op (episode graphs allocate thousands of them)."""
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 128 * 1024 * 1024)  # M_MMAP_THRESHOLD
    except Exception:
        pass


_tune_allocator()


def is_recording() -> bool:
    return _RECORDING


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _RECORDING
    prev = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = prev


@contextmanager
def recording(flag: bool = True):
    global _RECORDING
    prev = _RECORDING
    _RECORDING = flag
    try:
        yield
    finally:
        _RECORDING = prev


def set_checked(flag: bool) -> None:
    """Toggle NaN/Inf detection on every op output."""
    global _CHECKED
    _CHECKED = flag


@contextmanager
def checked_mode(flag: bool = True):
    global _CHECKED
    prev = _CHECKED
    _CHECKED = flag
    try:
        yield
    finally:
        _CHECKED = prev


def _as_matrix(data) -> np.ndarray:
    a = np.asarray(data, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"tensors are at most rank 2, got shape {a.shape}")
    return a


_SEQ = itertools.count()


class Tensor:
    """A node in the computation graph.

    Leaves have no parents; interior nodes keep a vjp closure mapping the
    output adjoint to per-parent adjoints. `data` is never mutated by ops;
    optimizers update leaf `data` in place between episodes, which is safe
    because graphs are rebuilt per episode. `seq` is a creation counter:
    parents always have a smaller seq than their children, which lets the
    backward pass skip whole subgraphs that predate the requested inputs.
    """

    __slots__ = ("data", "parents", "vjp", "requires_grad", "name", "seq")

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple = (), vjp: Callable | None = None,
                 name: str | None = None):
        self.data = _as_matrix(data)
        self.requires_grad = requires_grad
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.seq = next(_SEQ)

    @classmethod
    def _raw(cls, data: np.ndarray, requires_grad: bool, parents: tuple,
             vjp: Callable | None) -> "Tensor":
        """Internal fast path: `data` must already be a 2-D float64 array."""
        self = cls.__new__(cls)
        self.data = data
        self.requires_grad = requires_grad
        self.parents = parents
        self.vjp = vjp
        self.name = None
        self.seq = next(_SEQ)
        return self

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data[0, 0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def is_leaf(self) -> bool:
        return not self.parents

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, grad={self.requires_grad}{tag})"

    # operator sugar; hadamard for *, matrix product for @
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __truediv__(self, other: "Tensor") -> "Tensor":
        return div(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)


def tensor(data) -> Tensor:
    """Constant (non-differentiable) tensor."""
    return Tensor(data)


def parameter(data, name: str | None = None) -> Tensor:
    """Leaf tensor that participates in differentiation."""
    return Tensor(data, requires_grad=True, name=name)


def zeros(rows: int, cols: int, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros((rows, cols)), requires_grad=requires_grad)


def _make(data: np.ndarray, parents: tuple, vjp: Callable) -> Tensor:
    if _CHECKED and not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value produced by a tensor op")
    if _RECORDING and any(p.requires_grad for p in parents):
        return Tensor._raw(data, True, parents, vjp)
    return Tensor._raw(data, False, (), None)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# primitive ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, neg(g)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard (elementwise) product."""
    _same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (mul(g, b), mul(g, a)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    return _make(a.data / b.data,
                 (a, b),
                 lambda g: (div(g, b), neg(div(mul(g, a), mul(b, b)))))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (neg(g),))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""
    return _make(a.data * c, (a,), lambda g: (scale(g, c),))


def add_const(a: Tensor, c: float) -> Tensor:
    return _make(a.data + c, (a,), lambda g: (g,))


def cmul(a: Tensor, arr: np.ndarray) -> Tensor:
    """Elementwise product with a constant array (dropout masks, relu masks)."""
    if a.data.shape != arr.shape:
        raise ShapeError(f"cmul: shapes {a.shape} and {arr.shape} differ")
    return _make(a.data * arr, (a,), lambda g: (cmul(g, arr),))


def smul(a: Tensor, s: Tensor) -> Tensor:
    """Product of a tensor with a (1, 1) scalar tensor."""
    if s.data.shape != (1, 1):
        raise ShapeError(f"smul: scalar operand has shape {s.shape}")
    return _make(a.data * s.data[0, 0],
                 (a, s),
                 lambda g: (smul(g, s), sum_all(mul(g, a))))


def gated_update(w: Tensor, delta: Tensor, alpha: Tensor,
                 eta: Tensor) -> Tensor:
    """(1 - eta) * w + eta * (alpha o delta) fused into one node; eta is a
    (1, 1) tensor. This is the fast-weight recursion's inner step, fused
    because it touches full weight-sized arrays every token."""
    if w.data.shape != delta.data.shape or w.data.shape != alpha.data.shape:
        raise ShapeError("gated_update: shape mismatch")
    if eta.data.shape != (1, 1):
        raise ShapeError(f"gated_update: eta has shape {eta.shape}")
    e = eta.data[0, 0]

    def vjp(g: Tensor):
        one_minus = add_const(neg(eta), 1.0)
        dw = smul(g, one_minus)
        dd = smul(mul(g, alpha), eta)
        da = smul(mul(g, delta), eta)
        de = sum_all(mul(g, sub(mul(alpha, delta), w)))
        return (dw, dd, da, de)

    return _make((1.0 - e) * w.data + e * (alpha.data * delta.data),
                 (w, delta, alpha, eta), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.shape} x {b.shape} disagree")
    return _make(a.data @ b.data,
                 (a, b),
                 lambda g: (matmul_nt(g, b), matmul_tn(a, g)))


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """a @ b^T without materializing the transpose (BLAS handles strides)."""
    if a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(f"matmul_nt: dims {a.shape} x {b.shape}^T disagree")
    return _make(a.data @ b.data.T,
                 (a, b),
                 lambda g: (matmul(g, b), matmul_tn(g, a)))


def matmul_tn(a: Tensor, b: Tensor) -> Tensor:
    """a^T @ b without materializing the transpose."""
    if a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"matmul_tn: dims {a.shape}^T x {b.shape} disagree")
    return _make(a.data.T @ b.data,
                 (a, b),
                 lambda g: (matmul_nt(b, g), matmul(a, g)))


def transpose(a: Tensor) -> Tensor:
    # the transposed view is never mutated, so no copy is needed
    return _make(a.data.T, (a,), lambda g: (transpose(g),))


def reshape(a: Tensor, rows: int, cols: int) -> Tensor:
    if rows * cols != a.data.size:
        raise ShapeError(f"reshape: {a.shape} -> ({rows}, {cols})")
    old_r, old_c = a.data.shape
    return _make(a.data.reshape(rows, cols), (a,),
                 lambda g: (reshape(g, old_r, old_c),))


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    if axis not in (0, 1):
        raise ShapeError(f"concat axis must be 0 or 1, got {axis}")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g: Tensor):
        out = []
        for i in range(len(sizes)):
            lo, hi = int(offsets[i]), int(offsets[i + 1])
            if axis == 0:
                out.append(block(g, lo, hi, 0, g.data.shape[1]))
            else:
                out.append(block(g, 0, g.data.shape[0], lo, hi))
        return tuple(out)

    return _make(data, tuple(parts), vjp)


def block(a: Tensor, r0: int, r1: int, c0: int, c1: int) -> Tensor:
    """Sub-matrix a[r0:r1, c0:c1] (a view; op outputs are never mutated)."""
    nr, nc = a.data.shape
    if not (0 <= r0 <= r1 <= nr and 0 <= c0 <= c1 <= nc):
        raise ShapeError(f"block [{r0}:{r1}, {c0}:{c1}] out of {a.shape}")
    return _make(a.data[r0:r1, c0:c1], (a,),
                 lambda g: (pad_block(g, nr, nc, r0, c0),))


def pad_block(a: Tensor, rows: int, cols: int, r0: int, c0: int) -> Tensor:
    """Embed `a` into a (rows, cols) zero matrix at offset (r0, c0)."""
    ar, ac = a.data.shape
    if r0 + ar > rows or c0 + ac > cols:
        raise ShapeError("pad_block: block exceeds target")
    out = np.zeros((rows, cols))
    out[r0:r0 + ar, c0:c0 + ac] = a.data
    return _make(out, (a,), lambda g: (block(g, r0, r0 + ar, c0, c0 + ac),))


def sum_all(a: Tensor) -> Tensor:
    r, c = a.data.shape
    return _make(np.array([[a.data.sum()]]), (a,),
                 lambda g: (broadcast_full(g, r, c),))


def broadcast_full(s: Tensor, rows: int, cols: int) -> Tensor:
    if s.data.shape != (1, 1):
        raise ShapeError(f"broadcast_full of non-scalar {s.shape}")
    return _make(np.full((rows, cols), s.data[0, 0]), (s,),
                 lambda g: (sum_all(g),))


def sum_rows(a: Tensor) -> Tensor:
    """Row sums, kept as a column: (n, m) -> (n, 1)."""
    m = a.data.shape[1]
    return _make(a.data.sum(axis=1, keepdims=True), (a,),
                 lambda g: (broadcast_cols(g, m),))


def broadcast_cols(a: Tensor, cols: int) -> Tensor:
    """Tile a column (n, 1) across `cols` columns."""
    if a.data.shape[1] != 1:
        raise ShapeError(f"broadcast_cols of non-column {a.shape}")
    return _make(np.repeat(a.data, cols, axis=1), (a,),
                 lambda g: (sum_rows(g),))


# note: vjp closures must only capture parent tensors, never the op output;
# capturing the output would create a reference cycle (node -> vjp -> node)
# and force cyclic garbage collection over episode-sized graphs. Recomputing
# the forward value from the parent inside the vjp keeps the graph acyclic
# and leaves higher-order derivatives exact.


def exp(a: Tensor) -> Tensor:
    return _make(np.exp(a.data), (a,), lambda g: (mul(g, exp(a)),))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (div(g, a),))


def powc(a: Tensor, p: float) -> Tensor:
    return _make(a.data ** p, (a,),
                 lambda g: (scale(mul(g, powc(a, p - 1.0)), p),))


def _sigmoid_data(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    def vjp(g: Tensor):
        s = sigmoid(a)
        return (mul(g, mul(s, add_const(neg(s), 1.0))),)

    return _make(_sigmoid_data(a.data), (a,), vjp)


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(np.float64)
    return _make(a.data * mask, (a,), lambda g: (cmul(g, mask),))


# ---------------------------------------------------------------------------
# composites (built from primitives, so all derivative orders come for free)


def _softmax_data(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax, fused into one node. The vjp recomputes the
    softmax from the input, so all derivative orders stay exact:
    dx = s o (g - rowsum(g o s))."""
    m = a.data.shape[1]

    def vjp(g: Tensor):
        s = softmax_rows(a)
        gs = mul(g, s)
        return (mul(s, sub(g, broadcast_cols(sum_rows(gs), m))),)

    return _make(_softmax_data(a.data), (a,), vjp)


def log_softmax_row(a: Tensor) -> Tensor:
    """Log-softmax of a single (1, n) row: log_softmax = x - max - lse;
    vjp is g - softmax(x) * rowsum(g)."""
    if a.data.shape[0] != 1:
        raise ShapeError("log_softmax_row expects a single row")
    m = a.data.shape[1]
    shifted = a.data - a.data.max()
    out = shifted - math.log(np.exp(shifted).sum())

    def vjp(g: Tensor):
        s = softmax_rows(a)
        return (sub(g, smul(s, sum_rows(g))),)

    return _make(out, (a,), vjp)


def _normalize_rows(a: Tensor, eps: float) -> Tensor:
    """Row standardization (x - mean) / sqrt(var + eps), fused. The vjp
    recomputes the statistics from the input:
    dx = (g - mean(g) - xhat o mean(g o xhat)) * inv_std."""
    n, m = a.data.shape

    def vjp(g: Tensor):
        mean = scale(sum_rows(a), 1.0 / m)
        centered = sub(a, broadcast_cols(mean, m))
        var = scale(sum_rows(mul(centered, centered)), 1.0 / m)
        inv_std = powc(add_const(var, eps), -0.5)
        xhat = mul(centered, broadcast_cols(inv_std, m))
        g_mean = scale(sum_rows(g), 1.0 / m)
        gx_mean = scale(sum_rows(mul(g, xhat)), 1.0 / m)
        inner = sub(sub(g, broadcast_cols(g_mean, m)),
                    mul(xhat, broadcast_cols(gx_mean, m)))
        return (mul(inner, broadcast_cols(inv_std, m)),)

    mean = a.data.mean(axis=1, keepdims=True)
    centered = a.data - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    out = centered / np.sqrt(var + eps)
    return _make(out, (a,), vjp)


def layernorm_rows(a: Tensor, gain: Tensor, offset: Tensor,
                   eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization with affine parameters.

    gain/offset are (1, m) rows applied to every row; epsilon sits inside
    the square root to keep zero-variance rows finite.
    """
    n, m = a.data.shape
    if gain.data.shape != (1, m) or offset.data.shape != (1, m):
        raise ShapeError("layernorm_rows: gain/offset must be (1, m) rows")
    normed = _normalize_rows(a, eps)
    if n == 1:
        return add(mul(normed, gain), offset)
    return add(mul(normed, _tile_row(gain, n)), _tile_row(offset, n))


def _tile_row(row: Tensor, n: int) -> Tensor:
    """Tile a (1, m) row into n rows."""
    if row.data.shape[0] != 1:
        raise ShapeError(f"_tile_row of non-row {row.shape}")
    return transpose(broadcast_cols(transpose(row), n))


def l2norm(a: Tensor) -> Tensor:
    """Euclidean norm of all entries, as a (1, 1) tensor."""
    return powc(sum_all(mul(a, a)), 0.5)


# ---------------------------------------------------------------------------
# differentiation


def _toposort(root: Tensor, min_seq: int = 0) -> list[Tensor]:
    """Iterative post-order over parents; parents precede children.

    Nodes created before `min_seq` cannot depend on any tensor created at
    or after it, so their ancestry is not expanded.
    """
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
        if node.seq >= min_seq:
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
    return order


def grad(output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False,
         allow_unused: bool = False) -> list[Tensor]:
    """Gradients of a scalar output w.r.t. each input tensor.

    Only the subgraph lying between the inputs and the output is visited,
    so per-step inner gradients stay O(step) even when the output's full
    ancestry spans the whole episode. With create_graph the returned
    gradients are themselves graph nodes.
    """
    if output.data.shape != (1, 1):
        raise GradientError(
            f"grad of non-scalar output of shape {output.shape}")
    inputs = list(inputs)
    input_ids = {id(t) for t in inputs}
    min_seq = min((t.seq for t in inputs), default=0)
    order = _toposort(output, min_seq)

    needed: dict[int, bool] = {}
    for node in order:  # parents precede children in `order`
        nid = id(node)
        needed[nid] = nid in input_ids or any(
            needed.get(id(p), False) for p in node.parents)

    if not needed.get(id(output), False):
        if allow_unused:
            return [zeros(*t.data.shape) for t in inputs]
        raise GradientError(
            "output is not connected to any requested input "
            "(inner gradient detached?)")

    adjoints: dict[int, Tensor] = {id(output): tensor(np.ones((1, 1)))}
    with recording(create_graph):
        for node in reversed(order):
            nid = id(node)
            if nid not in adjoints or not needed[nid]:
                continue
            if node.vjp is None:
                continue
            gs = node.vjp(adjoints[nid])
            for p, g in zip(node.parents, gs):
                if g is None or not needed.get(id(p), False):
                    continue
                pid = id(p)
                if pid in adjoints:
                    adjoints[pid] = add(adjoints[pid], g)
                else:
                    adjoints[pid] = g

    out: list[Tensor] = []
    for t in inputs:
        g = adjoints.get(id(t))
        if g is None:
            if not allow_unused:
                raise GradientError("an input is unused by the output")
            g = zeros(*t.data.shape)
        out.append(g)
    return out


def backward(loss: Tensor) -> dict[Tensor, Tensor]:
    """Gradients of a scalar loss w.r.t. every reachable grad-enabled leaf.

    Returns a mapping leaf -> gradient tensor. Deterministic: identical
    tapes produce bitwise-identical gradients.
    """
    if loss.data.shape != (1, 1):
        raise GradientError(f"backward of non-scalar {loss.shape}")
    order = _toposort(loss)
    leaves = [n for n in order if n.is_leaf() and n.requires_grad]
    if not leaves:
        return {}
    grads = grad(loss, leaves, allow_unused=True)
    return dict(zip(leaves, grads))


def grad_of_grad(inner_loss: Tensor, inner_leaves: Sequence[Tensor],
                 outer_fn: Callable[[list[Tensor]], Tensor],
                 wrt: Sequence[Tensor],
                 inner_grad_mode: str = "second_order") -> list[Tensor]:
    """Differentiate an outer scalar built on top of inner gradients.

    outer_fn receives the inner gradients (taped) and must return a scalar;
    the result is d(outer)/d(wrt) including second-order terms. Requesting
    this in first_order mode is an explicit error rather than silent zeros.
    """
    if inner_grad_mode == "first_order":
        raise GradientError(
            "inner gradient detached: second-order terms unavailable in "
            "first_order mode")
    inner_grads = grad(inner_loss, inner_leaves, create_graph=True)
    outer_loss = outer_fn(inner_grads)
    return grad(outer_loss, wrt, allow_unused=True)


def gradient_check(f: Callable[[np.ndarray], float], p0: np.ndarray,
                   analytic: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between `analytic` and central differences of f.

    f maps a flat parameter vector to a scalar; p0 and analytic are flat.
    """
    p0 = np.asarray(p0, dtype=np.float64).ravel()
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if p0.shape != analytic.shape:
        raise ShapeError("gradient_check: analytic shape mismatch")
    worst = 0.0
    for i in range(p0.size):
        bumped = p0.copy()
        bumped[i] += eps
        f_hi = f(bumped)
        bumped[i] -= 2 * eps
        f_lo = f(bumped)
        if not (math.isfinite(f_hi) and math.isfinite(f_lo)):
            raise GradientError(f"non-finite f during gradient check at {i}")
        cd = (f_hi - f_lo) / (2 * eps)
        err = abs(analytic[i] - cd) / (abs(analytic[i]) + abs(cd) + 1e-12)
        worst = max(worst, err)
    return worst
