"""Minimal reverse-mode autodiff engine on top of numpy arrays.

Every mathematical operation the encoders, losses and attribution maps need
is defined here: elementwise arithmetic with broadcasting, matmul, strided
cross-correlation, row-wise log-softmax, numerically stable softplus, and
the derived losses (diagonal cross-entropy, multi-label BCE, cosine
similarity matrices).

Design points:

- A :class:`Tensor` wraps one ``numpy`` array plus an optional gradient of
  the same shape.  Graphs are built eagerly; each op records its parents and
  a backward closure.
- Accumulation order is fixed (row-major, ascending index) so repeated runs
  on one platform produce bit-identical values and gradients.
- Non-finite values are an error surface, never a silent state: every op
  checks its forward output, and the backward pass checks every gradient it
  produces, raising :class:`NumericFailure` naming the offending op.
- Default precision is float32; tests that compare against finite
  differences build their tensors with ``dtype=np.float64``.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractViolation, DegenerateEmbeddingError, NumericFailure

DEFAULT_DTYPE = np.float32

_uid = itertools.count()


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericFailure(f"non-finite value produced by op '{op}'")


def _as_array(value, dtype) -> np.ndarray:
    arr = np.asarray(value)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(dtype if dtype is not None else DEFAULT_DTYPE)
    elif dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A shaped array with optional gradient and graph linkage.

    Tensors are immutable once created; the optimizer's explicit update step
    is the single sanctioned exception (it rebinds ``data`` in place on
    parameter leaves between graph constructions).
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward_fn", "_uid")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        dtype=None,
        _op: str = "leaf",
        _parents: tuple = (),
        _backward_fn: Optional[Callable] = None,
    ):
        self.data = _as_array(data, dtype)
        _check_finite(self.data, _op)
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in _parents
        )
        self.grad: Optional[np.ndarray] = None
        self.op = _op
        self._parents = _parents
        self._backward_fn = _backward_fn
        self._uid = next(_uid)

    # ------------------------------------------------------------------
    # basic introspection
    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # graph construction helpers
    # ------------------------------------------------------------------
    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.dtype != self.dtype:
                raise ContractViolation(
                    f"dtype mismatch: {self.dtype} vs {other.dtype}"
                )
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    # elementwise arithmetic, numpy broadcasting rules ------------------
    def __add__(self, other) -> "Tensor":
        other = self._coerce(other)
        out_data = self.data + other.data

        def backward(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape))

        return Tensor(out_data, _op="add", _parents=(self, other), _backward_fn=backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        def backward(g):
            return (-g,)

        return Tensor(-self.data, _op="neg", _parents=(self,), _backward_fn=backward)

    def __sub__(self, other) -> "Tensor":
        other = self._coerce(other)
        out_data = self.data - other.data

        def backward(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape))

        return Tensor(out_data, _op="sub", _parents=(self, other), _backward_fn=backward)

    def __rsub__(self, other) -> "Tensor":
        return self._coerce(other).__sub__(self)

    def __mul__(self, other) -> "Tensor":
        other = self._coerce(other)
        out_data = self.data * other.data
        a, b = self.data, other.data

        def backward(g):
            return (_unbroadcast(g * b, self.shape), _unbroadcast(g * a, other.shape))

        return Tensor(out_data, _op="mul", _parents=(self, other), _backward_fn=backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = self._coerce(other)
        with np.errstate(divide="ignore", invalid="ignore"):
            out_data = self.data / other.data
        a, b = self.data, other.data

        def backward(g):
            return (
                _unbroadcast(g / b, self.shape),
                _unbroadcast(-g * a / (b * b), other.shape),
            )

        return Tensor(out_data, _op="div", _parents=(self, other), _backward_fn=backward)

    def __matmul__(self, other) -> "Tensor":
        other = self._coerce(other)
        if self.ndim != 2 or other.ndim != 2:
            raise ContractViolation("matmul requires 2-D operands")
        out_data = self.data @ other.data
        a, b = self.data, other.data

        def backward(g):
            return (g @ b.T, a.T @ g)

        return Tensor(out_data, _op="matmul", _parents=(self, other), _backward_fn=backward)

    # shape ops ---------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        in_shape = self.shape

        def backward(g):
            return (g.reshape(in_shape),)

        return Tensor(
            self.data.reshape(shape), _op="reshape", _parents=(self,), _backward_fn=backward
        )

    def transpose2d(self) -> "Tensor":
        if self.ndim != 2:
            raise ContractViolation("transpose2d requires a 2-D tensor")

        def backward(g):
            return (g.T,)

        return Tensor(self.data.T.copy(), _op="transpose", _parents=(self,), _backward_fn=backward)

    # reductions --------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        in_shape = self.shape

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, in_shape).astype(g.dtype, copy=True),)
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axis)
            return (np.broadcast_to(gg, in_shape).astype(g.dtype, copy=True),)

        return Tensor(out_data, _op="sum", _parents=(self,), _backward_fn=backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / np.array(count, dtype=self.dtype)

    # elementwise nonlinearities -----------------------------------------
    def relu(self) -> "Tensor":
        mask = self.data > 0

        def backward(g):
            return (g * mask,)

        return Tensor(
            np.where(mask, self.data, 0), _op="relu", _parents=(self,), _backward_fn=backward
        )

    def exp(self) -> "Tensor":
        with np.errstate(over="ignore"):
            out_data = np.exp(self.data)

        def backward(g):
            return (g * out_data,)

        return Tensor(out_data, _op="exp", _parents=(self,), _backward_fn=backward)

    def log(self) -> "Tensor":
        x = self.data
        with np.errstate(divide="ignore", invalid="ignore"):
            out_data = np.log(x)

        def backward(g):
            return (g / x,)

        return Tensor(out_data, _op="log", _parents=(self,), _backward_fn=backward)

    def sqrt(self) -> "Tensor":
        with np.errstate(invalid="ignore"):
            out_data = np.sqrt(self.data)

        def backward(g):
            return (g * 0.5 / out_data,)

        return Tensor(out_data, _op="sqrt", _parents=(self,), _backward_fn=backward)

    def softplus(self) -> "Tensor":
        """log(1 + exp(x)) computed without overflow for |x| up to ~1e3."""
        x = self.data
        out_data = np.where(x > 0, x, 0) + np.log1p(np.exp(-np.abs(x)))
        sig = _sigmoid_stable(x)

        def backward(g):
            return (g * sig,)

        return Tensor(out_data, _op="softplus", _parents=(self,), _backward_fn=backward)

    # ------------------------------------------------------------------
    # backward driver
    # ------------------------------------------------------------------
    def backward(self) -> None:
        """Reverse-mode sweep; seeds d(self)/d(self)=1, fills `.grad` fields."""
        if self.data.size != 1:
            raise ContractViolation("backward() requires a scalar root")
        graph = ComputeGraph(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(graph.nodes):
            if node._backward_fn is None or node.grad is None:
                continue
            parent_grads = node._backward_fn(node.grad)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                _check_finite(pg, f"backward of '{node.op}'")
                if parent.grad is None:
                    parent.grad = pg.astype(parent.dtype, copy=True)
                else:
                    parent.grad = parent.grad + pg.astype(parent.dtype, copy=False)


class ComputeGraph:
    """Topologically ordered view of the graph reachable from one root.

    ``nodes`` lists every tensor that requires grad, parents strictly before
    consumers; the backward sweep walks it in reverse exactly once per node.
    """

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node._uid in seen or not node.requires_grad:
                continue
            seen.add(node._uid)
            stack.append((node, True))
            for parent in reversed(node._parents):
                stack.append((parent, False))
        self.nodes = order
        self.index = {node._uid: i for i, node in enumerate(order)}


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    """Create a leaf tensor, casting to float32 unless `dtype` says otherwise."""
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


# ----------------------------------------------------------------------
# embedding lookup
# ----------------------------------------------------------------------
def take_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Gather `table[indices]`; backward scatter-adds into the table."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ContractViolation("take_rows expects a 1-D index array")
    if idx.min(initial=0) < 0 or (idx.size and idx.max() >= table.shape[0]):
        raise ContractViolation("take_rows index out of range")
    out_data = table.data[idx]
    table_shape = table.shape

    def backward(g):
        gt = np.zeros(table_shape, dtype=g.dtype)
        np.add.at(gt, idx, g)
        return (gt,)

    return Tensor(out_data, _op="take_rows", _parents=(table,), _backward_fn=backward)


# ----------------------------------------------------------------------
# strided cross-correlation
# ----------------------------------------------------------------------
def conv2d(x: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation with square kernels and a positive stride.

    `x` is either one image ``(C_in, H, W)`` or a batch ``(N, C_in, H, W)``;
    kernels are ``(C_out, C_in, k, k)``.  Output spatial size is
    ``floor((H - k) / stride) + 1`` per side.
    """
    if stride < 1:
        raise ContractViolation(f"stride must be positive, got {stride}")
    single = x.ndim == 3
    xv = x.reshape((1,) + x.shape) if single else x
    if xv.ndim != 4 or kernels.ndim != 4:
        raise ContractViolation(
            f"conv2d shapes: input {x.shape}, kernels {kernels.shape}"
        )
    n, c_in, h, w = xv.shape
    c_out, kc_in, kh, kw = kernels.shape
    if xv.dtype != kernels.dtype:
        raise ContractViolation(f"dtype mismatch: {xv.dtype} vs {kernels.dtype}")
    if kc_in != c_in or kh != kw:
        raise ContractViolation(
            f"kernel {kernels.shape} incompatible with input channels {c_in}"
        )
    k = kh
    if k > h or k > w:
        raise ContractViolation(f"kernel size {k} exceeds input {h}x{w}")
    h_out = (h - k) // stride + 1
    w_out = (w - k) // stride + 1

    xd, kd = xv.data, kernels.data
    # im2col: windows is (n, c_in, h_out, w_out, k, k); cols is (n, c_in*k*k, hw)
    windows = np.lib.stride_tricks.sliding_window_view(xd, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(windows.transpose(0, 1, 4, 5, 2, 3)).reshape(
        n, c_in * k * k, h_out * w_out
    )
    kmat = kd.reshape(c_out, c_in * k * k)
    out_data = (kmat @ cols).reshape(n, c_out, h_out, w_out)

    def backward(g):
        gflat = np.ascontiguousarray(g).reshape(n, c_out, h_out * w_out)
        gk = np.tensordot(gflat, cols, axes=([0, 2], [0, 2])).reshape(kd.shape)
        gcols = (kmat.T @ gflat).reshape(n, c_in, k, k, h_out, w_out)
        gx = np.zeros_like(xd)
        for di in range(k):
            for dj in range(k):
                gx[:, :, di : di + stride * h_out : stride, dj : dj + stride * w_out : stride] += (
                    gcols[:, :, di, dj]
                )
        return (gx, gk)

    out = Tensor(out_data, _op="conv2d", _parents=(xv, kernels), _backward_fn=backward)
    if single:
        out = out.reshape(out.shape[1:])
    return out


# ----------------------------------------------------------------------
# row-wise log-softmax and the losses built on it
# ----------------------------------------------------------------------
def log_softmax_rows(x: Tensor) -> Tensor:
    """Numerically stable log-softmax along axis 1 of a 2-D tensor."""
    if x.ndim != 2:
        raise ContractViolation("log_softmax_rows requires a 2-D tensor")
    xd = x.data
    shifted = xd - xd.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out_data = shifted - lse
    softmax = np.exp(out_data)

    def backward(g):
        return (g - softmax * g.sum(axis=1, keepdims=True),)

    return Tensor(out_data, _op="log_softmax", _parents=(x,), _backward_fn=backward)


def cross_entropy_rows(logits: Tensor) -> Tensor:
    """Mean over rows of -log softmax(row)[i] against the identity matching."""
    if logits.ndim != 2 or logits.shape[0] != logits.shape[1]:
        raise ContractViolation(
            f"cross_entropy_rows requires a square matrix, got {logits.shape}"
        )
    n = logits.shape[0]
    eye = Tensor(np.eye(n, dtype=logits.dtype))
    picked = (log_softmax_rows(logits) * eye).sum()
    return -picked / np.array(n, dtype=logits.dtype)


def binary_cross_entropy_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Sum over label columns of mean-over-batch BCE, stable for |logit|<=100.

    Uses softplus(x) - x*y, which equals -y*log(sigmoid(x)) -
    (1-y)*log(1-sigmoid(x)) without ever exponentiating a large argument.
    """
    y = np.asarray(labels)
    if not np.isin(y, (0, 1)).all():
        raise ContractViolation("labels must be binary (0/1)")
    if logits.ndim != 2 or y.shape != logits.shape:
        raise ContractViolation(
            f"logits {logits.shape} and labels {y.shape} must agree and be 2-D"
        )
    n = logits.shape[0]
    y = Tensor(y.astype(logits.dtype))
    per_elem = logits.softplus() - logits * y
    return per_elem.sum() / np.array(n, dtype=logits.dtype)


# ----------------------------------------------------------------------
# cosine similarity
# ----------------------------------------------------------------------
def l2_normalize_rows(x: Tensor, min_norm: float = 1e-12) -> Tensor:
    """Scale each row to unit L2 norm; degenerate rows raise, never clamp."""
    if x.ndim != 2:
        raise ContractViolation("l2_normalize_rows requires a 2-D tensor")
    norms = np.sqrt((x.data * x.data).sum(axis=1))
    bad = np.flatnonzero(norms < min_norm)
    if bad.size:
        raise DegenerateEmbeddingError(
            f"zero-norm embedding row(s) {bad.tolist()} (norm < {min_norm})"
        )
    return x / (x * x).sum(axis=1, keepdims=True).sqrt()


def cosine_similarity_matrix(a: Tensor, b: Tensor, min_norm: float = 1e-12) -> Tensor:
    """Entry (i, j) is the cosine of a's row i with b's row j."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ContractViolation(
            f"cosine_similarity_matrix shapes {a.shape} vs {b.shape}"
        )
    return l2_normalize_rows(a, min_norm) @ l2_normalize_rows(b, min_norm).transpose2d()


# ----------------------------------------------------------------------
# functional gradient entry point
# ----------------------------------------------------------------------
def grad(loss_fn: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor]) -> list[Tensor]:
    """Evaluate a scalar loss of `params` and return dLoss/dParam for each.

    Repeated calls with identical inputs return identical gradients: the
    graph is rebuilt from scratch and parameter grads are zeroed first.
    """
    params = list(params)
    for i, p in enumerate(params):
        if not isinstance(p, Tensor) or not p.requires_grad:
            raise ContractViolation(f"param {i} must be a Tensor with requires_grad")
        p.zero_grad()
    loss = loss_fn(params)
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractViolation("loss_fn must return a scalar Tensor")
    _check_finite(loss.data, "loss")
    loss.backward()
    out = []
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        out.append(Tensor(g.copy()))
    return out
