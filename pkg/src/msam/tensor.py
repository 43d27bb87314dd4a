"""Dense tensors with tape-based reverse-mode differentiation.

Design notes:

* ``Tensor`` is an immutable value: a C-contiguous float32 or float64
  numpy array flagged read-only. Every operation returns a new tensor;
  identical inputs give bit-identical outputs.
* Operations are eager. When an operand is bound to a ``Tape`` (leaves
  enter via ``Tape.param``), the operation also records a node holding
  the saved values and per-parent gradient closures needed to run the
  chain rule later. ``backward`` walks the node list once in reverse
  and returns one gradient per registered parameter.
* Mixing operands of two different tapes, or of float32 with float64,
  is an error rather than a silent promotion.
* Numerics route through ``msam.kernels``, which picks the compiled
  core or the numpy fallback at import time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, ShapeError, ValidationError

_FLOATS = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """Immutable dense array of float32 or float64 values."""

    __slots__ = ("data", "_tape", "_node")

    def __init__(self, data, dtype=None, validate: bool = True):
        arr = np.array(data, dtype=dtype, order="C", copy=True)
        if arr.dtype not in _FLOATS:
            arr = arr.astype(np.float64)
        if validate and not np.all(np.isfinite(arr)):
            raise ValidationError("tensor contains non-finite values")
        arr.setflags(write=False)
        self.data = arr
        self._tape = None
        self._node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt an op result without copying or validating."""
        t = object.__new__(cls)
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        t.data = arr
        t._tape = None
        t._node = None
        return t

    # -- views on the payload -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def astype(self, dtype) -> "Tensor":
        """Precision change; drops any tape binding."""
        return Tensor._wrap(self.data.astype(dtype))

    def detach(self) -> "Tensor":
        """Same values, no tape binding (a stop-gradient)."""
        return Tensor._wrap(self.data)

    def __repr__(self):
        tag = " taped" if self._tape is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tag})"

    # -- operator sugar --------------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, dtype=np.float32) -> Tensor:
    return Tensor(data, dtype=dtype)


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=np.float32) -> Tensor:
    return Tensor._wrap(np.ones(shape, dtype=dtype))


def full(shape, value, dtype=np.float32) -> Tensor:
    return Tensor._wrap(np.full(shape, value, dtype=dtype))


def eye(n: int, dtype=np.float32) -> Tensor:
    return Tensor._wrap(np.eye(n, dtype=dtype))


# -- the tape ------------------------------------------------------------------


@dataclass
class _Node:
    op: str
    parent_ids: tuple
    parent_consts: tuple
    value: np.ndarray
    forward: Optional[Callable]
    grad_fns: tuple
    name: Optional[str] = None  # set for parameter leaves


@dataclass
class Tape:
    """Ordered record of one forward computation.

    A tape is single-writer: one forward/backward pass owns it. Node
    order is construction order, which is already topological, so the
    backward walk is a single reverse sweep. ``gradients`` is filled by
    :func:`backward`.
    """

    nodes: list = field(default_factory=list)
    gradients: dict = field(default_factory=dict)
    _param_ids: dict = field(default_factory=dict)

    def param(self, name: str, value) -> Tensor:
        """Register a trainable leaf and return its taped tensor."""
        if name in self._param_ids:
            raise ContractError(f"parameter {name!r} already on this tape")
        base = value if isinstance(value, Tensor) else Tensor(value)
        if base._tape is not None:
            raise ContractError(f"parameter {name!r} is already bound to a tape")
        node = _Node("param", (), (), base.data, None, (), name=name)
        self.nodes.append(node)
        out = Tensor._wrap(base.data)
        out._tape = self
        out._node = len(self.nodes) - 1
        self._param_ids[name] = out._node
        return out

    def replay_check(self) -> None:
        """Recompute every recorded node from its stored inputs and
        verify bit-for-bit agreement with the recorded output."""
        for i, node in enumerate(self.nodes):
            if node.forward is None:
                continue
            args = [
                self.nodes[pid].value if pid is not None else const
                for pid, const in zip(node.parent_ids, node.parent_consts)
            ]
            redo = np.ascontiguousarray(node.forward(*args))
            if redo.dtype != node.value.dtype or redo.shape != node.value.shape \
                    or redo.tobytes() != node.value.tobytes():
                raise ContractError(f"tape replay mismatch at node {i} ({node.op})")


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def _common_tape(srcs) -> Optional[Tape]:
    tape = None
    for s in srcs:
        if s._tape is None:
            continue
        if tape is None:
            tape = s._tape
        elif tape is not s._tape:
            raise ContractError("operands belong to two different tapes")
    return tape


def _apply(op: str, srcs, out: np.ndarray, grad_fns, forward) -> Tensor:
    """Wrap an eagerly computed result, recording a node if needed."""
    tape = _common_tape(srcs)
    result = Tensor._wrap(out)
    if tape is None:
        return result
    parent_ids = tuple(s._node if s._tape is tape else None for s in srcs)
    parent_consts = tuple(
        None if pid is not None else s.data for pid, s in zip(parent_ids, srcs)
    )
    tape.nodes.append(
        _Node(op, parent_ids, parent_consts, result.data, forward, tuple(grad_fns))
    )
    result._tape = tape
    result._node = len(tape.nodes) - 1
    return result


def custom_op(name: str, srcs, out: np.ndarray, grad_fns, forward) -> Tensor:
    """Record an externally computed primitive on the operands' tape.

    ``srcs`` are the input tensors, ``out`` the eagerly computed result,
    ``grad_fns`` one gradient closure per source (None to stop), and
    ``forward`` recomputes the output from source arrays for replay."""
    return _apply(name, tuple(_as_tensor(s) for s in srcs), out, grad_fns, forward)


def _check_dtypes(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.dtype != b.data.dtype:
        raise ContractError(
            f"{op}: mixed precision {a.data.dtype.name} vs {b.data.dtype.name}"
        )


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_dtypes("add", a, b)
    out = a.data + b.data
    return _apply(
        "add",
        (a, b),
        out,
        (
            lambda g: _unbroadcast(g, a.data.shape),
            lambda g: _unbroadcast(g, b.data.shape),
        ),
        lambda xa, xb: xa + xb,
    )


def sub(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_dtypes("sub", a, b)
    out = a.data - b.data
    return _apply(
        "sub",
        (a, b),
        out,
        (
            lambda g: _unbroadcast(g, a.data.shape),
            lambda g: _unbroadcast(-g, b.data.shape),
        ),
        lambda xa, xb: xa - xb,
    )


def mul(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_dtypes("mul", a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data
    return _apply(
        "mul",
        (a, b),
        out,
        (
            lambda g: _unbroadcast(g * bd, ad.shape),
            lambda g: _unbroadcast(g * ad, bd.shape),
        ),
        lambda xa, xb: xa * xb,
    )


def div(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_dtypes("div", a, b)
    out = a.data / b.data
    ad, bd = a.data, b.data
    return _apply(
        "div",
        (a, b),
        out,
        (
            lambda g: _unbroadcast(g / bd, ad.shape),
            lambda g: _unbroadcast(-g * ad / (bd * bd), bd.shape),
        ),
        lambda xa, xb: xa / xb,
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _apply("neg", (a,), -a.data, (lambda g: -g,), lambda xa: -xa)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _apply("exp", (a,), out, (lambda g: g * out,), np.exp)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.data)
    ad = a.data
    return _apply("log", (a,), out, (lambda g: g / ad,), np.log)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _apply("sqrt", (a,), out, (lambda g: g * (0.5 / out),), np.sqrt)


# -- structure -------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))
    out = a.data.reshape(shape)
    src_shape = a.data.shape
    return _apply(
        "reshape",
        (a,),
        out,
        (lambda g: g.reshape(src_shape),),
        lambda xa: xa.reshape(shape),
    )


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    perm = tuple(axes) if axes is not None else tuple(reversed(range(a.data.ndim)))
    inv = tuple(np.argsort(perm))
    out = np.ascontiguousarray(np.transpose(a.data, perm))
    return _apply(
        "transpose",
        (a,),
        out,
        (lambda g: np.ascontiguousarray(np.transpose(g, inv)),),
        lambda xa: np.ascontiguousarray(np.transpose(xa, perm)),
    )


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    src_shape = a.data.shape
    return _apply(
        "broadcast_to",
        (a,),
        out,
        (lambda g: _unbroadcast(g, src_shape),),
        lambda xa: np.ascontiguousarray(np.broadcast_to(xa, shape)),
    )


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy() if not keepdims else np.broadcast_to(g, shape).copy()
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    src_shape = a.data.shape
    return _apply(
        "sum",
        (a,),
        np.asarray(out, dtype=a.data.dtype),
        (lambda g: _expand_reduced(g, src_shape, axis, keepdims),),
        lambda xa: np.asarray(xa.sum(axis=axis, keepdims=keepdims), dtype=xa.dtype),
    )


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    src_shape = a.data.shape
    count = a.data.size if axis is None else int(
        np.prod([src_shape[ax % len(src_shape)] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    )
    inv = 1.0 / count
    return _apply(
        "mean",
        (a,),
        np.asarray(out, dtype=a.data.dtype),
        (lambda g: _expand_reduced(g, src_shape, axis, keepdims) * np.asarray(inv, dtype=a.data.dtype),),
        lambda xa: np.asarray(xa.mean(axis=axis, keepdims=keepdims), dtype=xa.dtype),
    )


def gather_perm(a, perm: np.ndarray) -> Tensor:
    """Reorder axis 1 by a per-row permutation: out[i, j, ...] =
    a[i, perm[i, j], ...]. The backward pass gathers by the inverse
    permutation, so gradients are exact."""
    a = _as_tensor(a)
    perm = np.asarray(perm, dtype=np.int64)
    if a.data.ndim < 2 or perm.shape != a.data.shape[:2]:
        raise ShapeError(
            f"gather_perm: permutation shape {perm.shape} does not match "
            f"leading dims of {a.data.shape}"
        )
    rows = np.arange(perm.shape[0])[:, None]
    out = np.ascontiguousarray(a.data[rows, perm])
    inv = np.empty_like(perm)
    inv[rows, perm] = np.arange(perm.shape[1])[None, :]

    def grad(g):
        return np.ascontiguousarray(g[rows, inv])

    return _apply(
        "gather_perm",
        (a,),
        out,
        (grad,),
        lambda xa: np.ascontiguousarray(xa[rows, perm]),
    )


def diag_part(a) -> Tensor:
    """Main diagonal of a square matrix."""
    a = _as_tensor(a)
    if a.data.ndim != 2 or a.data.shape[0] != a.data.shape[1]:
        raise ShapeError(f"diag_part needs a square matrix, got {a.data.shape}")
    out = np.ascontiguousarray(np.diagonal(a.data))
    n = a.data.shape[0]

    def grad(g):
        gx = np.zeros((n, n), dtype=g.dtype)
        np.fill_diagonal(gx, g)
        return gx

    return _apply("diag_part", (a,), out, (grad,),
                  lambda xa: np.ascontiguousarray(np.diagonal(xa)))


# -- linear algebra ---------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product. 2-D operands use a single gemm; operands of equal
    rank >= 3 are multiplied independently over exactly matching leading
    dimensions (no implicit expansion: reshape explicitly instead)."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    _check_dtypes("matmul", a, b)
    ad, bd = a.data, b.data
    K = kernels.backend
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: inner dimensions disagree: {ad.shape} x {bd.shape}")
        out = K.matmul2d(ad, bd)
        grads = (
            lambda g: K.matmul2d(g, np.ascontiguousarray(bd.T)),
            lambda g: K.matmul2d(np.ascontiguousarray(ad.T), g),
        )
        return _apply("matmul", (a, b), out, grads, K.matmul2d)
    if ad.ndim == bd.ndim and ad.ndim >= 3:
        if ad.shape[:-2] != bd.shape[:-2]:
            raise ShapeError(
                f"matmul: leading dimensions must match exactly: {ad.shape} x {bd.shape}"
            )
        if ad.shape[-1] != bd.shape[-2]:
            raise ShapeError(f"matmul: inner dimensions disagree: {ad.shape} x {bd.shape}")
        lead = ad.shape[:-2]
        a3 = ad.reshape((-1,) + ad.shape[-2:])
        b3 = bd.reshape((-1,) + bd.shape[-2:])
        out = K.bmm(a3, b3).reshape(lead + (ad.shape[-2], bd.shape[-1]))

        def grad_a(g):
            g3 = g.reshape((-1, ad.shape[-2], bd.shape[-1]))
            bt = np.ascontiguousarray(b3.transpose(0, 2, 1))
            return K.bmm(g3, bt).reshape(ad.shape)

        def grad_b(g):
            g3 = g.reshape((-1, ad.shape[-2], bd.shape[-1]))
            at = np.ascontiguousarray(a3.transpose(0, 2, 1))
            return K.bmm(at, g3).reshape(bd.shape)

        def fwd(xa, xb):
            x3 = xa.reshape((-1,) + xa.shape[-2:])
            y3 = xb.reshape((-1,) + xb.shape[-2:])
            return K.bmm(x3, y3).reshape(lead + (xa.shape[-2], xb.shape[-1]))

        return _apply("matmul", (a, b), out, (grad_a, grad_b), fwd)
    raise ShapeError(
        f"matmul: unsupported ranks {ad.ndim} x {bd.ndim} for shapes {ad.shape} x {bd.shape}"
    )


# -- row-wise kernels ---------------------------------------------------------------


def _rows_view(arr: np.ndarray, axis: int):
    """Move `axis` last and flatten to (rows, cols); returns the rows
    array plus a function restoring an equally shaped result."""
    nd = arr.ndim
    axis = axis % nd
    if axis == nd - 1:
        rows = np.ascontiguousarray(arr.reshape(-1, arr.shape[-1]))
        shape = arr.shape

        def restore(r):
            return r.reshape(shape)

        return rows, restore
    moved = np.ascontiguousarray(np.moveaxis(arr, axis, -1))
    mshape = moved.shape
    rows = moved.reshape(-1, mshape[-1])

    def restore(r):
        return np.ascontiguousarray(np.moveaxis(r.reshape(mshape), -1, axis))

    return rows, restore


def _check_axis(arr: np.ndarray, axis: int, op: str) -> None:
    if not -arr.ndim <= axis < arr.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {arr.shape}")


def softmax(a, axis: int = -1) -> Tensor:
    """Exp-normalize along one axis with max subtraction; slices sum to 1."""
    a = _as_tensor(a)
    _check_axis(a.data, axis, "softmax")
    K = kernels.backend
    rows, restore = _rows_view(a.data, axis)
    y = restore(K.softmax2d(rows))

    def grad(g):
        yr, rest = _rows_view(y, axis)
        gr, _ = _rows_view(g, axis)
        return rest(K.softmax2d_grad(yr, gr))

    def fwd(xa):
        r, rest = _rows_view(xa, axis)
        return rest(kernels.backend.softmax2d(r))

    return _apply("softmax", (a,), y, (grad,), fwd)


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale each vector along `axis` to unit length; vectors with norm
    at or below `eps` are divided by `eps` instead (zero stays zero)."""
    a = _as_tensor(a)
    _check_axis(a.data, axis, "l2_normalize")
    K = kernels.backend
    rows, restore = _rows_view(a.data, axis)
    yr, norms = K.l2norm2d(rows, eps)
    y = restore(yr)

    def grad(g):
        gr, rest = _rows_view(g, axis)
        return rest(K.l2norm2d_grad(yr, norms, eps, gr))

    def fwd(xa):
        r, rest = _rows_view(xa, axis)
        return rest(kernels.backend.l2norm2d(r, eps)[0])

    return _apply("l2_normalize", (a,), y, (grad,), fwd)


def sigmoid(a) -> Tensor:
    """1/(1+exp(-x)), saturation-safe at both tails."""
    a = _as_tensor(a)
    K = kernels.backend
    y = K.sigmoid(a.data)
    return _apply("sigmoid", (a,), y, (lambda g: K.sigmoid_grad(y, g),),
                  kernels.backend.sigmoid)


def softplus(a) -> Tensor:
    """log(1+exp(x)) in its overflow-free form."""
    a = _as_tensor(a)
    K = kernels.backend
    y = K.softplus(a.data)
    ad = a.data
    return _apply("softplus", (a,), y, (lambda g: K.softplus_grad(ad, g),),
                  kernels.backend.softplus)


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-vector standardization over the last axis (1/D variance),
    then an affine map by gamma and beta."""
    a = _as_tensor(a)
    gamma = _as_tensor(gamma, like=a)
    beta = _as_tensor(beta, like=a)
    _check_dtypes("layer_norm", a, gamma)
    _check_dtypes("layer_norm", a, beta)
    d = a.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma/beta shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match feature width ({d},)"
        )
    K = kernels.backend
    rows = np.ascontiguousarray(a.data.reshape(-1, d))
    yr, xhat, rstd = K.layernorm2d(rows, gamma.data, beta.data, eps)
    y = yr.reshape(a.data.shape)
    gm, bt = gamma.data, beta.data

    def grad_x(g):
        gr = np.ascontiguousarray(g.reshape(-1, d))
        gx, _, _ = K.layernorm2d_grad(gm, xhat, rstd, gr)
        return gx.reshape(a.data.shape)

    def grad_gamma(g):
        gr = np.ascontiguousarray(g.reshape(-1, d))
        return (gr * xhat).sum(axis=0)

    def grad_beta(g):
        return g.reshape(-1, d).sum(axis=0)

    def fwd(xa, xg, xb):
        r = np.ascontiguousarray(xa.reshape(-1, d))
        return kernels.backend.layernorm2d(r, xg, xb, eps)[0].reshape(xa.shape)

    return _apply("layer_norm", (a, gamma, beta), y,
                  (grad_x, grad_gamma, grad_beta), fwd)


def frobenius_distance_to_identity(g) -> Tensor:
    """sqrt(sum((G - I)^2)) for a square matrix G."""
    g = _as_tensor(g)
    if g.data.ndim != 2 or g.data.shape[0] != g.data.shape[1]:
        raise ShapeError(
            f"frobenius_distance_to_identity needs a square matrix, got {g.data.shape}"
        )
    ident = Tensor._wrap(np.eye(g.data.shape[0], dtype=g.data.dtype))
    d = sub(g, ident)
    return sqrt(sum_(mul(d, d)))


def logsumexp(a, axis: int) -> Tensor:
    """Stable log-sum-exp along one axis (max handled as a constant,
    which leaves the exact softmax gradient)."""
    a = _as_tensor(a)
    _check_axis(a.data, axis, "logsumexp")
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = exp(sub(a, Tensor._wrap(m)))
    return add(log(sum_(shifted, axis=axis)), Tensor._wrap(np.squeeze(m, axis=axis)))


# -- differentiation ------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> dict:
    """Reverse-mode gradients of a scalar loss for every parameter on
    the tape. Parameters the loss does not depend on get exact zeros.
    Results are returned and stored on ``tape.gradients``."""
    if not isinstance(loss, Tensor) or loss._tape is not tape:
        raise ContractError("loss was not computed on this tape")
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    acc = {loss._node: np.ones_like(loss.data)}
    param_grads: dict[str, np.ndarray] = {}
    for nid in range(loss._node, -1, -1):
        g = acc.pop(nid, None)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.op == "param":
            param_grads[node.name] = g
            continue
        for pid, gfn in zip(node.parent_ids, node.grad_fns):
            if pid is None or gfn is None:
                continue
            contrib = gfn(g)
            prev = acc.get(pid)
            acc[pid] = contrib if prev is None else prev + contrib
    out = {}
    for name, pid in tape._param_ids.items():
        arr = param_grads.get(name)
        if arr is None:
            arr = np.zeros_like(tape.nodes[pid].value)
        out[name] = Tensor._wrap(np.asarray(arr, dtype=tape.nodes[pid].value.dtype))
    tape.gradients = out
    return out


@dataclass
class GradCheckReport:
    """Central-difference comparison for every parameter coordinate."""

    per_param: dict
    worst_param: str
    worst_index: int
    worst_analytic: float
    worst_numeric: float

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    def lines(self):
        for name in sorted(self.per_param):
            yield f"{name} {self.per_param[name]:.3e}"


def grad_check(fn, params: Mapping[str, Tensor], step: float = 1e-5) -> GradCheckReport:
    """Compare tape gradients of ``fn`` against central differences.

    ``fn`` maps a dict of tensors to a scalar tensor and must be
    deterministic; it is called once on taped parameters and twice per
    parameter coordinate on plain ones. Relative error uses
    max(|analytic|, |numeric|, 1e-8) as the denominator; 1e-8 is also
    the measurement floor: when both magnitudes sit at or below it the
    difference is beneath what a 64-bit central difference resolves
    (a constant function legitimately reads back noise at that scale),
    so such coordinates count as agreeing.
    """
    tape = Tape()
    taped = {k: tape.param(k, v) for k, v in params.items()}
    out = fn(taped)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("grad_check needs fn to return a scalar tensor")
    if not np.isfinite(out.data).all():
        raise ContractError("grad_check: fn is non-finite at the base point")
    grads = backward(tape, out)

    plain = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
    per_param = {}
    worst = (-1.0, "", 0, 0.0, 0.0)
    for name, p in plain.items():
        base = p.data.ravel()
        analytic = grads[name].data.ravel()
        worst_here = 0.0
        for i in range(base.size):
            num = _central_diff(fn, plain, name, p, i, step)
            a = float(analytic[i])
            if max(abs(a), abs(num)) <= 1e-8:
                rel = 0.0
            else:
                rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
            if rel > worst_here:
                worst_here = rel
            if rel > worst[0]:
                worst = (rel, name, i, a, num)
        per_param[name] = worst_here
    return GradCheckReport(per_param, worst[1], worst[2], worst[3], worst[4])


def _central_diff(fn, plain, name, p, i, step) -> float:
    vals = []
    for sgn in (+1.0, -1.0):
        bumped = p.data.copy()
        bumped.ravel()[i] += sgn * step
        probe = dict(plain)
        probe[name] = Tensor._wrap(bumped)
        v = fn(probe)
        fv = float(v.data.reshape(()))
        if not np.isfinite(fv):
            raise ContractError(
                f"grad_check: fn non-finite at {name}[{i}] with step {sgn * step:+g}"
            )
        vals.append(fv)
    return (vals[0] - vals[1]) / (2.0 * step)
