"""Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable computation in this package is expressed through the
operations in this module, which keeps the differentiation contract in one
place: an op either has a vector-Jacobian product registered below or its
docstring says it is detached.

Conventions:
  * all data is float64 and row-major in memory,
  * -inf is a reserved sentinel accepted only by the bias argument of
    ``masked_softmax_rows``; every other operand must be finite,
  * argmax-style choices (none live here, see ``attention``) break ties
    toward the smallest index,
  * a scalar is a rank-0 tensor.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import AllMasked, ShapeMismatch, UntrackedLoss

__all__ = [
    "Tensor", "GradTape", "grad", "as_tensor", "zeros", "detach", "binarize",
    "add", "sub", "mul", "div", "neg", "add_scalar", "scale",
    "matmul", "transpose", "reshape", "concat_channels", "tile_spatial",
    "add_rowvec", "sum_all", "exp", "log", "sigmoid", "clamp",
    "logsumexp0", "masked_softmax_rows", "conv1x1",
]


class Tensor:
    """Immutable dense array of 64-bit floats.

    ``neg_inf_ok`` marks a tensor as a masked-attention bias carrier, the
    only place the -inf sentinel may appear. ``tape``/``nid`` are set when
    the tensor was produced under a GradTape.
    """

    __slots__ = ("data", "tape", "nid", "neg_inf_ok")

    def __init__(self, data, *, neg_inf_ok: bool = False):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        _validate_values(arr, neg_inf_ok)
        arr.setflags(write=False)
        self.data = arr
        self.tape: GradTape | None = None
        self.nid: int | None = None
        self.neg_inf_ok = neg_inf_ok

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
            raise ShapeMismatch(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(())[()])

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying array."""
        return self.data

    def tolist(self):
        return self.data.tolist()

    def __repr__(self) -> str:
        tracked = "" if self.tape is None else f" nid={self.nid}"
        return f"Tensor(shape={self.shape}{tracked})\n{self.data!r}"

    # Convenience arithmetic. Scalar operands mean constant scaling/shifts;
    # tensor operands must match shapes exactly (no broadcasting).
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, -float(other))
        return sub(self, other)

    def __rsub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(neg(self), float(other))
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _validate_values(arr: np.ndarray, neg_inf_ok: bool) -> None:
    if neg_inf_ok:
        if np.isnan(arr).any() or (arr == np.inf).any():
            raise ValueError("bias tensor may hold finite values or -inf only")
    elif not np.isfinite(arr).all():
        raise ValueError("tensor data must be finite (-inf is reserved for attention bias)")


def _wrap(arr: np.ndarray, *, neg_inf_ok: bool = False) -> Tensor:
    """Adopt an op-owned array without copying.

    Unlike construction from user data, a non-finite value here means an
    operation's result overflowed, which is a numerical failure rather than
    a validation one.
    """
    out = Tensor.__new__(Tensor)
    # asarray keeps rank-0 arrays rank-0 (ascontiguousarray would promote)
    arr = np.asarray(arr, dtype=np.float64, order="C")
    try:
        _validate_values(arr, neg_inf_ok)
    except ValueError as err:
        raise FloatingPointError(str(err)) from None
    arr.setflags(write=False)
    out.data = arr
    out.tape = None
    out.nid = None
    out.neg_inf_ok = neg_inf_ok
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape) -> Tensor:
    return _wrap(np.zeros(shape))


def detach(t: Tensor) -> Tensor:
    """Same values, no tape: gradients stop here."""
    if t.tape is None:
        return t
    return _wrap(t.data, neg_inf_ok=t.neg_inf_ok)


def binarize(t: Tensor, threshold: float = 0.5) -> Tensor:
    """Detached hard threshold: 1.0 where value >= threshold else 0.0."""
    return _wrap((t.data >= threshold).astype(np.float64))


class GradTape:
    """Ordered record of executed operations for reverse-mode accumulation.

    Operations are registered automatically whenever at least one input is
    tracked on the tape. ``watch`` marks a parameter; ``grad`` walks the
    record backwards once and returns one gradient tensor per marked
    parameter (zeros if the loss never touched it).
    """

    def __init__(self):
        self._records: list[tuple[int, tuple[int | None, ...], Callable[[np.ndarray], tuple]]] = []
        self._watched: list[Tensor] = []
        self._next_id = 0

    def watch(self, t: Tensor) -> Tensor:
        """Register a parameter and return its tracked alias."""
        if t.neg_inf_ok:
            raise ValueError("bias tensors are constants and cannot be watched")
        if t.tape is not None:
            raise ValueError("tensor is already tracked on a tape")
        tracked = self._adopt(t.data)
        self._watched.append(tracked)
        return tracked

    def _adopt(self, arr: np.ndarray) -> Tensor:
        out = _wrap(arr)
        out.tape = self
        out.nid = self._next_id
        self._next_id += 1
        return out

    def _record(self, out_nid: int, in_nids: tuple[int | None, ...], vjp) -> None:
        self._records.append((out_nid, in_nids, vjp))


def grad(tape: GradTape, loss: Tensor) -> dict[Tensor, Tensor]:
    """Reverse-accumulate d(loss)/d(param) for every watched parameter.

    The returned map is keyed by the tracked parameter tensors returned by
    ``tape.watch``. Parameters the loss does not depend on map to zeros.
    """
    if loss.tape is not tape or loss.nid is None:
        raise UntrackedLoss("loss was not computed on this tape")
    if loss.size != 1:
        raise ShapeMismatch(f"loss must be a scalar, got shape {loss.shape}")
    adjoint: dict[int, np.ndarray] = {loss.nid: np.ones(loss.shape)}
    for out_nid, in_nids, vjp in reversed(tape._records):
        g = adjoint.get(out_nid)
        if g is None:
            continue
        for nid, contrib in zip(in_nids, vjp(g)):
            if nid is None or contrib is None:
                continue
            prior = adjoint.get(nid)
            adjoint[nid] = contrib if prior is None else prior + contrib
    out: dict[Tensor, Tensor] = {}
    for p in tape._watched:
        g = adjoint.get(p.nid)
        out[p] = _wrap(np.zeros(p.shape)) if g is None else _wrap(np.array(g, dtype=np.float64))
    return out


def _emit(data: np.ndarray, inputs: Sequence[Tensor], vjp, *, neg_inf_ok: bool = False) -> Tensor:
    """Wrap an op result, recording it on the inputs' tape when tracked."""
    tape: GradTape | None = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands belong to different tapes")
    if tape is None:
        return _wrap(data, neg_inf_ok=neg_inf_ok)
    out = tape._adopt(np.asarray(data, dtype=np.float64, order="C"))
    tape._record(out.nid, tuple(t.nid for t in inputs), vjp)
    return out


def _reject_bias(op: str, *tensors: Tensor) -> None:
    for t in tensors:
        if t.neg_inf_ok:
            raise ValueError(f"{op} does not accept attention-bias tensors")


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


# Vector-Jacobian products. Module-level on purpose: recorded closures look
# these up by name at call time, so a test can swap one out to prove the
# gradient checker catches a corrupted backward rule.

def _add_vjp(g):
    return g, g


def _sub_vjp(g):
    return g, -g


def _mul_vjp(g, a, b):
    return g * b, g * a


def _div_vjp(g, a, b):
    return g / b, -g * a / (b * b)


def _neg_vjp(g):
    return (-g,)


def _scale_vjp(g, c):
    return (g * c,)


def _identity_vjp(g):
    return (g,)


def _matmul_vjp(g, a, b):
    return g @ b.T, a.T @ g


def _transpose_vjp(g):
    return (g.T,)


def _reshape_vjp(g, shape):
    return (np.ascontiguousarray(g).reshape(shape),)


def _concat_vjp(g, cuts):
    return tuple(np.split(g, cuts, axis=0))


def _tile_spatial_vjp(g):
    return (g.sum(axis=(1, 2)),)


def _add_rowvec_vjp(g):
    return g, g.sum(axis=0)


def _sum_all_vjp(g, shape):
    return (np.full(shape, float(g)),)


def _exp_vjp(g, out):
    return (g * out,)


def _log_vjp(g, a):
    return (g / a,)


def _sigmoid_vjp(g, out):
    return (g * out * (1.0 - out),)


def _clamp_vjp(g, a, lo, hi):
    return (g * ((a >= lo) & (a <= hi)),)


def _logsumexp0_vjp(g, soft):
    return (soft * g[None, :],)


def _masked_softmax_vjp(g, s):
    return (s * (g - (g * s).sum(axis=1, keepdims=True)), None)


def _conv1x1_vjp(g, x, w):
    return (
        np.einsum("oc,ohw->chw", w, g),
        np.einsum("ohw,chw->oc", g, x),
        g.sum(axis=(1, 2)),
    )


# Elementwise and structural operations.

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _reject_bias("add", a, b)
    _same_shape("add", a, b)
    return _emit(a.data + b.data, (a, b), lambda g: _add_vjp(g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _reject_bias("sub", a, b)
    _same_shape("sub", a, b)
    return _emit(a.data - b.data, (a, b), lambda g: _sub_vjp(g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _reject_bias("mul", a, b)
    _same_shape("mul", a, b)
    da, db = a.data, b.data
    return _emit(da * db, (a, b), lambda g: _mul_vjp(g, da, db))


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _reject_bias("div", a, b)
    _same_shape("div", a, b)
    da, db = a.data, b.data
    return _emit(da / db, (a, b), lambda g: _div_vjp(g, da, db))


def neg(a: Tensor) -> Tensor:
    _reject_bias("neg", a)
    return _emit(-a.data, (a,), lambda g: _neg_vjp(g))


def add_scalar(a: Tensor, c: float) -> Tensor:
    _reject_bias("add_scalar", a)
    c = float(c)
    return _emit(a.data + c, (a,), lambda g: _identity_vjp(g))


def scale(a: Tensor, c: float) -> Tensor:
    _reject_bias("scale", a)
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: _scale_vjp(g, c))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-D matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    _reject_bias("matmul", a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: inner dims differ ({a.shape} @ {b.shape})")
    da, db = a.data, b.data
    return _emit(da @ db, (a, b), lambda g: _matmul_vjp(g, da, db))


def transpose(a: Tensor) -> Tensor:
    _reject_bias("transpose", a)
    if a.ndim != 2:
        raise ShapeMismatch(f"transpose needs a 2-D tensor, got {a.shape}")
    return _emit(np.ascontiguousarray(a.data.T), (a,), lambda g: _transpose_vjp(g))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    _reject_bias("reshape", a)
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeMismatch(f"reshape target must be positive dims, got {shape}")
    if math.prod(shape) != a.size:
        raise ShapeMismatch(f"reshape from {a.shape} to {shape} changes the element count")
    in_shape = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: _reshape_vjp(g, in_shape))


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0; trailing dimensions must match."""
    if not parts:
        raise ShapeMismatch("concat_channels needs at least one tensor")
    parts = [as_tensor(p) for p in parts]
    _reject_bias("concat_channels", *parts)
    tail = parts[0].shape[1:]
    for p in parts[1:]:
        if p.ndim != parts[0].ndim or p.shape[1:] != tail:
            raise ShapeMismatch(f"concat_channels: trailing dims differ ({parts[0].shape} vs {p.shape})")
    sizes = [p.shape[0] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.data for p in parts], axis=0)
    return _emit(out, parts, lambda g: _concat_vjp(g, cuts))


def tile_spatial(v: Tensor, h: int, w: int) -> Tensor:
    """Broadcast a channel vector [C] to a constant map [C, h, w]."""
    _reject_bias("tile_spatial", v)
    if v.ndim != 1:
        raise ShapeMismatch(f"tile_spatial needs a 1-D tensor, got {v.shape}")
    out = np.broadcast_to(v.data[:, None, None], (v.shape[0], int(h), int(w))).copy()
    return _emit(out, (v,), lambda g: _tile_spatial_vjp(g))


def add_rowvec(m: Tensor, v: Tensor) -> Tensor:
    """Add a vector [c] to every row of a matrix [r, c]."""
    m, v = as_tensor(m), as_tensor(v)
    _reject_bias("add_rowvec", m, v)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeMismatch(f"add_rowvec: got matrix {m.shape} and vector {v.shape}")
    return _emit(m.data + v.data[None, :], (m, v), lambda g: _add_rowvec_vjp(g))


def sum_all(a: Tensor) -> Tensor:
    _reject_bias("sum_all", a)
    shape = a.shape
    return _emit(np.asarray(a.data.sum()), (a,), lambda g: _sum_all_vjp(g, shape))


def exp(a: Tensor) -> Tensor:
    _reject_bias("exp", a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.isfinite(out).all():
        raise FloatingPointError("exp overflowed to infinity")
    return _emit(out, (a,), lambda g: _exp_vjp(g, out))


def log(a: Tensor) -> Tensor:
    _reject_bias("log", a)
    if (a.data <= 0.0).any():
        raise FloatingPointError("log needs strictly positive inputs")
    da = a.data
    return _emit(np.log(da), (a,), lambda g: _log_vjp(g, da))


def sigmoid(a: Tensor) -> Tensor:
    """Numerically stable logistic function."""
    _reject_bias("sigmoid", a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit(out, (a,), lambda g: _sigmoid_vjp(g, out))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the gradient passes through the unclipped region."""
    _reject_bias("clamp", a)
    lo, hi = float(lo), float(hi)
    if not lo <= hi:
        raise ShapeMismatch(f"clamp: lo={lo} exceeds hi={hi}")
    da = a.data
    return _emit(np.clip(da, lo, hi), (a,), lambda g: _clamp_vjp(g, da, lo, hi))


def logsumexp0(a: Tensor) -> Tensor:
    """Stable log-sum-exp over axis 0 of a 2-D tensor: [r, c] -> [c]."""
    _reject_bias("logsumexp0", a)
    if a.ndim != 2:
        raise ShapeMismatch(f"logsumexp0 needs a 2-D tensor, got {a.shape}")
    x = a.data
    m = x.max(axis=0, keepdims=True)
    e = np.exp(x - m)
    denom = e.sum(axis=0, keepdims=True)
    out = (m + np.log(denom)).reshape(-1)
    soft = e / denom
    return _emit(out, (a,), lambda g: _logsumexp0_vjp(g, soft))


def masked_softmax_rows(x: Tensor, bias: Tensor) -> Tensor:
    """Row-wise softmax of ``x + bias``.

    The bias is a constant: it may carry the -inf sentinel (those entries
    come out exactly 0) and no gradient is propagated into it. A row whose
    entries are all masked raises AllMasked. Shapes: x is [r, c]; bias is
    [c] or [r, c].
    """
    x = as_tensor(x)
    _reject_bias("masked_softmax_rows (logits)", x)
    if x.ndim != 2:
        raise ShapeMismatch(f"masked_softmax_rows needs 2-D logits, got {x.shape}")
    b = as_tensor(bias) if not isinstance(bias, Tensor) else bias
    if b.ndim == 1:
        if b.shape[0] != x.shape[1]:
            raise ShapeMismatch(f"bias {b.shape} does not match logits {x.shape}")
        bdata = np.broadcast_to(b.data[None, :], x.shape)
    elif b.ndim == 2:
        if b.shape != x.shape:
            raise ShapeMismatch(f"bias {b.shape} does not match logits {x.shape}")
        bdata = b.data
    else:
        raise ShapeMismatch(f"bias must be 1-D or 2-D, got {b.shape}")
    logits = x.data + bdata
    alive = np.isfinite(logits)
    if not alive.any(axis=1).all():
        raise AllMasked("softmax row has every entry masked")
    m = np.where(alive, logits, -np.inf).max(axis=1, keepdims=True)
    with np.errstate(invalid="ignore"):
        shifted = logits - m
    e = np.where(alive, np.exp(np.where(alive, shifted, 0.0)), 0.0)
    s = e / e.sum(axis=1, keepdims=True)
    return _emit(s, (x,), lambda g: _masked_softmax_vjp(g, s))


def conv1x1(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Pointwise convolution: [C_in, H, W] with weight [C_out, C_in], bias [C_out].

    Equivalent to a matrix product over the flattened spatial axis.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    _reject_bias("conv1x1", x, w, b)
    if x.ndim != 3 or w.ndim != 2 or b.ndim != 1:
        raise ShapeMismatch(f"conv1x1: expected ranks (3, 2, 1), got {x.shape}, {w.shape}, {b.shape}")
    if w.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"conv1x1: weight {w.shape} does not match input channels {x.shape[0]}")
    if b.shape[0] != w.shape[0]:
        raise ShapeMismatch(f"conv1x1: bias {b.shape} does not match output channels {w.shape[0]}")
    dx, dw = x.data, w.data
    out = np.einsum("oc,chw->ohw", dw, dx) + b.data[:, None, None]
    return _emit(out, (x, w, b), lambda g: _conv1x1_vjp(g, dx, dw))
