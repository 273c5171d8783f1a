"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

The op set is exactly what the intensity model needs: 2-D matmul, a small
elementwise family, masked softmax, layer norm, concat/slice, and full
reductions. Broadcasting is restricted to scalar-with-tensor and same-shape;
anything else is a ShapeError. Every forward result is checked for finiteness
so NaN/Inf surfaces at the op that produced it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DomainError, NumericalError, ShapeError

Array = np.ndarray


def _as_array(values) -> Array:
    # order='C' rather than ascontiguousarray: the latter promotes 0-d to 1-d
    return np.asarray(values, dtype=np.float64, order="C")


def _check_finite(kind: str, data: Array) -> None:
    if data.size and not np.isfinite(data).all():
        raise NumericalError(f"non-finite result in op '{kind}'")


@dataclass
class Record:
    """One taped operation: enough to replay its backward rule."""

    kind: str
    input_ids: tuple
    out_id: int
    backward: Callable[[Array], tuple]
    saved: tuple = ()


class Tape:
    """Single-threaded gradient tape; records form a DAG in forward order."""

    def __init__(self):
        self.records: list[Record] = []
        self._next_id = 0
        self._leaf_ids: list[int] = []
        self._leaf_shapes: dict[int, tuple] = {}

    def _new_node(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def leaf(self, values) -> "Tensor":
        """Register a watched leaf; backward() reports its gradient."""
        data = _as_array(values)
        _check_finite("leaf", data)
        nid = self._new_node()
        self._leaf_ids.append(nid)
        self._leaf_shapes[nid] = data.shape
        return Tensor(data, tape=self, node=nid)

    def backward(self, root: "Tensor") -> dict[int, Array]:
        """Accumulate gradients of a scalar root for every leaf.

        Leaves unreachable from the root get zero gradients.
        """
        if root.tape is not self or root.node is None:
            raise ContractError("root tensor does not belong to this tape")
        if root.data.shape != ():
            raise ContractError(
                f"backward root must be scalar, got shape {root.data.shape}"
            )
        grads: dict[int, Array] = {root.node: np.ones((), dtype=np.float64)}
        for rec in reversed(self.records):
            g_out = grads.pop(rec.out_id, None)
            if g_out is None:
                continue
            for nid, g_in in zip(rec.input_ids, rec.backward(g_out)):
                if nid is None or g_in is None:
                    continue
                if nid in grads:
                    grads[nid] = grads[nid] + g_in
                else:
                    grads[nid] = np.array(g_in, dtype=np.float64, copy=True)
        out = {}
        for nid in self._leaf_ids:
            out[nid] = grads.get(nid, np.zeros(self._leaf_shapes[nid]))
        return out


class Tensor:
    """Immutable dense array of 64-bit reals, optionally tied to a tape node."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Optional[Tape] = None, node: Optional[int] = None):
        self.data = _as_array(data)
        self.tape = tape
        self.node = node

    @classmethod
    def const(cls, values) -> "Tensor":
        return cls(_as_array(values))

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # operator sugar used by the model code
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, _coerce(other))

    def __sub__(self, other):
        return add(self, negate(_coerce(other)))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return negate(self)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor.const(x)


def _common_tape(*tensors: Tensor) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ContractError("operands belong to different tapes")
    return tape


def _emit(kind: str, inputs: Sequence[Tensor], data: Array, backward, saved=()) -> Tensor:
    """Create the output tensor, recording the op if any input is taped."""
    _check_finite(kind, data)
    tape = _common_tape(*inputs)
    if tape is None:
        return Tensor(data)
    nid = tape._new_node()
    tape.records.append(
        Record(kind, tuple(t.node for t in inputs), nid, backward, saved)
    )
    return Tensor(data, tape=tape, node=nid)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _emit("matmul", (a, b), ad @ bd, bwd, saved=(ad, bd))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D operand, got {a.shape}")

    def bwd(g):
        return (g.T.copy(),)

    return _emit("transpose", (a,), a.data.T.copy(), bwd)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with the bias row broadcast over rows.

    Fused so every linear layer costs one record instead of a matmul plus a
    ones-column broadcast; like layer_norm, the broadcast lives inside the op.
    """
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("affine needs 2-D x, w and a (1, d) bias row")
    if x.shape[1] != w.shape[0] or b.shape != (1, w.shape[1]):
        raise ShapeError(
            f"affine shapes disagree: x {x.shape}, w {w.shape}, b {b.shape}"
        )
    xd, wd = x.data, w.data

    def bwd(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0, keepdims=True)

    return _emit("affine", (x, w, b), xd @ wd + b.data, bwd, saved=(xd, wd))


# ---------------------------------------------------------------------------
# elementwise family (scalar-with-tensor or same-shape only)


def _binary_shapes(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast")


def _reduce_to(shape: tuple, g: Array) -> Array:
    # only the scalar-with-tensor case ever needs reduction
    if shape == () and g.shape != ():
        return np.asarray(g.sum())
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("add", a, b)

    def bwd(g):
        return _reduce_to(a.shape, g), _reduce_to(b.shape, g)

    return _emit("add", (a, b), a.data + b.data, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("mul", a, b)
    ad, bd = a.data, b.data

    def bwd(g):
        return _reduce_to(a.shape, g * bd), _reduce_to(b.shape, g * ad)

    return _emit("mul", (a, b), ad * bd, bwd, saved=(ad, bd))


def negate(a: Tensor) -> Tensor:
    def bwd(g):
        return (-g,)

    return _emit("negate", (a,), -a.data, bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        return (g * c,)

    return _emit("scale", (a,), a.data * c, bwd)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _emit("exp", (a,), out, bwd, saved=(out,))


def log(a: Tensor) -> Tensor:
    if a.data.size and np.any(a.data <= 0.0):
        raise DomainError("log of non-positive value")
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return _emit("log", (a,), np.log(ad), bwd, saved=(ad,))


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    # overflow-safe: above 30 the function is x to within 1e-13
    out = np.where(ad > 30.0, ad, np.log1p(np.exp(np.minimum(ad, 30.0))))

    def bwd(g):
        sig = np.where(ad > 30.0, 1.0, 1.0 / (1.0 + np.exp(-np.minimum(ad, 30.0))))
        return (g * sig,)

    return _emit("softplus", (a,), out, bwd, saved=(ad,))


def expm1_over_array(x: Array) -> Array:
    """(1 - exp(-x)) / x on plain arrays; series branch below 1e-6, value 1 at 0."""
    x = np.asarray(x, dtype=np.float64)
    small = np.abs(x) < 1e-6
    safe = np.where(small, 1.0, x)
    return np.where(small, 1.0 - x / 2.0 + x * x / 6.0, -np.expm1(-safe) / safe)


def expm1_over(a: Tensor) -> Tensor:
    """(1 - exp(-x)) / x with a series branch near 0; value 1 at x = 0.

    Needed by the closed-form compensator so small decay-rate-times-gap
    products stay differentiable without catastrophic cancellation.
    """
    ad = a.data
    out = expm1_over_array(ad)

    def bwd(g):
        deriv_small = np.abs(ad) < 1e-4
        safe_d = np.where(deriv_small, 1.0, ad)
        exact = (safe_d * np.exp(-safe_d) + np.expm1(-safe_d)) / (safe_d * safe_d)
        series = -0.5 + ad / 3.0 - ad * ad / 8.0
        return (g * np.where(deriv_small, series, exact),)

    return _emit("expm1_over", (a,), out, bwd, saved=(ad,))


# ---------------------------------------------------------------------------
# normalization and attention pieces


def softmax_lastdim(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row softmax over the last dim; masked entries come out exactly zero.

    `mask` is a constant boolean array (True = keep) of x's shape.
    """
    xd = x.data
    if xd.ndim < 1:
        raise ShapeError("softmax needs at least one dimension")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != xd.shape:
            raise ShapeError(f"mask shape {mask.shape} != input shape {xd.shape}")
        if xd.size and not mask.any(axis=-1).all():
            raise DomainError("softmax row is fully masked")
        shifted = np.where(mask, xd, -np.inf)
        rowmax = shifted.max(axis=-1, keepdims=True)
        z = np.where(mask, xd - rowmax, 0.0)
        e = np.where(mask, np.exp(z), 0.0)
    else:
        rowmax = xd.max(axis=-1, keepdims=True) if xd.size else xd
        e = np.exp(xd - rowmax)
    denom = e.sum(axis=-1, keepdims=True)
    y = e / denom

    def bwd(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _emit("softmax", (x,), y, bwd, saved=(y,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of the last dim to zero mean/unit variance, then
    apply the per-feature affine."""
    xd = x.data
    d = xd.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine params must have shape ({d},), "
            f"got {gain.shape} and {bias.shape}"
        )
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data
    gd = gain.data

    def bwd(g):
        axes = tuple(range(xd.ndim - 1))
        d_gain = (g * xhat).sum(axis=axes)
        d_bias = g.sum(axis=axes)
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, d_gain, d_bias

    return _emit("layer_norm", (x, gain, bias), y, bwd, saved=(xhat, inv))


# ---------------------------------------------------------------------------
# structure ops


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ContractError("concat of zero tensors")
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    data = np.concatenate([p.data for p in parts], axis=axis)
    return _emit("concat", tuple(parts), data, bwd)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    n = a.data.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis size {n}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = a.data.shape

    def bwd(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _emit("slice", (a,), a.data[idx].copy(), bwd)


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape

    def bwd(g):
        return (np.full(shape, float(g)),)

    return _emit("sum_all", (a,), np.asarray(a.data.sum()), bwd)


def mean_all(a: Tensor) -> Tensor:
    if a.data.size == 0:
        raise ContractError("mean of an empty tensor")
    shape = a.data.shape
    n = a.data.size

    def bwd(g):
        return (np.full(shape, float(g) / n),)

    return _emit("mean_all", (a,), np.asarray(a.data.mean()), bwd)


ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "exp": exp,
    "log": log,
    "softplus": softplus,
    "negate": negate,
    "scale": scale,
    "expm1_over": expm1_over,
}


def elementwise(kind: str, *args):
    """Dispatch by op-kind name; see ELEMENTWISE for the supported set."""
    try:
        fn = ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise op '{kind}'") from None
    return fn(*args)


def softplus_inverse(y: float) -> float:
    """Scalar inverse of softplus, used to seed head biases."""
    if y <= 0:
        raise DomainError("softplus_inverse needs a positive argument")
    if y > 30.0:
        return y
    return math.log(math.expm1(y))


GradientTape = Tape
