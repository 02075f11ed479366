"""Dense numpy-backed tensors with a dynamic reverse-mode tape.

Operations record themselves on the tape active in the current thread when at
least one input requires a gradient. Without an active tape nothing is
recorded, which is the inference path.

    with Tape() as tape:
        loss = model_loss(params)
    grads = backward(tape, loss, params)

Broadcasting is deliberately limited to adding a 1-D row vector over the last
axis; every other shape mix raises :class:`DimensionError`.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor", "Tape", "ParamStore", "backward", "finite_diff_check", "apply_op",
    "add", "sub", "mul", "scale", "neg", "matmul", "bmm", "transpose", "reshape",
    "concat", "slice_", "mean", "sum_", "softmax_rows", "gelu", "layer_norm",
]

_local = threading.local()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if any(s < 1 for s in arr.shape):
            raise DimensionError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)


def _not_scalar(t: Tensor):
    raise ContractError(f"expected a single-element tensor, got shape {t.shape}")


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Nodes are appended as operations execute, so inputs always precede the
    operations consuming them. A tape is a context manager that makes itself
    the active tape for the current thread.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._prev = None

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        self.nodes.append(_Node(out, tuple(inputs), backward))

    def nbytes(self) -> int:
        """Bytes held by recorded intermediate outputs (live activation estimate)."""
        return sum(n.out.data.nbytes for n in self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev
        self._prev = None


def active_tape() -> Tape | None:
    return getattr(_local, "tape", None)


def apply_op(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as an op output and record ``backward`` if needed.

    ``backward(grad_out)`` returns one gradient array (or None) per input.
    """
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


class ParamStore:
    """Named parameters; iteration is always in lexicographic name order."""

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self._t: dict[str, Tensor] = {}
        for k, v in (tensors or {}).items():
            self[k] = v

    def __setitem__(self, name: str, value: Tensor) -> None:
        if not isinstance(value, Tensor):
            value = Tensor(value)
        value.requires_grad = True
        self._t[name] = value

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __len__(self) -> int:
        return len(self._t)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._t))

    def names(self) -> list[str]:
        return sorted(self._t)

    def items(self):
        return [(k, self._t[k]) for k in self.names()]

    def numel(self) -> int:
        return sum(t.data.size for t in self._t.values())

    def nbytes(self) -> int:
        return sum(t.data.nbytes for t in self._t.values())

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.items()}

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({k: Tensor(t.data.astype(dtype)) for k, t in self.items()})

    def copy(self) -> "ParamStore":
        return ParamStore({k: Tensor(t.data.copy()) for k, t in self.items()})


def backward(tape: Tape, loss: Tensor, params: ParamStore | None = None):
    """Reverse-mode sweep over ``tape`` seeded with d(loss)/d(loss) = 1.

    Gradients are accumulated into ``.grad`` of every leaf tensor that
    requires one. Returns ``params.grads()`` when a store is given.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    leaves: dict[int, Tensor] = {}
    for node in tape.nodes:
        produced.add(id(node.out))
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key not in produced:
                leaves[key] = t
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    if id(loss) not in produced and loss.requires_grad:
        leaves[id(loss)] = loss
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g
    return params.grads() if params is not None else None


# --- elementwise -----------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _is_row_bias(a: Tensor, b: Tensor) -> bool:
    return b.ndim == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[0]


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a row vector added to every row of ``a``."""
    if a.shape == b.shape:
        return apply_op(a.data + b.data, (a, b), lambda g: (g, g))
    if _is_row_bias(a, b):
        lead = tuple(range(a.ndim - 1))
        return apply_op(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=lead)))
    raise DimensionError(f"add: shapes {a.shape} and {b.shape} are incompatible")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return apply_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return apply_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return apply_op(a.data * a.dtype.type(s), (a,), lambda g: (g * g.dtype.type(s),))


def neg(a: Tensor) -> Tensor:
    return apply_op(-a.data, (a,), lambda g: (-g,))


# --- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., k] @ b[k, n]``; leading axes of ``a`` are treated as extra rows."""
    if b.ndim != 2 or a.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    k, n = bd.shape

    def back(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return apply_op(ad @ bd, (a, b), back)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product over identical leading axes: ``a[..., m, k] @ b[..., k, n]``."""
    if (a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]
            or a.shape[-1] != b.shape[-2]):
        raise DimensionError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return apply_op(ad @ bd, (a, b),
                    lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        if a.ndim != 2:
            raise DimensionError(f"transpose without axes needs a matrix, got {a.shape}")
        axes = (1, 0)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(axes))
    return apply_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from e
    old = a.shape
    return apply_op(out, (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: no tensors")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise DimensionError(
                f"concat: shapes {tensors[0].shape} and {t.shape} disagree off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return apply_op(out, tensors, lambda g: tuple(np.split(g, bounds, axis=ax)))


def slice_(a: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing with a scatter-back gradient."""
    parts = index if isinstance(index, tuple) else (index,)
    if not all(isinstance(p, (int, slice)) or p is Ellipsis for p in parts):
        raise DimensionError("slice: only basic slicing is supported")
    out = a.data[index]
    shape, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return apply_op(np.array(out, copy=True), (a,), back)


def mean(a: Tensor, axis: int) -> Tensor:
    ax = axis % a.ndim
    n = a.shape[ax]
    shape = a.shape

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, ax) / n, shape).copy(),)

    return apply_op(a.data.mean(axis=ax), (a,), back)


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        return apply_op(np.asarray(a.data.sum()), (a,),
                        lambda g: (np.full(shape, g, dtype=a.dtype),))
    ax = axis % a.ndim
    return apply_op(a.data.sum(axis=ax), (a,),
                    lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


# --- nonlinearities --------------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    xd = x.data
    if np.isnan(xd).any():
        raise NumericError("softmax_rows: NaN in input")
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return apply_op(y, (x,), back)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def back(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (cdf + xd * pdf),)

    return apply_op((xd * cdf).astype(xd.dtype, copy=False), (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: x {x.shape} vs gamma {gamma.shape} beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    gd = gamma.data
    lead = tuple(range(x.ndim - 1))

    def back(g):
        gxhat = g * gd
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return apply_op(xhat * gd + beta.data, (x, gamma, beta), back)


# --- verification ----------------------------------------------------------

def finite_diff_check(f: Callable[[ParamStore], Tensor], params: ParamStore,
                      step: float = 1e-5, tol: float = 1e-4, floor: float = 1e-6,
                      names: Sequence[str] | None = None) -> dict:
    """Compare tape gradients of scalar ``f`` with central differences.

    Relative error per coordinate is ``|tape - fd| / max(|tape|, |fd|, floor)``;
    ``floor`` keeps exactly-zero gradients from dividing by zero.
    """
    params.zero_grad()
    with Tape() as tape:
        loss = f(params)
    if not np.isfinite(loss.data).all():
        raise NumericError("finite_diff_check: objective is not finite")
    backward(tape, loss)
    tape_grads = params.grads()

    def value() -> float:
        v = f(params).data
        if not np.isfinite(v).all():
            raise NumericError("finite_diff_check: objective is not finite")
        return float(v.reshape(-1)[0])

    per_param: dict[str, float] = {}
    worst, grad_sq = 0.0, 0.0
    for name in names if names is not None else params.names():
        theta = params[name].data
        flat = theta.reshape(-1)
        g_tape = tape_grads[name].reshape(-1)
        fd = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = value()
            flat[i] = orig - step
            fm = value()
            flat[i] = orig
            fd[i] = (fp - fm) / (2.0 * step)
        denom = np.maximum(np.maximum(np.abs(g_tape), np.abs(fd)), floor)
        err = float(np.max(np.abs(g_tape - fd) / denom))
        per_param[name] = err
        worst = max(worst, err)
        grad_sq += float(np.sum(g_tape.astype(np.float64) ** 2))
    return {"max_rel_error": worst, "passed": worst < tol, "per_param": per_param,
            "grad_norm": math.sqrt(grad_sq)}
