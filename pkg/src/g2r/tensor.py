"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the model needs are provided. An operation is recorded on
the innermost active :class:`Tape` when at least one input requires a
gradient; otherwise it runs as plain numpy.

Min/max adjoints route the full gradient to the first argument (elementwise
ops) or the lowest row index (segment ops) at exact ties. Ties and ReLU kinks
hit during a recorded forward pass set ``Tape.nonsmooth``.
"""

from __future__ import annotations

import itertools
import threading
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TensorError",
    "tensor",
    "parameter",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "linear",
    "relu",
    "softplus",
    "exp_neg",
    "ewise_min",
    "ewise_max",
    "segment_sum",
    "segment_min",
    "segment_max",
    "gather_rows",
    "reshape",
    "concat_rows",
    "prod_reduce",
    "mean_rows",
    "sum_all",
    "mean_all",
    "GradCheckReport",
    "grad_check",
]

_ids = itertools.count()
_local = threading.local()


class TensorError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "id")

    def __init__(self, data, requires_grad: bool = False, _checked: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not _checked and not np.all(np.isfinite(arr)):
            raise TensorError("tensor values must be finite")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def assign(self, value) -> None:
        """Replace the value of a parameter between recorded passes (optimiser use)."""
        arr = np.array(value, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise TensorError(f"assign: shape {arr.shape} != {self.data.shape}")
        if not np.all(np.isfinite(arr)):
            raise TensorError("tensor values must be finite")
        arr.setflags(write=False)
        self.data = arr

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(data) -> Tensor:
    return Tensor(data)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    out_id: int
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Ordered log of recorded operations; use as a context manager."""

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self.nonsmooth = False

    def __enter__(self) -> Tape:
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def gradient(self, y: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """d(sum of y)/d(each tensor in wrt), by one reverse sweep."""
        grads: dict[int, np.ndarray] = {y.id: np.ones_like(y.data)}
        for rec in reversed(self.records):
            g = grads.pop(rec.out_id, None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.id in grads:
                    grads[inp.id] = grads[inp.id] + gi
                else:
                    grads[inp.id] = gi
        return [grads.get(t.id, np.zeros_like(t.data)) for t in wrt]


def _tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _emit(value: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise TensorError("operation produced non-finite values")
    tape = _tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=track, _checked=True)
    if track:
        tape.records.append(_Record(out.id, inputs, backward))
    return out


def _flag_nonsmooth() -> None:
    tape = _tape()
    if tape is not None:
        tape.nonsmooth = True


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise TensorError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --- elementwise ------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    return _emit(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "div")
    if np.any(np.abs(b.data) < 1e-300):
        raise TensorError("div: denominator magnitude below 1e-300")
    q = a.data / b.data
    return _emit(q, (a, b), lambda g: (g / b.data, -g * q / b.data))


def scale(x: Tensor, s) -> Tensor:
    """Multiply every entry by a scalar (a float or a 0-d tensor)."""
    x = _as_tensor(x)
    if isinstance(s, Tensor):
        if s.shape != ():
            raise TensorError(f"scale: factor must be 0-d, got shape {s.shape}")
        sv = s.data
        return _emit(x.data * sv, (x, s), lambda g: (g * sv, np.sum(g * x.data)))
    s = float(s)
    return _emit(x.data * s, (x,), lambda g: (g * s,))


def relu(x: Tensor) -> Tensor:
    if _tape() is not None and x.requires_grad and np.any(x.data == 0.0):
        _flag_nonsmooth()
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def softplus(x: Tensor) -> Tensor:
    value = np.logaddexp(0.0, x.data)
    return _emit(value, (x,), lambda g: (g * _sigmoid(x.data),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def exp_neg(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        value = np.exp(-x.data)
    return _emit(value, (x,), lambda g: (-g * value,))


def ewise_min(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "ewise_min")
    first = a.data <= b.data
    if _tape() is not None and (a.requires_grad or b.requires_grad) and np.any(a.data == b.data):
        _flag_nonsmooth()
    return _emit(np.where(first, a.data, b.data), (a, b), lambda g: (g * first, g * ~first))


def ewise_max(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "ewise_max")
    first = a.data >= b.data
    if _tape() is not None and (a.requires_grad or b.requires_grad) and np.any(a.data == b.data):
        _flag_nonsmooth()
    return _emit(np.where(first, a.data, b.data), (a, b), lambda g: (g * first, g * ~first))


# --- linear algebra -----------------------------------------------------------


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` with ``b`` broadcast over rows."""
    if x.data.ndim != 2 or W.data.ndim != 2 or b.data.ndim != 1:
        raise TensorError(f"linear: expected 2-d x, 2-d W, 1-d b; got {x.shape}, {W.shape}, {b.shape}")
    if x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise TensorError(f"linear: shapes {x.shape} @ {W.shape} + {b.shape} do not conform")
    value = x.data @ W.data + b.data

    def backward(g):
        return g @ W.data.T, x.data.T @ g, g.sum(axis=0)

    return _emit(value, (x, W, b), backward)


# --- segment reductions -----------------------------------------------------


def _check_segments(seg, n: int, k: int, op: str) -> np.ndarray:
    seg = np.asarray(seg, dtype=np.int64)
    if seg.shape != (n,):
        raise TensorError(f"{op}: need {n} segment ids, got shape {seg.shape}")
    if n and (seg.min() < 0 or seg.max() >= k):
        raise TensorError(f"{op}: segment id out of range [0, {k})")
    return seg


def _grouped(seg: np.ndarray, k: int):
    """Stable order by segment, segment start offsets and nonempty flags."""
    order = np.argsort(seg, kind="stable")
    counts = np.bincount(seg, minlength=k)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    return order, starts, counts


def segment_sum(x: Tensor, seg, k: int) -> Tensor:
    """Row ``i`` of the result sums the rows of ``x`` whose segment id is ``i``.

    Rows are accumulated in ascending original index within each segment.
    """
    if x.data.ndim != 2:
        raise TensorError(f"segment_sum: expected 2-d input, got {x.shape}")
    seg = _check_segments(seg, x.shape[0], k, "segment_sum")
    order, starts, counts = _grouped(seg, k)
    out = np.zeros((k, x.shape[1]))
    nonempty = counts > 0
    if x.shape[0]:
        out[nonempty] = np.add.reduceat(x.data[order], starts[nonempty], axis=0)
    return _emit(out, (x,), lambda g: (g[seg],))


def _segment_extreme(x: Tensor, seg, k: int, ufunc, op: str) -> Tensor:
    if x.data.ndim != 2:
        raise TensorError(f"{op}: expected 2-d input, got {x.shape}")
    seg = _check_segments(seg, x.shape[0], k, op)
    order, starts, counts = _grouped(seg, k)
    if np.any(counts == 0):
        raise TensorError(f"{op}: empty segment")
    xs = x.data[order]
    out = ufunc.reduceat(xs, starts, axis=0)
    hit = xs == out[seg[order]]
    # position (in sorted order) of the first row attaining the extreme
    n = xs.shape[0]
    positions = np.where(hit, np.arange(n)[:, None], n)
    first = np.minimum.reduceat(positions, starts, axis=0)
    winner = order[first]
    ties = np.add.reduceat(hit.astype(np.int64), starts, axis=0)
    if _tape() is not None and x.requires_grad and np.any(ties > 1):
        _flag_nonsmooth()

    def backward(g):
        gx = np.zeros_like(x.data)
        cols = np.broadcast_to(np.arange(x.shape[1]), winner.shape)
        gx[winner, cols] = g
        return (gx,)

    return _emit(out, (x,), backward)


def segment_min(x: Tensor, seg, k: int) -> Tensor:
    return _segment_extreme(x, seg, k, np.minimum, "segment_min")


def segment_max(x: Tensor, seg, k: int) -> Tensor:
    return _segment_extreme(x, seg, k, np.maximum, "segment_max")


# --- shape manipulation -----------------------------------------------------


def gather_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise TensorError(f"gather_rows: index out of range [0, {n})")

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit(x.data[idx], (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        value = x.data.reshape(shape)
    except ValueError as exc:
        raise TensorError(f"reshape: {exc}") from None
    return _emit(value, (x,), lambda g: (g.reshape(x.shape),))


def concat_rows(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the first axis, in argument order."""
    xs = [_as_tensor(t) for t in xs]
    if not xs:
        raise TensorError("concat_rows: nothing to concatenate")
    if len({t.data.shape[1:] for t in xs}) != 1:
        raise TensorError("concat_rows: trailing shapes differ")
    sizes = [t.shape[0] for t in xs]
    bounds = np.cumsum(sizes)[:-1]
    return _emit(np.concatenate([t.data for t in xs], axis=0), tuple(xs), lambda g: tuple(np.split(g, bounds)))


def prod_reduce(x: Tensor) -> Tensor:
    """Product over the last axis; 1-d input gives a 0-d result.

    The adjoint of each entry is the product of the others, built from prefix
    and suffix products so zeros need no special case.
    """
    d = x.shape[-1]
    ones = np.ones(x.shape[:-1] + (1,))
    prefix = np.concatenate([ones, np.cumprod(x.data, axis=-1)[..., :-1]], axis=-1)
    suffix = np.concatenate([np.cumprod(x.data[..., ::-1], axis=-1)[..., :-1][..., ::-1], ones], axis=-1)
    value = np.prod(x.data, axis=-1) if d else ones[..., 0]
    return _emit(value, (x,), lambda g: (np.asarray(g)[..., None] * prefix * suffix,))


def mean_rows(x: Tensor) -> Tensor:
    """Mean over the second-to-last axis: ``[k, d] -> [d]``, ``[b, k, d] -> [b, d]``."""
    if x.data.ndim < 2 or x.shape[-2] < 1:
        raise TensorError(f"mean_rows: need at least one row, got shape {x.shape}")
    k = x.shape[-2]
    value = x.data.mean(axis=-2)
    return _emit(value, (x,), lambda g: (np.repeat(np.expand_dims(g, -2), k, axis=-2) / k,))


def sum_all(x: Tensor) -> Tensor:
    return _emit(np.sum(x.data), (x,), lambda g: (np.full(x.shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    if n == 0:
        raise TensorError("mean_all: empty tensor")
    return _emit(np.mean(x.data), (x,), lambda g: (np.full(x.shape, float(g) / n),))


# --- verification -----------------------------------------------------------


_EPS = float(np.finfo(np.float64).eps)


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    skipped: bool = False
    reason: str = ""

    def __str__(self) -> str:
        if self.skipped:
            return f"skipped ({self.reason})"
        return f"{'pass' if self.passed else 'FAIL'} max_rel_error={self.max_rel_error:.3e}"


def grad_check(
    f: Callable[..., Tensor],
    x0,
    h: float = 1e-6,
    tol: float = 1e-4,
    floor: float = 1e-6,
    roundoff: float = 4.0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` with central differences.

    ``x0`` is an array or a sequence of arrays (one per argument of ``f``).
    The relative error of each coordinate is
    ``|auto - numeric| / max(|auto|, |numeric|, floor, noise / tol)`` where
    ``noise = roundoff * eps * max|f| / h`` bounds the rounding error of the
    central difference itself. The floor keeps gradients that are zero or
    below what the difference can resolve from failing on round-off alone.
    """
    single = isinstance(x0, (np.ndarray, float, int, Tensor))
    xs = [np.array(x0.data if isinstance(x0, Tensor) else x0, dtype=np.float64)] if single else [
        np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in x0
    ]
    params = [parameter(x) for x in xs]
    with Tape() as tape:
        y = f(*params)
    if y.shape != ():
        raise TensorError(f"grad_check: f must return a scalar, got shape {y.shape}")
    if tape.nonsmooth:
        return GradCheckReport(float("nan"), False, skipped=True, reason="nonsmooth")
    auto = tape.gradient(y, params)

    worst = 0.0
    for i, x in enumerate(xs):
        flat = x.reshape(-1)
        for j in range(flat.size):
            vals = []
            for sign in (1.0, -1.0):
                pert = [p.copy() for p in xs]
                pert[i].reshape(-1)[j] += sign * h
                vals.append(f(*[Tensor(p) for p in pert]).item())
            numeric = (vals[0] - vals[1]) / (2.0 * h)
            noise = roundoff * _EPS * max(abs(vals[0]), abs(vals[1]), abs(y.item())) / h
            a = float(auto[i].reshape(-1)[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor, noise / tol)
            worst = max(worst, err)
    return GradCheckReport(worst, worst <= tol)
