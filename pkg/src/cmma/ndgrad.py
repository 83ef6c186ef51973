"""Minimal define-by-run reverse-mode autodiff over dense float64 arrays.

Primitives are plain functions (``matmul``, ``softplus``, ...) that compute a
numpy result and, while a :class:`Tape` is active, append a record holding
the inputs and a closure mapping the output gradient to input gradients.
Records are appended in execution order, so the tape is topologically sorted
by construction and :meth:`Tape.backward` simply walks it in reverse.

Outside a tape nothing is recorded, which is what evaluation code wants::

    with Tape() as tape:
        loss = sum(square(x @ w))
    tape.backward(loss)      # w.grad now holds d loss / d w
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError

_DEBUG = False
_ACTIVE: list["Tape"] = []


def set_debug(enabled: bool) -> None:
    """Toggle the finite-value check applied to every primitive output."""
    global _DEBUG
    _DEBUG = bool(enabled)


class Tensor:
    """A dense row-major float64 array that may participate in a tape."""

    __slots__ = ("data", "_tracked", "__weakref__")

    def __init__(self, data, _tracked: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self._tracked = _tracked

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={self.data!r})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named trainable leaf. ``grad`` accumulates across backward calls."""

    __slots__ = ("name", "grad")

    def __init__(self, name: str, data):
        super().__init__(data, _tracked=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of primitive applications recorded while the tape is active."""

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE.pop()
        assert popped is self, "tapes must be closed in LIFO order"

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, output: Tensor) -> None:
        """Accumulate d output / d p into ``p.grad`` for every Parameter leaf."""
        if output.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        leaves: dict[int, Parameter] = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp._tracked:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if isinstance(inp, Parameter):
                    leaves[key] = inp
        for key, p in leaves.items():
            p.grad += grads[key]


def _check(name: str, out: np.ndarray) -> None:
    if _DEBUG and not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{name} produced a non-finite value")


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, backward) -> Tensor:
    _check(op, out)
    tracked = bool(_ACTIVE) and any(t._tracked for t in inputs)
    result = Tensor(out, _tracked=tracked)
    if tracked:
        _ACTIVE[-1].records.append(Record(op, inputs, result, backward))
    return result


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- primitives ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim not in (1, 2) or b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def back(g):
        if A.ndim == 1:
            return g @ B.T, np.outer(A, g)
        return g @ B.T, A.T @ g

    return _emit("matmul", (a, b), A @ B, back)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Broadcast a length-d bias over the rows of an (n, d) or (d,) tensor."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: cannot broadcast {b.shape} over {x.shape}")
    nd = x.data.ndim

    def back(g):
        return g, (g.sum(axis=0) if nd == 2 else g)

    return _emit("add_bias", (x, b), x.data + b.data, back)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _emit("mul", (a, b), A * B, lambda g: (g * B, g * A))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit("exp", (x,), out, lambda g: (g * out,))


def square(x: Tensor) -> Tensor:
    X = x.data
    return _emit("square", (x,), X * X, lambda g: (2.0 * X * g,))


def softplus(x: Tensor) -> Tensor:
    X = x.data
    out = np.logaddexp(0.0, X)

    def back(g):
        # sigmoid written to avoid overflow for large |x|
        return (g * np.exp(X - out),)

    return _emit("softplus", (x,), out, back)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _emit("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    X = x.data
    if axis is None:
        out = np.asarray(X.sum())
        return _emit("sum", (x,), out, lambda g: (np.broadcast_to(g, X.shape).copy(),))
    if not -X.ndim <= axis < X.ndim:
        raise ShapeError(f"sum: axis {axis} out of range for shape {X.shape}")
    out = X.sum(axis=axis)
    if out.ndim == 0:
        out = np.asarray(out)

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axis), X.shape).copy(),)

    return _emit("sum", (x,), out, back)


def mean(x: Tensor) -> Tensor:
    return scale(sum(x), 1.0 / x.size)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (x,), x.data * c, lambda g: (g * c,))


def shift(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("shift", (x,), x.data + c, lambda g: (g,))


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last (feature) axis."""
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat: nothing to concatenate")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise ShapeError(f"concat: leading shapes differ {[q.shape for q in parts]}")
    widths = [p.shape[-1] for p in parts]
    cuts = np.cumsum(widths)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=-1))

    return _emit("concat", parts, np.concatenate([p.data for p in parts], axis=-1), back)


def slice_features(x: Tensor, start: int, stop: int) -> Tensor:
    d = x.shape[-1]
    if not 0 <= start < stop <= d:
        raise ShapeError(f"slice: [{start}:{stop}] invalid for feature width {d}")
    X = x.data

    def back(g):
        full = np.zeros_like(X)
        full[..., start:stop] = g
        return (full,)

    return _emit("slice", (x,), X[..., start:stop].copy(), back)


# -- gradient utilities --------------------------------------------------------


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def grad_of(loss_fn: Callable[[], Tensor], params: Sequence[Parameter]) -> list[np.ndarray]:
    """Run ``loss_fn`` on a fresh tape and return fresh gradient copies."""
    zero_grad(params)
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return [p.grad.copy() for p in params]


def finite_difference_gradient(
    loss_fn: Callable[[], Tensor | float],
    params: Sequence[Parameter],
    eps: float = 1e-5,
) -> list[np.ndarray]:
    """Central differences, one coordinate at a time.

    ``loss_fn`` must be deterministic; parameter values are restored exactly.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    def value() -> float:
        out = loss_fn()
        return out.item() if isinstance(out, Tensor) else float(out)

    grads = []
    for p in params:
        flat = p.data.reshape(-1)
        g = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = value()
            flat[i] = orig - eps
            minus = value()
            flat[i] = orig
            g[i] = (plus - minus) / (2.0 * eps)
        grads.append(g.reshape(p.shape))
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, scale_floor: float = 1e-6) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor).

    Central differences carry roundoff of order |loss| * 1e-16 / eps, so
    entries far below the block's largest gradient cannot be resolved
    relatively.  ``floor`` is ``scale_floor`` times the largest magnitude in
    the block (at least 1e-8), which compares such entries absolutely.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    floor = max(1e-8, scale_floor * max(np.abs(a).max(), np.abs(n).max()))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
