"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Operations record onto the active :class:`Tape` (entered with ``with Tape():``)
whenever at least one input requires a gradient. Outside a tape every op is a
plain forward computation, which is what evaluation paths use.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

BCE_EPS = 1e-7

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "active_tape", default=None
)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """An input violates an operation's precondition."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered list of primitive applications, replayed in reverse by :func:`backward`."""

    records: list[Record] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def first_nonfinite(self) -> Record | None:
        for rec in self.records:
            if not np.all(np.isfinite(rec.output.data)):
                return rec
        return None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        out.node_id = len(tape.records)
        tape.records.append(Record(op, inputs, out, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        "add", (a, b), a.data + b.data,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        "sub", (a, b), a.data - b.data,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(
        "mul", (a, b), ad * bd,
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)
    return _record("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., k] @ b[k, n]``; leading axes of ``a`` are treated as batch."""
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        da = g @ bd.T
        db = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, bd.shape[1])
        return da, db

    return _record("matmul", (a, b), ad @ bd, backward)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def take_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``a[..., start:stop]``."""
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _record("slice", (a,), a.data[..., start:stop].copy(), backward)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    tensors = tuple(as_tensor(t) for t in tensors)
    lead = {t.shape[:-1] for t in tensors}
    if len(lead) != 1:
        raise ShapeError(f"concat: leading shapes differ {sorted(lead)}")
    bounds = np.cumsum([0] + [t.shape[-1] for t in tensors])

    def backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _record("concat", tensors, np.concatenate([t.data for t in tensors], axis=-1), backward)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        n = a.data.size
        return _record("mean", (a,), np.asarray(a.data.mean()),
                       lambda g: (np.broadcast_to(g / n, shape).copy(),))
    n = shape[axis]
    return _record(
        "mean", (a,), a.data.mean(axis=axis),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),),
    )


def total(a: Tensor) -> Tensor:
    shape = a.shape
    return _record("sum", (a,), np.asarray(a.data.sum()),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Batch-mean cross-entropy of ``softmax(logits)`` against one-hot rows."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != logits.shape or logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs target {t.shape}")
    if not (np.all((t == 0) | (t == 1)) and np.all(t.sum(axis=1) == 1)):
        raise ContractError("softmax_cross_entropy: target rows must be one-hot")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    n = z.shape[0]
    loss = -(t * logp).sum() / n
    probs = np.exp(logp)
    return _record("softmax_cross_entropy", (logits,), np.asarray(loss),
                   lambda g: (g * (probs - t) / n,))


def binary_cross_entropy(p: Tensor, target) -> Tensor:
    """Mean BCE over all elements; ``p`` is clamped to ``[eps, 1 - eps]``."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != p.shape:
        raise ShapeError(f"binary_cross_entropy: p {p.shape} vs target {t.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ContractError("binary_cross_entropy: targets must be 0 or 1")
    raw = p.data
    q = np.clip(raw, BCE_EPS, 1.0 - BCE_EPS)
    inside = (raw > BCE_EPS) & (raw < 1.0 - BCE_EPS)
    n = q.size
    per = -(t * np.log(q) + (1.0 - t) * np.log(1.0 - q))
    # shifted mean: exact when every term is equal (e.g. a chance-level discriminator)
    ref = per.reshape(-1)[0]
    loss = ref + (per - ref).sum() / n

    def backward(g):
        dq = (-t / q + (1.0 - t) / (1.0 - q)) / n
        return (g * dq * inside,)

    return _record("binary_cross_entropy", (p,), np.asarray(loss), backward)


def scalar_min_const(a: Tensor, tau: float) -> Tensor:
    """``min(a, tau)``; gradient flows only when ``a < tau`` strictly."""
    if a.size != 1:
        raise ShapeError("scalar_min_const expects a scalar")
    if not np.isfinite(tau) or tau <= 0:
        raise ContractError(f"tau must be finite and positive, got {tau}")
    passes = bool(a.data.reshape(-1)[0] < tau)
    out = a.data if passes else np.full(a.shape, float(tau))
    return _record("scalar_min_const", (a,), np.array(out),
                   lambda g: (g if passes else np.zeros_like(g),))


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        return
    tape = loss.tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records[: loss.node_id + 1]):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if inp.tape is None:
                # leaf parameter
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            elif key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max over coordinates of ``|central difference - autodiff| / max(1, |autodiff|)``.

    ``f`` must rebuild its scalar output from the current ``params`` values on
    every call.
    """
    if h <= 0:
        raise ContractError("finite difference step must be positive")
    for p in params:
        p.zero_grad()
    with Tape():
        out = f()
    backward(out)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(numeric - a) / max(1.0, abs(a)))
    return worst
