"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations on tensors that require gradients are recorded on the innermost
active :class:`Tape`. Outside a tape nothing is recorded, which is how
inference runs::

    with Tape() as tape:
        loss = mse(x @ w, y)
    tape.backward(loss)     # fills w.grad
"""

from __future__ import annotations

import contextvars
from collections.abc import Callable, Sequence
from typing import Any

import numpy as np

from .errors import AllMaskedRow, DoubleBackward, NonFinite, ShapeMismatch

NEG_INF_SURROGATE = np.finfo(np.float64).min

_active_tape: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("pace_tape", default=None)

Pullback = Callable[[np.ndarray], Sequence[np.ndarray | None]]


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFinite(f"{op} produced a non-finite value")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data: Any, requires_grad: bool = False) -> None:
        arr = np.array(data, dtype=np.float64, copy=True)
        _check_finite(arr, "Tensor()")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> Tensor:
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other: Tensor | float) -> Tensor:
        return add(self, other)

    def __radd__(self, other: float) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor | float) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor | float) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: float) -> Tensor:
        return mul(self, other)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, idx: Any) -> Tensor:
        return index(self, idx)

    @property
    def T(self) -> Tensor:
        return transpose(self)


class Tape:
    """Ordered record of differentiable operations; consumed by one backward pass."""

    def __init__(self) -> None:
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Pullback]] = []
        self.consumed = False
        self._token: contextvars.Token | None = None

    def __enter__(self) -> Tape:
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc: object) -> None:
        assert self._token is not None
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, root: Tensor) -> None:
        if self.consumed:
            raise DoubleBackward("tape already consumed by a backward pass")
        if root.data.size != 1:
            raise ShapeMismatch(f"backward root must be scalar, got shape {root.shape}")
        self.consumed = True
        produced = {id(out) for out, _, _ in self.records}
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, pullback in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, pullback(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads[key]
            _check_finite(g, "backward")
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        if id(root) not in produced and root.requires_grad:
            root.grad = np.ones_like(root.data) if root.grad is None else root.grad + 1.0
        self.records.clear()


def backward(root: Tensor, tape: Tape | None = None) -> None:
    tape = tape or _active_tape.get()
    if tape is None:
        raise DoubleBackward("no tape available for backward")
    tape.backward(root)


def _as_tensor(x: Tensor | float | np.ndarray) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], pullback: Pullback) -> Tensor:
    _check_finite(out, op)
    tape = _active_tape.get()
    track = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, track)
    if track:
        assert tape is not None
        tape.records.append((result, inputs, pullback))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, ext in enumerate(shape):
        if ext == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or b.data.size == 1 or a.data.size == 1:
        return
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return
    raise ShapeMismatch(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor | float, b: Tensor | float) -> Tensor:
    """Elementwise sum; ``b`` may be a scalar or a row-wise bias vector."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < b.ndim:
        a, b = b, a
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor | float, b: Tensor | float) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(*((a, b) if a.ndim >= b.ndim else (b, a)), "sub")
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor | float, b: Tensor | float) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(*((a, b) if a.ndim >= b.ndim else (b, a)), "mul")
    ad, bd = a.data, b.data
    return _emit(
        "mul",
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(x: Tensor, c: float | Tensor) -> Tensor:
    """Multiply by a scalar constant or a scalar (shape ``()`` or ``(1,)``) tensor."""
    if isinstance(c, Tensor):
        if c.data.size != 1:
            raise ShapeMismatch(f"scale factor must be scalar, got {c.shape}")
        xd, cd = x.data, c.data
        return _emit(
            "scale",
            xd * cd.reshape(()),
            (x, c),
            lambda g: (g * cd.reshape(()), np.array(np.sum(g * xd)).reshape(cd.shape)),
        )
    c = float(c)
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``(..., n, k) @ (k, m)`` or batched ``(..., n, k) @ (..., k, m)``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def pullback(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = np.tensordot(ad.reshape(-1, ad.shape[-1]), g.reshape(-1, g.shape[-1]), axes=(0, 0))
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), pullback)


def transpose(x: Tensor) -> Tensor:
    return _emit("transpose", np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return _emit("reshape", out, (x,), lambda g: (g.reshape(old),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeMismatch("concat of nothing")
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _emit("concat", out, tuple(xs), lambda g: tuple(np.split(g, sizes, axis=axis)))


def concat_rows(xs: Sequence[Tensor]) -> Tensor:
    return concat(xs, axis=0)


def index(x: Tensor, idx: Any) -> Tensor:
    """Basic or advanced indexing; the pullback scatters with accumulation."""
    shape = x.shape

    def pullback(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("index", np.array(x.data[idx]), (x,), pullback)


def row_select(x: Tensor, rows: Sequence[int] | np.ndarray) -> Tensor:
    return index(x, np.asarray(rows, dtype=np.int64))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("relu", np.maximum(xd, 0.0), (x,), lambda g: (g * (xd > 0),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def tensor_sum(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    shape = x.shape

    def pullback(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.array(x.data.sum(axis=axis)), (x,), pullback)


def mean(x: Tensor) -> Tensor:
    return scale(tensor_sum(x), 1.0 / max(x.data.size, 1))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def feed_forward(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """One-layer perceptron ``relu(x w + b)``."""
    return relu(linear(x, w, b))


def masked_softmax(scores: Tensor, allowed: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis restricted to ``allowed`` entries.

    Disallowed entries get the most-negative finite float before the row-max
    shift and are exactly zero in the output.
    """
    sd = scores.data
    if allowed is None:
        allowed = np.ones(sd.shape, dtype=bool)
    else:
        allowed = np.broadcast_to(np.asarray(allowed, dtype=bool), sd.shape)
    if not allowed.any(axis=-1).all():
        raise AllMaskedRow("a softmax row has no unmasked entry")
    z = np.where(allowed, sd, NEG_INF_SURROGATE)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(allowed, np.exp(z), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def pullback(g: np.ndarray) -> tuple[np.ndarray]:
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _emit("masked_softmax", out, (scores,), pullback)


def softmax(scores: Tensor) -> Tensor:
    return masked_softmax(scores, None)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, classes: Sequence[int] | np.ndarray, reduction: str = "mean") -> Tensor:
    """Cross-entropy of ``(m, c)`` logits against ``m`` integer classes."""
    if logits.ndim == 1:
        return cross_entropy(reshape(logits, (1, -1)), np.atleast_1d(classes), reduction)
    cls = np.asarray(classes, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != cls.shape[0]:
        raise ShapeMismatch(f"cross_entropy: logits {logits.shape} vs {cls.shape[0]} classes")
    logp = _log_softmax(logits.data)
    rows = np.arange(cls.shape[0])
    losses = -logp[rows, cls]
    denom = cls.shape[0] if reduction == "mean" else 1

    def pullback(g: np.ndarray) -> tuple[np.ndarray]:
        d = np.exp(logp)
        d[rows, cls] -= 1.0
        return (d * (float(g) / denom),)

    return _emit("cross_entropy", np.array(losses.sum() / denom), (logits,), pullback)


def binary_cross_entropy(logits: Tensor, bits: Sequence[float] | np.ndarray, reduction: str = "mean") -> Tensor:
    """Numerically stable BCE on raw logits."""
    y = np.asarray(bits, dtype=np.float64).reshape(logits.shape)
    z = logits.data
    losses = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    denom = max(y.size, 1) if reduction == "mean" else 1
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    return _emit(
        "binary_cross_entropy",
        np.array(losses.sum() / denom),
        (logits,),
        lambda g: ((sig - y) * (float(g) / denom),),
    )


def mse(pred: Tensor, target: Sequence[float] | np.ndarray | Tensor) -> Tensor:
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    t = t.reshape(pred.shape)
    diff = pred.data - t
    m = max(diff.size, 1)
    return _emit("mse", np.array((diff**2).sum() / m), (pred,), lambda g: (2.0 * diff * (float(g) / m),))


def gaussian_kl(mean_: Tensor, logvar: Tensor) -> Tensor:
    """KL of ``N(mean, exp(logvar))`` from the standard normal, summed over entries."""
    if mean_.shape != logvar.shape:
        raise ShapeMismatch(f"gaussian_kl: {mean_.shape} vs {logvar.shape}")
    mu, lv = mean_.data, logvar.data
    with np.errstate(over="ignore"):
        ev = np.exp(lv)
    out = np.array(0.5 * (ev + mu**2 - 1.0 - lv).sum())
    return _emit("gaussian_kl", out, (mean_, logvar), lambda g: (float(g) * mu, float(g) * 0.5 * (ev - 1.0)))


def parameter(data: Any) -> Tensor:
    return Tensor(data, requires_grad=True)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply a row-wise gain and bias."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(xd.var(axis=-1, keepdims=True) + eps)
    xhat = (xd - mu) * inv
    gd = gain.data
    width = xd.shape[-1]

    def pullback(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        dxhat = g * gd
        dx = inv / width * (
            width * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", xhat * gd + bias.data, (x, gain, bias), pullback)
