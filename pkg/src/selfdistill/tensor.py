"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays, float32 by default and float64 for verification
runs. While gradients are enabled, every operation records its parents
and a pullback on the output node; ``backward`` walks those records in
reverse topological order. A recorded graph can be consumed by backward
once; rerunning the forward pass is the reset.

Only leaf tensors created with ``requires_grad=True`` accumulate into
``.grad``; intermediate gradients live only for the duration of the
backward walk.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (teacher forwards, eval)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense n-dimensional value, optionally linked into the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_pullback", "_spent")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._pullback: Callable | None = None
        self._spent = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A view of the same data with no graph linkage."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar; scalars are allowed on either side
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; use mul with a reciprocal")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracks(t: Tensor) -> bool:
    return t.requires_grad or t._pullback is not None


def _record(out_data: np.ndarray, parents: Sequence[Tensor], pullback: Callable) -> Tensor:
    out = Tensor(out_data)
    if _grad_enabled and any(_tracks(p) for p in parents):
        out._parents = tuple(parents)
        out._pullback = pullback
        out.requires_grad = True
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape the operand was broadcast from."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order  # parents precede children


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``.

    The loss must be a scalar produced by recorded operations. Walking the
    same recorded graph twice is rejected; rebuild the graph (rerun the
    forward pass) to differentiate again.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._pullback is None:
        raise ContractError("loss is detached from the tape; no operations were recorded")
    order = _topo_order(loss)
    for node in order:
        if node._pullback is not None and node._spent:
            raise ContractError("backward already consumed this tape; rerun the forward pass")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        grad = grads.pop(id(node), None)
        if node._pullback is not None:
            node._spent = True
            if grad is None:
                continue
            for parent, pgrad in zip(node._parents, node._pullback(grad)):
                if pgrad is None or not _tracks(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pgrad
                else:
                    grads[key] = pgrad
        elif grad is not None and node.requires_grad:
            node.grad = grad.copy() if node.grad is None else node.grad + grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b) -> Tensor:
    """Pointwise product; ``b`` may be a scalar or an equal/broadcast shape."""
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(_as_tensor(a), float(b))
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (the 1/sqrt(d_k) style rescale)."""
    a = _as_tensor(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} x {b.shape}")

    def pullback(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(np.matmul(a.data, b.data), (a, b), pullback)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    a = _as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 dims, got {a.shape}")
    return _record(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of an empty sequence")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[p.shape for p in parts]} along axis {axis}"
        ) from None
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def pullback(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record(out, parts, pullback)


def slice_axis0(a: Tensor, start: int, stop: int | None) -> Tensor:
    """Rows ``start:stop`` along the first axis, with scatter on the way back."""
    a = _as_tensor(a)
    out = a.data[start:stop]

    def pullback(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _record(out, (a,), pullback)


def take_token(a: Tensor, index: int) -> Tensor:
    """Select one position along the token axis of a batch: (B,T,d) -> (B,d)."""
    a = _as_tensor(a)
    if a.ndim != 3:
        raise ShapeError(f"take_token expects a (B,T,d) tensor, got {a.shape}")
    out = a.data[:, index, :]

    def pullback(g):
        full = np.zeros_like(a.data)
        full[:, index, :] = g
        return (full,)

    return _record(out, (a,), pullback)


def tensor_sum(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _record(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def tensor_mean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.size
    return _record(
        np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),)
    )


# ---------------------------------------------------------------------------
# nonlinear blocks


def softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-wise softmax of ``x / temperature`` over the last axis.

    Stabilized by subtracting each row's maximum, so large logits are safe.
    Rows whose entries are all -inf have no finite maximum and are rejected.
    """
    x = _as_tensor(x)
    if not temperature > 0:
        raise DomainError(f"softmax temperature must be positive, got {temperature}")
    z = x.data / temperature
    m = z.max(axis=-1, keepdims=True)
    if not np.isfinite(m).all():
        raise DomainError("softmax row has no finite entries")
    e = np.exp(z - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def pullback(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((y * (g - dot)) / temperature,)

    return _record(y, (x,), pullback)


def log_softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Numerically stable log of ``softmax_rows``; exp of each row sums to 1."""
    x = _as_tensor(x)
    if not temperature > 0:
        raise DomainError(f"softmax temperature must be positive, got {temperature}")
    z = x.data / temperature
    m = z.max(axis=-1, keepdims=True)
    if not np.isfinite(m).all():
        raise DomainError("softmax row has no finite entries")
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def pullback(g):
        p = np.exp(out)
        return ((g - p * g.sum(axis=-1, keepdims=True)) / temperature,)

    return _record(out, (x,), pullback)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply per-feature gain and bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if not eps > 0:
        raise DomainError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def pullback(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        gh = g * gain.data
        gx = inv * (
            gh
            - gh.mean(axis=-1, keepdims=True)
            - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggain, gbias

    return _record(out, (x, gain, bias), pullback)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU via the tanh approximation."""
    x = _as_tensor(x)
    v = x.data
    sq = v * v
    t = np.tanh(_GELU_C * (v + 0.044715 * (v * sq)))
    out = 0.5 * v * (1.0 + t)

    def pullback(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * sq)
        dydx = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner
        return (g * dydx,)

    return _record(out, (x,), pullback)


# ---------------------------------------------------------------------------
# verification


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map a tensor to a scalar tensor. The analytic gradient is
    taken from a fresh backward pass; each coordinate is then perturbed by
    +/- h and the centered difference compared against it. The error is
    |analytic - numeric| / max(|analytic|, 1e-8), maximized over coordinates.
    """
    if not h > 0:
        raise DomainError(f"finite_diff_check step must be positive, got {h}")
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    backward(out)
    analytic = probe.grad
    if analytic is None:
        analytic = np.zeros_like(probe.data)

    flat = probe.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(probe).item()
            flat[i] = orig - h
            down = f(probe).item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), 1e-8)
            worst = max(worst, err)
    return worst
