"""Float64 tensors with a reverse-mode gradient tape, Adam, and a gradient checker.

Only the handful of primitives the model needs are provided. Broadcasting is
limited to adding a bias vector along the last axis; everything else requires
matching shapes.

Usage::

    with Tape() as tape:
        loss = sum_(square(x))
    (gx,) = tape.gradient(loss, [x])
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, NonFiniteError

_ACTIVE: list["Tape"] = []

# fill value for masked attention logits; finite so softmax stays NaN-free
MASK_FILL = -1e30


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records primitive operations executed inside its ``with`` block.

    Nodes are appended in execution order, which is a topological order of the
    computation, so the backward pass simply walks the list in reverse.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple, Callable]] = []
        self.visited = 0

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self._nodes)

    def gradient(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        if loss.size != 1:
            raise ContractViolation(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        self.visited = 0
        for out, inputs, backward in reversed(self._nodes):
            self.visited += 1
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
        return [grads.get(id(p), np.zeros_like(p.data)) for p in params]


def _emit(out_data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    # primitives on finite inputs only produce inf/nan through overflow, which
    # forward_backward catches on the loss and gradients; skip the per-op scan
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(out_data, dtype=np.float64)
    out.requires_grad = False
    out.name = None
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1]._nodes.append((out, inputs, backward))
    return out


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ContractViolation(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    return _emit(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    n = x.shape[-1]
    if b.shape != (n,):
        raise ContractViolation(f"add_bias: bias shape {b.shape} does not match last axis {n}")
    return _emit(x.data + b.data, (x, b), lambda g: (g, g.reshape(-1, n).sum(axis=0)))


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``(..., k) @ (k, n)`` or batched ``(B, m, k) @ (B, k, n)``."""
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim == 2:
        if a.shape[-1] != b.shape[0]:
            raise ContractViolation(f"matmul: {a.shape} @ {b.shape}")
        k, n = b.shape

        def backward(g):
            ga = g @ b.data.T if a.requires_grad else None
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n) if b.requires_grad else None
            return ga, gb

    elif a.data.ndim == 3 and b.data.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ContractViolation(f"matmul: {a.shape} @ {b.shape}")

        def backward(g):
            ga = g @ b.data.transpose(0, 2, 1) if a.requires_grad else None
            gb = a.data.transpose(0, 2, 1) @ g if b.requires_grad else None
            return ga, gb

    else:
        raise ContractViolation(f"matmul: unsupported shapes {a.shape} @ {b.shape}")
    return _emit(a.data @ b.data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _emit(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row softmax over the last axis with max subtraction.

    ``mask`` is boolean, True where a logit is kept. Fully masked rows come out
    uniform instead of NaN; masked entries never receive gradient.
    """
    z = x.data if mask is None else np.where(mask, x.data, MASK_FILL)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        gx = y * (g - (g * y).sum(axis=-1, keepdims=True))
        if mask is not None:
            gx = np.where(mask, gx, 0.0)
        return (gx,)

    return _emit(y, (x,), backward)


def elu(x: Tensor) -> Tensor:
    neg = x.data < 0
    ex = np.exp(np.minimum(x.data, 0.0))
    out = np.where(neg, ex - 1.0, x.data)
    return _emit(out, (x,), lambda g: (g * np.where(neg, ex, 1.0),))


def elu_plus_one(x: Tensor) -> Tensor:
    """``elu(x) + 1`` evaluated as ``exp(x)`` on the negative side.

    The naive form rounds to exactly 0 once ``exp(x)`` drops below machine
    epsilon; this one stays strictly positive down to ``exp`` underflow.
    """
    neg = x.data < 0
    ex = np.exp(np.minimum(x.data, 0.0))
    out = np.where(neg, ex, x.data + 1.0)
    return _emit(out, (x,), lambda g: (g * np.where(neg, ex, 1.0),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _emit(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def sqrt(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise ContractViolation("sqrt: input must be strictly positive")
    out = np.sqrt(x.data)
    return _emit(out, (x,), lambda g: (g * 0.5 / out,))


def square(x: Tensor) -> Tensor:
    return _emit(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def log_sigmoid(x: Tensor) -> Tensor:
    out = -np.logaddexp(0.0, -x.data)
    # d/dx log sigma(x) = sigma(-x)
    return _emit(out, (x,), lambda g: (g * np.exp(-np.logaddexp(0.0, x.data)),))


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        shape = x.shape
        return _emit(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % x.data.ndim
    shape = x.shape
    return _emit(
        x.data.sum(axis=ax),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),),
    )


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis), 1.0 / n)


def take(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather: ``table[idx]`` for a 2-D table and integer index array."""
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise ContractViolation("take: indices must be integers")
    n, d = table.shape
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ContractViolation(f"take: index out of range for table with {n} rows")

    def backward(g):
        flat = idx.ravel()
        order = np.argsort(flat, kind="stable")
        rows, starts = np.unique(flat[order], return_index=True)
        gt = np.zeros_like(table.data)
        gt[rows] = np.add.reduceat(g.reshape(-1, d)[order], starts, axis=0)
        return (gt,)

    return _emit(table.data[idx], (table,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    widths = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(widths)[:-1]
    return _emit(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return (gx,)

    return _emit(x.data[..., start:stop], (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-8) -> Tensor:
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ContractViolation("layer_norm: gamma/beta must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).reshape(-1, n).sum(axis=0), g.reshape(-1, n).sum(axis=0)

    return _emit(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


# ---------------------------------------------------------------- training


def forward_backward(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]):
    """Run ``loss_fn`` under a fresh tape; return ``(loss value, gradients)``."""
    with Tape() as tape:
        loss = loss_fn()
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractViolation("loss_fn must return a scalar Tensor")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("non-finite loss")
    grads = tape.gradient(loss, params)
    for p, g in zip(params, grads):
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {p.name or 'parameter'}")
    return loss.item(), grads


class Adam:
    """Bias-corrected Adam; updates parameter arrays in place."""

    def __init__(self, params: Sequence[Tensor], lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ContractViolation(f"expected {len(self.params)} gradients, got {len(grads)}")
        for p, g in zip(self.params, grads):
            if p.shape != np.shape(g):
                raise ContractViolation(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class GradCheckResult:
    passed: bool
    max_rel_error: float
    num_checked: int
    # (param index, flat index, analytic, numeric) of the worst coordinate
    worst: tuple


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    num_coords: int | None = None,
    seed: int = 0,
    abs_floor: float = 1e-6,
) -> GradCheckResult:
    """Compare tape gradients against central differences.

    Relative error is ``|a - n| / max(|a|, |n|, abs_floor)``; the floor keeps
    coordinates whose true gradient is ~0 from reporting roundoff as error.
    With ``num_coords`` set, that many coordinates are drawn uniformly over
    all parameters; otherwise every coordinate is checked.
    """
    for p in params:
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
    _, analytic = forward_backward(loss_fn, params)
    coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if num_coords is not None and num_coords < len(coords):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=num_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst, max_err = None, 0.0
    for i, j in coords:
        flat = params[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        up = loss_fn().item()
        flat[j] = orig - h
        down = loss_fn().item()
        flat[j] = orig
        numeric = (up - down) / (2.0 * h)
        a = float(analytic[i].reshape(-1)[j])
        err = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
        if worst is None or err > max_err:
            max_err, worst = err, (i, j, a, numeric)
    return GradCheckResult(max_err < tol, max_err, len(coords), worst)
