"""Dense 2-D float64 matrices with reverse-mode differentiation.

Everything is a matrix: scalars are 1x1, vectors are single rows or columns.
A Tensor participates in gradient tracking only when it was created through a
Tape (either as a watched leaf or downstream of one); plain Tensors act as
constants and record nothing, which doubles as the no-grad evaluation mode
used for greedy decoding.

Also hosts the optimizer-side primitives: bias-corrected Adam, global-norm
gradient clipping, and inverted dropout masks.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, StructuralError, UsageError

_LOG_FLOOR = 1e-300  # guards log() inside entropy; p*log(p) -> 0 as p -> 0


def _as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise StructuralError(f"expected at most 2 dimensions, got {arr.ndim}")
    return arr


class Tensor:
    """A 2-D float64 matrix, optionally recorded on a Tape.

    Direct construction validates the value (shape and finiteness) and yields
    a constant unless a tape is given. Results of ops are checked for
    finiteness whenever they are recorded; violating that is a hard error.
    """

    __slots__ = ("value", "tape", "grad", "_parents", "_vjp", "_idx")

    def __init__(self, value, tape: "Tape | None" = None):
        arr = _as_matrix(value)
        if not np.isfinite(arr).all():
            raise NumericError("matrix contains non-finite entries")
        self.value = arr
        self.tape = tape
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._idx = -1
        if tape is not None:
            tape._append(self)

    @classmethod
    def _make(cls, value: np.ndarray, tape, parents, vjp) -> "Tensor":
        out = object.__new__(cls)
        out.value = value
        out.tape = tape
        out.grad = None
        out._parents = parents
        out._vjp = vjp
        out._idx = -1
        if tape is not None:
            if not np.isfinite(value).all():
                raise NumericError("op produced non-finite entries")
            tape._append(out)
        return out

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise StructuralError(f"item() needs a 1x1 matrix, got {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        tag = "const" if self.tape is None else "taped"
        return f"Tensor({tag}, shape={self.value.shape})"

    # -- operator sugar -------------------------------------------------

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


class Tape:
    """Append-only record of ops; creation order is a topological order."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._watched: list[Tensor] = []

    def _append(self, t: Tensor) -> None:
        t._idx = len(self.nodes)
        self.nodes.append(t)

    def watch(self, value) -> Tensor:
        """Register a leaf whose gradient will be accumulated by backward()."""
        t = value if isinstance(value, Tensor) and value.tape is self else Tensor(value, tape=self)
        self._watched.append(t)
        return t

    def backward(self, loss: Tensor) -> None:
        """Reverse sweep from a scalar loss node.

        Every watched leaf ends up with a gradient; leaves unreachable from
        the loss get zeros.
        """
        if loss.tape is not self:
            raise UsageError("loss node does not belong to this tape")
        if loss.value.shape != (1, 1):
            raise StructuralError("loss node must be scalar (1x1)")
        for node in self.nodes:
            for p in node._parents:
                if p.tape is self and p._idx >= node._idx:
                    raise StructuralError("cyclic tape: parent recorded after child")
        loss.grad = np.ones((1, 1))
        for node in reversed(self.nodes):
            g = node.grad
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if parent.tape is None or pg is None:
                    continue
                parent.grad = pg if parent.grad is None else parent.grad + pg
        for leaf in self._watched:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.value)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _joint_tape(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise UsageError("operands belong to different tapes")
    return tape


def _op(value: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    tape = _joint_tape(*inputs)
    if tape is None:
        return Tensor._make(value, None, (), None)
    return Tensor._make(value, tape, inputs, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and out.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and out.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


# -- elementary ops ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    value = a.value + b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return _op(value, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    value = a.value - b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return _op(value, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    value = a.value * b.value

    def vjp(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return _op(value, (a, b), vjp)


def neg(a) -> Tensor:
    a = _lift(a)

    def vjp(g):
        return (-g,)

    return _op(-a.value, (a,), vjp)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.value.shape[1] != b.value.shape[0]:
        raise StructuralError(
            f"matmul shape mismatch: {a.value.shape} @ {b.value.shape}"
        )
    value = a.value @ b.value

    def vjp(g):
        return g @ b.value.T, a.value.T @ g

    return _op(value, (a, b), vjp)


def tanh(a) -> Tensor:
    a = _lift(a)
    y = np.tanh(a.value)

    def vjp(g):
        return (g * (1.0 - y * y),)

    return _op(y, (a,), vjp)


def sigmoid(a) -> Tensor:
    a = _lift(a)
    x = a.value
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * y * (1.0 - y),)

    return _op(y, (a,), vjp)


def log(a) -> Tensor:
    a = _lift(a)
    value = np.log(a.value)

    def vjp(g):
        return (g / a.value,)

    return _op(value, (a,), vjp)


def reciprocal(a) -> Tensor:
    a = _lift(a)
    value = 1.0 / a.value

    def vjp(g):
        return (-g * value * value,)

    return _op(value, (a,), vjp)


def maximum_scalar(a, floor: float) -> Tensor:
    """max(a, floor) elementwise; gradient passes where a >= floor."""
    a = _lift(a)
    value = np.maximum(a.value, floor)
    mask = a.value >= floor

    def vjp(g):
        return (g * mask,)

    return _op(value, (a,), vjp)


def softmax_rows(logits) -> Tensor:
    """Row-wise softmax with max-subtraction for stability."""
    t = _lift(logits)
    x = t.value
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _op(y, (t,), vjp)


def entropy_rows(probs) -> Tensor:
    """Row-wise Shannon entropy (natural log), as a column vector."""
    t = _lift(probs)
    p = t.value
    logp = np.log(np.maximum(p, _LOG_FLOOR))
    h = -(np.where(p > 0.0, p * logp, 0.0)).sum(axis=1, keepdims=True)

    def vjp(g):
        return (g * -(logp + 1.0),)

    return _op(h, (t,), vjp)


def sum_all(a) -> Tensor:
    a = _lift(a)
    value = np.array([[a.value.sum()]])

    def vjp(g):
        return (np.full_like(a.value, g[0, 0]),)

    return _op(value, (a,), vjp)


def sum_rows(a) -> Tensor:
    """Sum each row down to a single column."""
    a = _lift(a)
    value = a.value.sum(axis=1, keepdims=True)

    def vjp(g):
        return (np.broadcast_to(g, a.value.shape).copy(),)

    return _op(value, (a,), vjp)


def concat_cols(parts: Sequence) -> Tensor:
    tensors = tuple(_lift(p) for p in parts)
    widths = [t.value.shape[1] for t in tensors]
    value = np.concatenate([t.value for t in tensors], axis=1)
    offsets = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(tensors)))

    return _op(value, tensors, vjp)


def col(a, j: int) -> Tensor:
    """Slice out column j as a Bx1 matrix."""
    a = _lift(a)
    value = a.value[:, j:j + 1].copy()

    def vjp(g):
        z = np.zeros_like(a.value)
        z[:, j:j + 1] = g
        return (z,)

    return _op(value, (a,), vjp)


def gather_rows(m, ids) -> Tensor:
    """Select rows by index (embedding lookup); gradient scatter-adds."""
    m = _lift(m)
    idx = np.asarray(ids, dtype=np.intp)
    value = m.value[idx]

    def vjp(g):
        z = np.zeros_like(m.value)
        np.add.at(z, idx, g)
        return (z,)

    return _op(value, (m,), vjp)


def gather_cols(a, ids) -> Tensor:
    """Pick entry ids[b] from each row b, as a Bx1 matrix."""
    a = _lift(a)
    idx = np.asarray(ids, dtype=np.intp)
    rows = np.arange(a.value.shape[0])
    value = a.value[rows, idx].reshape(-1, 1)

    def vjp(g):
        z = np.zeros_like(a.value)
        z[rows, idx] = g[:, 0]
        return (z,)

    return _op(value, (a,), vjp)


# -- optimizer-side primitives --------------------------------------------


class Adam:
    """Bias-corrected Adam over a dict of named parameter arrays.

    Defaults follow the usual recipe: alpha=0.001, beta1=0.9, beta2=0.999,
    eps=1e-8. Updates are applied in place so callers holding the same
    arrays observe them immediately.
    """

    def __init__(self, params: dict[str, np.ndarray], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = 0.0
            elif g.shape != p.shape:
                raise StructuralError(
                    f"gradient shape {g.shape} does not match parameter "
                    f"{name} shape {p.shape}"
                )
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def state(self) -> dict:
        return {
            "step": self.step_count,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state(self, state: dict) -> None:
        self.step_count = int(state["step"])
        for k in self.m:
            self.m[k][...] = state["m"][k]
            self.v[k][...] = state["v"][k]


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.

    Scaling happens in place; returns the pre-clip global norm.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    sq = 0.0
    for g in grads.values():
        sq += float((g * g).sum())
    norm = math.sqrt(sq)
    if not math.isfinite(norm):
        raise NumericError("gradients contain non-finite entries")
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: entries are 0 or 1/(1-p); identity when p=0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)
