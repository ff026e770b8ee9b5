"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every op builds its output ``Tensor`` together with a closure mapping the
upstream gradient to one gradient per input. Tensors get a monotonically
increasing ``tape_id`` at creation, so sorting the nodes reachable from a
loss by id yields a valid topological order; that ordered list is the tape
walked by :func:`backward`.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, LabelError, NumericError

DTYPE = np.float64

_ids = itertools.count(1)
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "tape_id", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.tape_id = next(_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar used by the loss code
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.tape_id = next(_ids)
    out.op = op
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------- tape


@dataclass
class Tape:
    """Ordered record of the nodes a scalar loss depends on."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen: dict[int, Tensor] = {}
        stack = [loss]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen[id(t)] = t
            stack.extend(p for p in t._parents if p.requires_grad)
        return cls(sorted(seen.values(), key=lambda t: t.tape_id))

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every requires-grad tensor ``loss`` depends on.

    Gradients accumulate across calls; call ``zero_grad`` between steps.
    Returns the tape that was walked.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    tape = Tape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape


# ---------------------------------------------------------------- ops


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul needs equal shapes, got {a.shape} and {b.shape}")

    def bw(g):
        return g * b.data, g * a.data

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    return _make(out, (x,), lambda g: (g * (out > 0),), "relu")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0."""
    sizes = [p.shape[0] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bw, "concat")


def take_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), bw, "take_rows")


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of ``x`` (a contiguous take_rows)."""

    def bw(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return _make(x.data[start:stop], (x,), bw, "slice_rows")


def sum_all(x: Tensor) -> Tensor:
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _make(np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n),), "mean")


def stack_sum(terms: Sequence[Tensor]) -> Tensor:
    """Elementwise sum of equally shaped tensors (fixed left-to-right order)."""
    out = terms[0].data.copy()
    for t in terms[1:]:
        if t.shape != out.shape:
            raise DimensionError(f"stack_sum shape mismatch: {out.shape} vs {t.shape}")
        out = out + t.data
    return _make(out, tuple(terms), lambda g: tuple(g for _ in terms), "stack_sum")


def conv1d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 1-D cross-correlation.

    x: (batch, cin, length), w: (cout, cin, ksz) -> (batch, cout, lout)
    """
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise DimensionError(f"conv1d expects 3-D input and weight, got {x.shape} and {w.shape}")
    if stride < 1 or pad < 0:
        raise DimensionError(f"bad stride/pad: {stride}/{pad}")
    b, cin, length = x.shape
    cout, wcin, ksz = w.shape
    if wcin != cin:
        raise DimensionError(f"conv1d channel mismatch: input {x.shape}, weight {w.shape}")
    lout = (length + 2 * pad - ksz) // stride + 1
    if length + 2 * pad < ksz or lout < 1:
        raise DimensionError(f"conv1d output length < 1 for length={length}, ksz={ksz}, pad={pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, ksz, axis=2)[:, :, : stride * (lout - 1) + 1 : stride, :]
    cols = win.transpose(0, 2, 1, 3).reshape(b * lout, cin * ksz)
    wmat = w.data.reshape(cout, cin * ksz)
    out = (cols @ wmat.T).reshape(b, lout, cout).transpose(0, 2, 1)

    def bw(g):
        g2 = g.transpose(0, 2, 1).reshape(b * lout, cout)
        gw = (g2.T @ cols).reshape(cout, cin, ksz)
        if not x.requires_grad:
            return None, gw
        dcols = (g2 @ wmat).reshape(b, lout, cin, ksz)
        gxp = np.zeros_like(xp)
        stop = stride * (lout - 1) + 1
        for k in range(ksz):
            gxp[:, :, k : k + stop : stride] += dcols[:, :, :, k].transpose(0, 2, 1)
        gx = gxp[:, :, pad : pad + length] if pad else gxp
        return gx, gw

    return _make(np.ascontiguousarray(out), (x, w), bw, "conv1d")


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what} input")


def softmax_array(a: np.ndarray) -> np.ndarray:
    _check_finite(a, "softmax")
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis."""
    if x.data.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"softmax expects (n, C) with C >= 1, got {x.shape}")
    s = softmax_array(x.data)

    def bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, (x,), bw, "softmax")


def _target_matrix(target, n: int, c: int) -> np.ndarray:
    t = np.asarray(target)
    if t.ndim == 2:
        if t.shape != (n, c):
            raise DimensionError(f"one-hot target shape {t.shape} does not match logits ({n}, {c})")
        return t.astype(DTYPE)
    t = t.astype(np.int64).reshape(-1)
    if t.shape[0] != n:
        raise DimensionError(f"{t.shape[0]} targets for {n} logit rows")
    if np.any(t < 0) or np.any(t >= c):
        raise LabelError(f"target index out of range [0, {c}): {t[(t < 0) | (t >= c)][:5].tolist()}")
    onehot = np.zeros((n, c), dtype=DTYPE)
    onehot[np.arange(n), t] = 1.0
    return onehot


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean over rows of -log softmax(logits)[target].

    ``target`` is a vector of class indices or an (n, C) matrix of one-hot rows.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects (n, C) logits, got {logits.shape}")
    n, c = logits.shape
    if n == 0:
        raise DimensionError("cross_entropy on an empty batch")
    onehot = _target_matrix(target, n, c)
    a = logits.data
    _check_finite(a, "cross_entropy")
    shifted = a - a.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -(onehot * logp).sum() / n
    # saturated correct rows round to -0.0; keep the loss nonnegative
    loss = max(loss, 0.0)

    def bw(g):
        p = np.exp(logp)
        return (g * (p * onehot.sum(axis=1, keepdims=True) - onehot) / n,)

    return _make(np.array(loss), (logits,), bw, "cross_entropy")


def grad_reverse(x: Tensor, lam: float) -> Tensor:
    """Identity on values; multiplies the upstream gradient by ``-lam``."""
    factor = -float(lam)
    return _make(x.data, (x,), lambda g: (g * factor,), "grad_reverse")


def combine(z_stack: Tensor, w: Tensor) -> Tensor:
    """z[i] = sum_k w[i, k] * z_stack[i, k] for z_stack (m, K, C) and w (m, K)."""
    if z_stack.data.ndim != 3 or w.data.ndim != 2 or z_stack.shape[:2] != w.shape:
        raise DimensionError(f"combine shape mismatch: z {z_stack.shape}, w {w.shape}")
    zs, wd = z_stack.data, w.data
    out = np.einsum("mk,mkc->mc", wd, zs)

    def bw(g):
        return wd[:, :, None] * g[:, None, :], np.einsum("mc,mkc->mk", g, zs)

    return _make(out, (z_stack, w), bw, "combine")


def stack_axis1(parts: Sequence[Tensor]) -> Tensor:
    """Stack (m, C) tensors into (m, K, C)."""
    out = np.stack([p.data for p in parts], axis=1)
    return _make(out, tuple(parts), lambda g: tuple(g[:, k] for k in range(len(parts))), "stack")


# ---------------------------------------------------------------- gradient oracle


def rel_error(ad: np.ndarray, fd: np.ndarray) -> float:
    """max |ad - fd| / max(1e-8, |ad| + |fd|) over all entries (0 when empty)."""
    ad, fd = np.asarray(ad, dtype=float), np.asarray(fd, dtype=float)
    if ad.size == 0:
        return 0.0
    return float(np.max(np.abs(ad - fd) / np.maximum(1e-8, np.abs(ad) + np.abs(fd))))


def numeric_grad(f: Callable[[], Tensor], p: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to every entry of ``p``.

    ``p`` is perturbed in place and restored bitwise.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    out = np.zeros_like(p.data)
    flat, gflat = p.data.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        with no_grad():
            up = f().item()
        flat[i] = orig - eps
        with no_grad():
            down = f().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return out


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` recomputes the scalar loss from the current values of ``params``;
    params are perturbed in place and restored. The error per entry is
    ``|ad - fd| / max(1e-8, |ad| + |fd|)``.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    for p in params:
        p.grad = None
    backward(f())
    worst = 0.0
    for p in params:
        ad = np.zeros_like(p.data) if p.grad is None else p.grad
        worst = max(worst, rel_error(ad, numeric_grad(f, p, eps)))
    return worst
