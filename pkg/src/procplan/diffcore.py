"""Dense float64 tensors with a recording tape and reverse-mode gradients.

Only the operations the planner needs are provided. Operations executed
inside a ``with Tape():`` block are recorded when any input requires a
gradient; outside a tape they are plain numpy evaluations.
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

MASK_FILL = -1e30

_current_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "procplan_tape", default=None
)


class NonFiniteError(FloatingPointError):
    pass


class AllMaskedRow(ValueError):
    pass


class EmptyTape(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    def zero_grad(self) -> None:
        if self.requires_grad:
            if self.grad is None or self.grad.shape != self.data.shape:
                self.grad = np.zeros_like(self.data)
            else:
                self.grad.fill(0.0)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


@dataclass(eq=False)
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    tape: "Tape"


class Tape:
    """Ordered record of operations; the active tape is set with ``with``."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _current_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _current_tape.reset(self._token)

    def record(self, out: Tensor, parents, backward) -> None:
        node = _Node(out, tuple(parents), backward, self)
        out._node = node
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        backward(loss, tape=self)


def current_tape() -> Tape | None:
    return _current_tape.get()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, parents: Iterable[Tensor], grad_fn) -> Tensor:
    # the sum is finite whenever every entry is (barring overflow), so scan only on failure
    if not np.isfinite(data.sum()) and not np.isfinite(data).all():
        raise NonFiniteError("non-finite value produced by forward op")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._node = None
    parents = tuple(parents)
    tape = _current_tape.get()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, grad_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise EmptyTape("loss was not produced by a recorded operation")
    if tape is None:
        tape = loss._node.tape
    if not tape.nodes:
        raise EmptyTape("tape is empty")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        node.out.grad = g
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is None:
                parent.grad += pg
            else:
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return _emit(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")

    if bd.ndim == 2 and ad.ndim > 2:
        # stacked rows times one matrix: fold the leading axes into a single GEMM
        a2 = ad.reshape(-1, ad.shape[-1])
        out_shape = ad.shape[:-1] + (bd.shape[1],)

        def grad_flat(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            return ga, (a2.T @ g2 if b.requires_grad else None)

        return _emit((a2 @ bd).reshape(out_shape), (a, b), grad_flat)

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit(ad @ bd, (a, b), grad_fn)


# -- shape ---------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def getitem(a: Tensor, key) -> Tensor:
    shape = a.shape

    def grad_fn(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return _emit(np.array(a.data[key]), (a,), grad_fn)


def broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _emit(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, old),))


# -- reductions ----------------------------------------------------------------

def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001
    shape = a.shape

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(a.data.sum(axis=axis)), (a,), grad_fn)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def pick(a: Tensor, index) -> Tensor:
    """Gather ``a[..., index[...]]`` along the last axis."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != a.shape[:-1]:
        raise ValueError(f"index shape {index.shape} does not match {a.shape[:-1]}")
    sel = np.take_along_axis(a.data, index[..., None], axis=-1)[..., 0]
    shape = a.shape

    def grad_fn(g):
        out = np.zeros(shape)
        np.put_along_axis(out, index[..., None], g[..., None], axis=-1)
        return (out,)

    return _emit(sel, (a,), grad_fn)


# -- normalisers ---------------------------------------------------------------

def _softmax_grad(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    return p * (g - (g * p).sum(axis=-1, keepdims=True))


def softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return _emit(p, (a,), lambda g: (_softmax_grad(p, g),))


def masked_softmax(logits: Tensor, mask) -> Tensor:
    """Row softmax over the last axis restricted to positions where mask is 1.

    ``mask`` broadcasts against ``logits``; masked positions get exactly 0.
    """
    keep = np.asarray(mask).astype(bool)
    if not keep.any(axis=-1).all():
        raise AllMaskedRow("attention mask has a row with no admissible position")
    z = np.where(keep, logits.data, MASK_FILL)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    p = np.where(keep, p, 0.0)
    return _emit(p, (logits,), lambda g: (_softmax_grad(p, g),))


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _emit(out, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def grad_fn(g):
        gx_hat = g * gd
        n = xd.shape[-1]
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        return (gx, _unbroadcast(g * xhat, gd.shape), _unbroadcast(g, beta.shape))

    return _emit(xhat * gd + beta.data, (x, gamma, beta), grad_fn)


# -- gradient checking -----------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor] | Sequence[Tensor],
               h: float = 1e-6, max_entries: int | None = None,
               rng: np.random.Generator | None = None, select: str = "random") -> float:
    """Max relative error between taped and central-difference gradients.

    ``f`` must rebuild its graph on every call and be deterministic.
    With ``max_entries`` set, that many coordinates per tensor are checked:
    drawn at random, or the ones with the largest analytic gradient when
    ``select="largest"`` (small entries are dominated by roundoff).
    """
    if select not in ("random", "largest"):
        raise ValueError(f"unknown selection {select!r}")
    if not isinstance(params, dict):
        params = {str(i): p for i, p in enumerate(params)}
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = {k: p.grad.copy() for k, p in params.items()}
    rng = rng if rng is not None else np.random.default_rng(0)

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            if select == "largest":
                idx = np.argsort(-np.abs(analytic[name].reshape(-1)), kind="stable")[:max_entries]
            else:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            num = (up - down) / (2 * h)
            ana = analytic[name].reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


def directional_grad_check(f: Callable[[], Tensor], params: dict[str, Tensor],
                           h: float = 1e-6, rng: np.random.Generator | None = None
                           ) -> dict[str, float]:
    """Per-tensor relative error of the taped gradient along one random unit direction.

    Compares <grad, u> with (f(p + h u) - f(p - h u)) / 2h for each tensor.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    errors = {}
    for name, p in params.items():
        u = rng.standard_normal(p.shape)
        u /= np.linalg.norm(u)
        ana = float(np.sum(p.grad * u))
        orig = p.data.copy()
        p.data += h * u
        up = f().item()
        p.data[...] = orig - h * u
        down = f().item()
        p.data[...] = orig
        num = (up - down) / (2 * h)
        errors[name] = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
    return errors
