"""Dense tensors with tape-based reverse-mode differentiation.

Arrays live in numpy buffers (float32 by default). Every public operation
returns a new :class:`Tensor`; when any input requires a gradient the result
records its parents and a local gradient rule so :func:`backward` can walk the
graph in reverse topological order.

float64 tensors are supported so finite-difference oracles can replay a
computation at higher precision.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

MASK_FILL = -1e9


class KernelError(Exception):
    """Base class for numeric-kernel failures."""


class DimensionError(KernelError):
    pass


class DegenerateRowError(KernelError):
    pass


class NonFiniteError(KernelError):
    pass


class EmptyLossError(KernelError):
    pass


class ContractError(KernelError):
    pass


class ConfigError(KernelError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_rule", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._rule: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        return backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], rule: Callable, op: str) -> Tensor:
    """Wrap an op output; ``rule(grad_out)`` returns one gradient per parent."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = False
    out._parents = ()
    out._rule = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._rule = rule
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data + b.data
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data - b.data
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        scalar = b
        return _result(a.data * scalar, (a,), lambda g: (g * scalar,), "mul")
    out = a.data * b.data
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    c = float(np.sqrt(2.0 / np.pi))
    xd = x.data
    sq = xd * xd
    th = np.tanh(c * xd * (1.0 + 0.044715 * sq))
    out = 0.5 * xd * (1.0 + th)

    def rule(g):
        dinner = c * (1.0 + 3 * 0.044715 * sq)
        local = 0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner
        return (g * local,)

    return _result(out, (x,), rule, "gelu")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# shape
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _result(out, (x,), lambda g: (g.transpose(inverse),), "transpose")


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), rule, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / float(count))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"token id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def rule(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return _result(out, (table,), rule, "embedding")


def take_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    """Gather rows of a rank-2 tensor."""
    rows = np.asarray(rows, dtype=np.int64)
    out = x.data[rows]

    def rule(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, rows, g)
        return (grad,)

    return _result(out, (x,), rule, "take_rows")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of rank-2 tensors, or batched over leading axes."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if b.data.ndim == 2 and a.data.ndim > 2:
        # fold leading axes into one GEMM
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def folded_rule(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _result(out, (a, b), folded_rule, "matmul")
    out = np.matmul(a.data, b.data)

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), rule, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


# ---------------------------------------------------------------------------
# normalisation and attention
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError("layer_norm gain/bias must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def rule(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, x.shape[-1]).sum(axis=0)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _result(out.astype(x.dtype, copy=False), (x, gain, bias), rule, "layer_norm")


def _softmax_rule(p: np.ndarray):
    def rule(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return rule


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return _result(p, (x,), _softmax_rule(p), "softmax")


def masked_softmax(scores: Tensor, allow: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``allow``.

    Disallowed scores get an additive -1e9 before exponentiation, so their
    weights are exactly zero and each row renormalises over allowed entries.
    ``allow`` may broadcast against ``scores``.
    """
    allow = np.asarray(allow, dtype=bool)
    try:
        full = np.broadcast_to(allow, scores.shape)
    except ValueError as exc:
        raise DimensionError(f"mask {allow.shape} does not fit scores {scores.shape}") from exc
    if not allow.any(axis=-1).all():
        raise DegenerateRowError("a softmax row has no allowed entry")
    z = np.where(full, scores.data, scores.data + scores.dtype.type(MASK_FILL))
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    e = np.where(full, e, 0).astype(scores.dtype, copy=False)
    p = e / e.sum(axis=-1, keepdims=True)
    return _result(p, (scores,), _softmax_rule(p), "masked_softmax")


def cross_entropy_masked(logits: Tensor, targets: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over unmasked positions."""
    if logits.data.ndim != 2:
        raise DimensionError("logits must be positions x vocab")
    targets = np.asarray(targets, dtype=np.int64)
    loss_mask = np.asarray(loss_mask, dtype=bool)
    if targets.shape != (logits.shape[0],) or loss_mask.shape != targets.shape:
        raise DimensionError("targets/loss_mask must align with logits rows")
    count = int(loss_mask.sum())
    if count == 0:
        raise EmptyLossError("no unmasked positions")
    vocab = logits.shape[1]
    live = targets[loss_mask]
    if live.min() < 0 or live.max() >= vocab:
        raise ContractError("target outside vocabulary")
    safe_targets = np.where(loss_mask, targets, 0)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    rows = np.arange(logits.shape[0])
    nll = -logp[rows, safe_targets]
    loss = np.asarray((nll * loss_mask).sum() / count, dtype=logits.dtype)

    def rule(g):
        p = np.exp(logp)
        p[rows, safe_targets] -= 1.0
        p *= (loss_mask / count).astype(p.dtype)[:, None]
        return (p * g,)

    return _result(loss, (logits,), rule, "cross_entropy_masked")


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, parents before children."""
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ContractError("backward needs a scalar root")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._rule is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
