"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import KernelError, Tensor


class PoisonedGradientError(KernelError):
    pass


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    rate: float,
) -> tuple[dict[str, Tensor], AdamState]:
    """Apply one Adam update.

    Parameters without an entry in ``grads`` are treated as having a zero
    gradient. The whole step is rejected before any mutation if a gradient
    holds NaN or Inf.
    """
    for name, g in grads.items():
        if name not in params:
            raise KernelError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise KernelError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.isfinite(g).all():
            raise PoisonedGradientError(f"non-finite gradient for {name!r} at step {state.step + 1}")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.step
    corr2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        update = rate * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)
    return params, state
