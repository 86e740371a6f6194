"""Central finite-difference gradient checks.

Analytic gradients come from the graph built at the working precision
(float32 by default); the numeric oracle replays the same function in float64
so truncation error is not swamped by float32 roundoff.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward, no_grad

ScalarFn = Callable[[dict[str, Tensor]], Tensor]


def analytic_gradients(fn: ScalarFn, inputs: Mapping[str, np.ndarray], dtype=np.float32) -> dict[str, np.ndarray]:
    tensors = {k: Tensor(v, requires_grad=True, dtype=dtype, name=k) for k, v in inputs.items()}
    backward(fn(tensors))
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)).astype(np.float64) for k, t in tensors.items()}


def numeric_gradients(fn: ScalarFn, inputs: Mapping[str, np.ndarray], step: float = 1e-3) -> dict[str, np.ndarray]:
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}

    def value() -> float:
        with no_grad():
            return float(fn({k: Tensor(v, dtype=np.float64) for k, v in base.items()}).data)

    out = {}
    for name, arr in base.items():
        grad = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = value()
            flat[i] = keep - step
            down = value()
            flat[i] = keep
            gflat[i] = (up - down) / (2.0 * step)
        out[name] = grad
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Normwise error ``max|a - n| / max|n|``, with ``floor`` guarding all-zero gradients."""
    scale = max(float(np.max(np.abs(numeric), initial=0.0)), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def check_gradients(
    fn: ScalarFn, inputs: Mapping[str, np.ndarray], step: float = 1e-3, dtype=np.float32
) -> dict[str, float]:
    """Per-input relative error between analytic and central-difference gradients."""
    a = analytic_gradients(fn, inputs, dtype)
    n = numeric_gradients(fn, inputs, step)
    return {k: relative_error(a[k], n[k]) for k in inputs}
