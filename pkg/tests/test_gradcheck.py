"""Finite-difference checks for every differentiable operation and a tiny decoder."""

from __future__ import annotations

import numpy as np
import pytest

from studyrec import model as mdl
from studyrec.numkernel.gradcheck import analytic_gradients, numeric_gradients
from studyrec.numkernel import (
    Tensor,
    add,
    check_gradients,
    cross_entropy_masked,
    embedding,
    gelu,
    layer_norm,
    linear,
    masked_softmax,
    matmul,
    mean,
    mul,
    relative_error,
    reshape,
    softmax,
    sub,
    sum_,
    take_rows,
    transpose,
)

TOL = 1e-3


def project(t: Tensor) -> Tensor:
    """Scalar readout with non-uniform weights so every output entry matters."""
    weights = np.random.default_rng(99).normal(size=t.shape)
    return sum_(mul(t, Tensor(weights, dtype=t.dtype)))


ALLOW = np.array([[1, 0, 0, 0], [1, 1, 0, 0], [1, 0, 1, 1]], dtype=bool)

CASES = {
    "add": (lambda t: project(add(t["a"], t["b"])), {"a": (3, 4), "b": (4,)}),
    "sub": (lambda t: project(sub(t["a"], t["b"])), {"a": (3, 4), "b": (3, 1)}),
    "mul": (lambda t: project(mul(t["a"], t["b"])), {"a": (3, 4), "b": (3, 4)}),
    "mul_scalar": (lambda t: project(mul(t["a"], 2.5)), {"a": (3, 4)}),
    "gelu": (lambda t: project(gelu(t["a"])), {"a": (3, 4)}),
    "reshape": (lambda t: project(reshape(t["a"], (4, 3))), {"a": (3, 4)}),
    "transpose": (lambda t: project(transpose(t["a"], (1, 0, 2))), {"a": (2, 3, 4)}),
    "sum_axis": (lambda t: project(sum_(t["a"], axis=1)), {"a": (3, 4)}),
    "mean": (lambda t: project(mean(t["a"], axis=0)), {"a": (3, 4)}),
    "matmul": (lambda t: project(matmul(t["a"], t["b"])), {"a": (3, 4), "b": (4, 2)}),
    "matmul_batched": (lambda t: project(matmul(t["a"], t["b"])), {"a": (2, 3, 4), "b": (2, 4, 2)}),
    "matmul_folded": (lambda t: project(matmul(t["a"], t["b"])), {"a": (2, 3, 4), "b": (4, 2)}),
    "linear": (lambda t: project(linear(t["x"], t["w"], t["b"])), {"x": (3, 4), "w": (4, 5), "b": (5,)}),
    "layer_norm": (lambda t: project(layer_norm(t["x"], t["g"], t["b"], 1e-5)), {"x": (3, 6), "g": (6,), "b": (6,)}),
    "softmax": (lambda t: project(softmax(t["a"])), {"a": (3, 4)}),
    "masked_softmax": (lambda t: project(masked_softmax(t["a"], ALLOW)), {"a": (3, 4)}),
    "embedding": (lambda t: project(embedding(t["e"], np.array([[0, 2], [2, 1]]))), {"e": (4, 3)}),
    "take_rows": (lambda t: project(take_rows(t["a"], np.array([2, 0, 2]))), {"a": (3, 4)}),
    "cross_entropy": (
        lambda t: cross_entropy_masked(t["z"], np.array([1, 4, 0]), np.array([True, False, True])),
        {"z": (3, 5)},
    ),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_operation_gradients(name):
    fn, shapes = CASES[name]
    r = np.random.default_rng(sorted(CASES).index(name))
    inputs = {k: r.normal(size=s) for k, s in shapes.items()}
    errors = check_gradients(fn, inputs, step=1e-3)
    assert max(errors.values()) <= TOL, errors


def tiny_decoder(mask_mode: str):
    cfg = mdl.DecoderConfig(
        vocab_size=9, num_layers=2, num_heads=2, d_model=8, d_k=4, d_ff=16, max_len=6, dropout=0.0, mask_mode=mask_mode, init_std=0.3
    )
    params = mdl.init_params(cfg, seed=7)
    # move layer-norm affine and biases off their trivial init so their gradients are exercised
    r = np.random.default_rng(8)
    for k, p in params.items():
        if k.endswith((".g", ".b")) or k.split(".")[-1].startswith("b"):
            p.data = (p.data + r.normal(0, 0.2, size=p.shape)).astype(np.float32)
    return cfg, params


def decoder_loss_fn(cfg, tokens, allow, targets, loss_mask):
    def fn(t):
        logits = mdl.forward(t, cfg, tokens, allow)
        return cross_entropy_masked(logits.reshape(-1, cfg.vocab_size), targets.reshape(-1), loss_mask.reshape(-1))

    return fn


@pytest.mark.parametrize("mask_mode", ["temporal", "positional"])
def test_tiny_decoder_gradients(mask_mode):
    cfg, params = tiny_decoder(mask_mode)
    tokens = np.array([[3, 4, 1, 5, 6, 1]])
    times = np.array([[10, 30, 30, 20, 40, 40]])
    users = np.array([[1, 1, 1, 2, 2, 2]])
    allow = mdl.temporal_mask(times, users) if mask_mode == "temporal" else mdl.positional_mask(users)
    targets = np.array([[4, 1, 5, 6, 1, 0]])
    loss_mask = np.array([[True, False, False, True, False, False]])
    inputs = {k: p.data for k, p in params.items()}
    fn = decoder_loss_fn(cfg, tokens, allow, targets, loss_mask)
    analytic = analytic_gradients(fn, inputs)
    numeric = numeric_gradients(fn, inputs, step=1e-3)
    scale = max(float(np.abs(g).max()) for g in numeric.values())
    # softmax ignores a per-row shift, so key biases have an identically zero gradient
    for k in [k for k in inputs if k.endswith(".bk")]:
        assert np.abs(numeric[k]).max() <= 1e-6 * scale
        assert np.abs(analytic.pop(k)).max() <= 1e-6 * scale
    errors = {k: relative_error(analytic[k], numeric[k]) for k in analytic}
    assert len(errors) == len(inputs) - cfg.num_layers
    worst = max(errors, key=errors.get)
    assert errors[worst] <= TOL, (worst, errors[worst])


def test_relative_error_metric():
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert relative_error(np.array([1.1, 2.0]), np.array([1.0, 2.0])) == pytest.approx(0.05)
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
