"""Decoder-only transformer over packed interaction sequences.

Two attention masks are supported. ``positional`` is the usual causal mask
(position i sees positions j <= i). ``temporal`` lets position i see its own
student's positions j <= i plus any other student's positions whose timestamp
is strictly earlier than i's. Padding positions only see themselves and are
never seen.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import config as cfgmod
from .corpus import OOV, PAD, SEP
from .numkernel import (
    AdamState,
    ContractError,
    NonFiniteError,
    ScheduleConfig,
    Tensor,
    adam_step,
    backward,
    cross_entropy_masked,
    dropout,
    embedding,
    gelu,
    layer_norm,
    linear,
    load_checkpoint,
    lr_schedule,
    masked_softmax,
    matmul,
    mul,
    no_grad,
    save_checkpoint,
    softmax,
    take_rows,
    transpose,
)
from .numkernel.optim import PoisonedGradientError
from .pipeline import PAD_STUDENT, Batch, DataPoint, collate

log = logging.getLogger(__name__)

MASK_MODES = ("temporal", "positional")
ATTENTION_MODES = ("additive", "post-multiply")
POSITION_MODES = ("absolute", "segment", "none")


class ModelError(Exception):
    pass


class TrainingDivergedError(ModelError):
    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int
    num_layers: int = 2
    num_heads: int = 4
    d_model: int = 128
    d_k: int = 32
    d_ff: int = 512
    max_len: int = 65
    mask_mode: str = "temporal"
    dropout: float = 0.1
    attention: str = "additive"
    positions: str = "absolute"
    ln_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ModelError("vocab_size must cover PAD/SEP/OOV and at least one item")
        if self.d_model != self.num_heads * self.d_k:
            raise ModelError("d_model must equal num_heads * d_k")
        if self.mask_mode not in MASK_MODES:
            raise ModelError(f"unknown mask mode {self.mask_mode!r}")
        if self.attention not in ATTENTION_MODES:
            raise ModelError(f"unknown attention mode {self.attention!r}")
        if self.positions not in POSITION_MODES:
            raise ModelError(f"unknown position mode {self.positions!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must lie in [0, 1)")


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------


def temporal_mask(timestamps, students) -> np.ndarray:
    """Boolean attention permission; entry [..., i, j] means i may attend to j.

    Inputs are aligned per position (optionally batched on leading axes);
    padding positions carry student id ``PAD_STUDENT``.
    """
    t = np.asarray(timestamps)
    u = np.asarray(students)
    if t.shape != u.shape:
        raise ContractError(f"timestamps {t.shape} and students {u.shape} are misaligned")
    n = t.shape[-1]
    same = u[..., :, None] == u[..., None, :]
    causal = np.tri(n, dtype=bool)
    earlier = t[..., None, :] < t[..., :, None]
    allow = (same & causal) | (~same & earlier)
    return _isolate_padding(allow, u == PAD_STUDENT)


def positional_mask(students) -> np.ndarray:
    u = np.asarray(students)
    n = u.shape[-1]
    allow = np.broadcast_to(np.tri(n, dtype=bool), u.shape + (n,)).copy()
    return _isolate_padding(allow, u == PAD_STUDENT)


def _isolate_padding(allow: np.ndarray, pad: np.ndarray) -> np.ndarray:
    n = pad.shape[-1]
    allow &= ~pad[..., None, :]
    allow &= ~pad[..., :, None]
    allow |= np.eye(n, dtype=bool) & pad[..., :, None]
    return allow


def batch_mask(batch: Batch, mode: str) -> np.ndarray:
    if mode == "temporal":
        return temporal_mask(batch.timestamps, batch.students)
    if mode == "positional":
        return positional_mask(batch.students)
    raise ModelError(f"unknown mask mode {mode!r}")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def init_params(cfg: DecoderConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, f = cfg.d_model, cfg.d_ff

    def w(*shape):
        return Tensor(rng.normal(0.0, cfg.init_std, size=shape), requires_grad=True)

    def const(value, *shape):
        return Tensor(np.full(shape, value), requires_grad=True)

    params = {"tok_emb": w(cfg.vocab_size, d), "pos_emb": w(cfg.max_len, d)}
    # residual-branch outputs get a depth-scaled init
    out_scale = 1.0 / math.sqrt(2 * cfg.num_layers)
    for i in range(cfg.num_layers):
        p = f"l{i}."
        params[p + "ln1.g"] = const(1.0, d)
        params[p + "ln1.b"] = const(0.0, d)
        for name in ("wq", "wk", "wv"):
            params[p + name] = w(d, d)
            params[p + "b" + name[1]] = const(0.0, d)
        params[p + "wo"] = Tensor(rng.normal(0.0, cfg.init_std * out_scale, size=(d, d)), requires_grad=True)
        params[p + "bo"] = const(0.0, d)
        params[p + "ln2.g"] = const(1.0, d)
        params[p + "ln2.b"] = const(0.0, d)
        params[p + "w1"] = w(d, f)
        params[p + "b1"] = const(0.0, f)
        params[p + "w2"] = Tensor(rng.normal(0.0, cfg.init_std * out_scale, size=(f, d)), requires_grad=True)
        params[p + "b2"] = const(0.0, d)
    params["lnf.g"] = const(1.0, d)
    params["lnf.b"] = const(0.0, d)
    for name, t in params.items():
        t.name = name
    return params


def zero_params(cfg: DecoderConfig) -> dict[str, Tensor]:
    params = init_params(cfg, 0)
    for t in params.values():
        t.data = np.zeros_like(t.data)
    return params


def cast_params(params: dict[str, Tensor], dtype) -> dict[str, Tensor]:
    return {k: Tensor(v.data, requires_grad=v.requires_grad, dtype=dtype, name=k) for k, v in params.items()}


def param_arrays(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in params.items()}


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def _position_ids(batch_shape, cfg: DecoderConfig, segment_positions: np.ndarray | None) -> np.ndarray | None:
    if cfg.positions == "none":
        return None
    if cfg.positions == "segment":
        if segment_positions is None:
            raise ModelError("segment positions required for positions='segment'")
        return segment_positions
    b, n = batch_shape
    return np.broadcast_to(np.arange(n), (b, n))


def hidden_states(
    params: dict[str, Tensor],
    cfg: DecoderConfig,
    tokens: np.ndarray,
    allow: np.ndarray,
    segment_positions: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    inputs_hook: Callable[[Tensor], Tensor] | None = None,
) -> Tensor:
    """Final-layer-normed hidden states, shape (B, T, d_model).

    ``rng`` enables dropout (training only). ``inputs_hook`` sees the summed
    token+position embeddings and may return a replacement (used to take
    gradients with respect to inputs).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ContractError("tokens must be (batch, length)")
    b, n = tokens.shape
    if n > cfg.max_len:
        raise ContractError(f"sequence length {n} exceeds max_len {cfg.max_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ContractError("token id out of range")
    allow = np.asarray(allow, dtype=bool)
    if allow.shape != (b, n, n):
        raise ContractError(f"mask shape {allow.shape} != {(b, n, n)}")

    h, dk, d = cfg.num_heads, cfg.d_k, cfg.d_model
    drop = cfg.dropout if rng is not None else 0.0
    x = embedding(params["tok_emb"], tokens)
    pos = _position_ids((b, n), cfg, segment_positions)
    if pos is not None:
        x = x + embedding(params["pos_emb"], pos)
    if inputs_hook is not None:
        x = inputs_hook(x)
    x = dropout(x, drop, rng)
    head_mask = allow[:, None, :, :]
    scale = 1.0 / math.sqrt(dk)
    for i in range(cfg.num_layers):
        p = f"l{i}."
        y = layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"], cfg.ln_eps)
        q = linear(y, params[p + "wq"], params[p + "bq"]).reshape(b, n, h, dk).transpose(0, 2, 1, 3)
        k = linear(y, params[p + "wk"], params[p + "bk"]).reshape(b, n, h, dk).transpose(0, 2, 3, 1)
        v = linear(y, params[p + "wv"], params[p + "bv"]).reshape(b, n, h, dk).transpose(0, 2, 1, 3)
        scores = mul(matmul(q, k), scale)
        if cfg.attention == "additive":
            att = masked_softmax(scores, head_mask)
        else:
            att = mul(softmax(scores), Tensor(np.broadcast_to(head_mask, scores.shape), dtype=scores.dtype))
        o = matmul(att, v).transpose(0, 2, 1, 3).reshape(b, n, d)
        x = x + dropout(linear(o, params[p + "wo"], params[p + "bo"]), drop, rng)
        y = layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"], cfg.ln_eps)
        ff = linear(gelu(linear(y, params[p + "w1"], params[p + "b1"])), params[p + "w2"], params[p + "b2"])
        x = x + dropout(ff, drop, rng)
    return layer_norm(x, params["lnf.g"], params["lnf.b"], cfg.ln_eps)


def project(params: dict[str, Tensor], hidden: Tensor) -> Tensor:
    """Vocabulary logits through the tied embedding table."""
    return matmul(hidden, transpose(params["tok_emb"]))


def forward(
    params: dict[str, Tensor],
    cfg: DecoderConfig,
    tokens: np.ndarray,
    allow: np.ndarray,
    segment_positions: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    inputs_hook: Callable[[Tensor], Tensor] | None = None,
) -> Tensor:
    """Next-token logits, shape (B, T, vocab_size)."""
    return project(params, hidden_states(params, cfg, tokens, allow, segment_positions, rng, inputs_hook))


def batch_logits(params: dict[str, Tensor], cfg: DecoderConfig, batch: Batch) -> np.ndarray:
    with no_grad():
        allow = batch_mask(batch, cfg.mask_mode)
        return forward(params, cfg, batch.tokens, allow, batch.segment_positions).data


def batch_loss(
    params: dict[str, Tensor], cfg: DecoderConfig, batch: Batch, rng: np.random.Generator | None = None
) -> Tensor:
    """Masked next-token cross entropy; only loss positions reach the output projection."""
    allow = batch_mask(batch, cfg.mask_mode)
    hid = hidden_states(params, cfg, batch.tokens, allow, batch.segment_positions, rng)
    b, n = batch.shape
    rows = np.flatnonzero(batch.loss_mask.reshape(-1))
    flat = hid.reshape(b * n, cfg.d_model)
    logits = project(params, take_rows(flat, rows))
    targets = batch.targets.reshape(-1)[rows]
    return cross_entropy_masked(logits, targets, np.ones(len(rows), dtype=bool))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3500
    batch_size: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    log_every: int = 100


@dataclass(frozen=True)
class TraceRow:
    step: int
    lr: float
    loss: float


def batch_stream(
    epoch_points: Callable[[int], Sequence[DataPoint]],
    batch_size: int,
    length: int,
    seed: int,
) -> Iterator[Batch]:
    """Endless batches; epoch ``e`` is ``epoch_points(e)`` in a seeded shuffled order."""
    epoch = 0
    pending: list[DataPoint] = []
    while True:
        points = list(epoch_points(epoch))
        if not points:
            raise ModelError("epoch produced no datapoints")
        order = np.random.default_rng(np.random.SeedSequence([seed, 7, epoch])).permutation(len(points))
        pending.extend(points[i] for i in order)
        while len(pending) >= batch_size:
            chunk, pending = pending[:batch_size], pending[batch_size:]
            yield collate(chunk, length)
        epoch += 1


def train(
    params: dict[str, Tensor],
    cfg: DecoderConfig,
    stream: Iterator[Batch],
    schedule: ScheduleConfig,
    train_cfg: TrainConfig,
    on_step: Callable[[TraceRow], None] | None = None,
) -> tuple[dict[str, Tensor], list[TraceRow]]:
    """Run ``train_cfg.steps`` Adam steps; returns the params and a per-step loss trace."""
    state = AdamState(beta1=train_cfg.beta1, beta2=train_cfg.beta2, eps=train_cfg.eps)
    rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 11]))
    trace: list[TraceRow] = []
    for step in range(1, train_cfg.steps + 1):
        batch = next(stream)
        rate = lr_schedule(step, schedule)
        for p in params.values():
            p.grad = None
        try:
            loss = batch_loss(params, cfg, batch, rng if cfg.dropout > 0 else None)
            backward(loss)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            adam_step(params, grads, state, rate)
        except (NonFiniteError, PoisonedGradientError) as exc:
            raise TrainingDivergedError(f"training diverged at step {step}: {exc}", trace) from exc
        row = TraceRow(step, rate, float(loss.data))
        trace.append(row)
        if on_step is not None:
            on_step(row)
        if train_cfg.log_every and step % train_cfg.log_every == 0:
            log.info("step %d lr %.5f loss %.4f", step, rate, row.loss)
    for p in params.values():
        p.grad = None
    return params, trace


def write_trace(path: str | os.PathLike, trace: Sequence[TraceRow]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "lr", "loss"])
        for row in trace:
            writer.writerow([row.step, repr(row.lr), repr(row.loss)])
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# ranking
# ---------------------------------------------------------------------------


def rankable_tokens(vocab_size: int) -> np.ndarray:
    """OOV plus all item tokens; PAD and SEP never appear in a ranking."""
    return np.concatenate([[OOV], np.arange(3, vocab_size)])


def rank_tokens(scores: np.ndarray) -> np.ndarray:
    """Rankable token ids ordered by descending score, ties to the smaller id."""
    cand = rankable_tokens(len(scores))
    order = np.lexsort((cand, -scores[cand]))
    return cand[order]


def target_rank(scores: np.ndarray, target: int) -> int:
    """1-based rank of ``target`` under :func:`rank_tokens` ordering."""
    s = scores.copy()
    s[PAD] = -np.inf
    s[SEP] = -np.inf
    st = s[target]
    ids = np.arange(len(s))
    better = (s > st) | ((s == st) & (ids < target))
    better[[PAD, SEP]] = False
    return int(better.sum()) + 1


def target_ranks(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorised :func:`target_rank` over rows of ``scores``."""
    s = np.array(scores, dtype=np.float64, copy=True)
    s[:, [PAD, SEP]] = -np.inf
    rows = np.arange(len(targets))
    st = s[rows, targets][:, None]
    ids = np.arange(s.shape[1])[None, :]
    better = (s > st) | ((s == st) & (ids < targets[:, None]))
    better[:, [PAD, SEP]] = False
    return better.sum(axis=1) + 1


def popularity_scores(counts: np.ndarray) -> np.ndarray:
    """Scores whose ranking is by descending count, ties by token id."""
    return np.asarray(counts, dtype=np.float64)


def predict_topn(
    params: dict[str, Tensor],
    cfg: DecoderConfig,
    tokens: Sequence[int],
    n: int,
    popularity: np.ndarray,
    timestamps: Sequence[int] | None = None,
    students: Sequence[int] | None = None,
) -> list[int]:
    """Top-``n`` tokens for the position after ``tokens``.

    An empty context falls back to ``popularity`` (counts per token id).
    Long contexts keep their last ``max_len`` positions.
    """
    if not 1 <= n <= cfg.vocab_size:
        raise ModelError(f"n must lie in [1, {cfg.vocab_size}]")
    if len(tokens) == 0:
        return rank_tokens(popularity_scores(popularity))[:n].tolist()
    toks = np.asarray(tokens, dtype=np.int64)[-cfg.max_len :][None, :]
    m = toks.shape[1]
    ts = np.arange(1, m + 1) if timestamps is None else np.asarray(timestamps)[-cfg.max_len :]
    us = np.zeros(m, dtype=np.int64) if students is None else np.asarray(students)[-cfg.max_len :]
    batch = Batch(
        tokens=toks,
        timestamps=ts[None, :],
        students=us[None, :],
        offsets=np.zeros_like(toks),
        loss_mask=np.zeros_like(toks, dtype=bool),
        targets=np.zeros_like(toks),
        segment_positions=_runs(us)[None, :],
    )
    logits = batch_logits(params, cfg, batch)[0, -1]
    return rank_tokens(logits)[:n].tolist()


def _runs(students: np.ndarray) -> np.ndarray:
    out = np.zeros(len(students), dtype=np.int64)
    for i in range(1, len(students)):
        out[i] = 0 if students[i] != students[i - 1] else out[i - 1] + 1
    return out


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_model(path: str | os.PathLike, params: dict[str, Tensor], cfg: DecoderConfig) -> None:
    """Write the checkpoint and a ``.config`` key-value sidecar next to it."""
    path = Path(path)
    save_checkpoint(path, param_arrays(params))
    cfgmod.write_sections(path.with_suffix(path.suffix + ".config"), {"decoder": cfgmod.to_mapping(cfg)})


def load_model(path: str | os.PathLike) -> tuple[dict[str, Tensor], DecoderConfig]:
    path = Path(path)
    sidecar = path.with_suffix(path.suffix + ".config")
    cfg = cfgmod.from_mapping(DecoderConfig, cfgmod.read_sections(sidecar)["decoder"])
    arrays = load_checkpoint(path)
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    return params, cfg
