from __future__ import annotations

import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from studyrec import model as mdl
from studyrec.corpus import OOV, PAD, SEP
from studyrec.numkernel import ContractError, ScheduleConfig, Tensor, backward, sum_, take_rows
from studyrec.pipeline import PAD_STUDENT, PipelineConfig, TokenizedHistory, collate, individual_epoch, pack_epoch

V = 24


def small_cfg(**kw) -> mdl.DecoderConfig:
    base = dict(vocab_size=V, num_layers=2, num_heads=2, d_model=16, d_k=8, d_ff=32, max_len=16, dropout=0.0)
    base.update(kw)
    return mdl.DecoderConfig(**base)


def allowed_sets(allow):
    return [set(np.flatnonzero(row).tolist()) for row in allow]


def logits_for(params, cfg, tokens, times, users, segpos=None):
    tokens, times, users = (np.asarray(a)[None, :] for a in (tokens, times, users))
    allow = mdl.temporal_mask(times, users) if cfg.mask_mode == "temporal" else mdl.positional_mask(users)
    return mdl.forward(params, cfg, tokens, allow, segpos).data[0]


# masks -----------------------------------------------------------------------------


def test_single_student_mask_is_lower_triangular():
    allow = mdl.temporal_mask([5, 6, 6, 9], [3, 3, 3, 3])
    np.testing.assert_array_equal(allow, np.tri(4, dtype=bool))


def test_interleaved_mask_example():
    allow = mdl.temporal_mask([1, 3, 2, 4], [1, 1, 2, 2])
    assert allowed_sets(allow) == [{0}, {0, 1, 2}, {0, 2}, {0, 1, 2, 3}]


def test_equal_cross_user_timestamps_are_mutually_blocked():
    allow = mdl.temporal_mask([5, 5], [1, 2])
    assert allowed_sets(allow) == [{0}, {1}]


def test_mask_contract_and_padding():
    with pytest.raises(ContractError):
        mdl.temporal_mask([1, 2, 3], [1, 1])
    allow = mdl.temporal_mask([1, 2, 0], [1, 2, PAD_STUDENT])
    assert allowed_sets(allow) == [{0}, {0, 1}, {2}]
    assert allowed_sets(mdl.positional_mask([1, 2, PAD_STUDENT])) == [{0}, {0, 1}, {2}]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 6)), min_size=1, max_size=12))
def test_mask_matches_rule_enumeration(pairs):
    users = [u for u, _ in pairs]
    times = [t for _, t in pairs]
    allow = mdl.temporal_mask(times, users)
    for i in range(len(pairs)):
        assert allow[i, i]
        for j in range(len(pairs)):
            rule = (users[i] == users[j] and j <= i) or (users[i] != users[j] and times[j] < times[i])
            assert allow[i, j] == rule


# forward --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def params():
    return mdl.init_params(small_cfg(init_std=0.3), seed=3)


def test_config_validation():
    with pytest.raises(mdl.ModelError):
        small_cfg(d_model=15)
    with pytest.raises(mdl.ModelError):
        small_cfg(mask_mode="bidirectional")
    with pytest.raises(mdl.ModelError):
        small_cfg(vocab_size=3)


def test_token_out_of_range(params):
    cfg = small_cfg()
    with pytest.raises(ContractError):
        logits_for(params, cfg, [3, V], [1, 2], [1, 1])
    with pytest.raises(ContractError):
        logits_for(params, cfg, [3] * 17, list(range(17)), [1] * 17)


def test_single_student_temporal_equals_positional(params):
    toks, times, users = [5, 7, 7, 9, 4], [10, 11, 11, 30, 31], [1] * 5
    a = logits_for(params, small_cfg(mask_mode="temporal"), toks, times, users)
    b = logits_for(params, small_cfg(mask_mode="positional"), toks, times, users)
    assert np.array_equal(a, b)


def random_point(rng, n=14, students=3):
    users = np.sort(rng.integers(1, students + 1, size=n))
    times = np.zeros(n, dtype=np.int64)
    for u in np.unique(users):
        idx = np.flatnonzero(users == u)
        times[idx] = np.sort(rng.integers(1, 12, size=len(idx)))
    return rng.integers(3, V, size=n), times, users


@pytest.mark.parametrize("positions", ["absolute", "segment"])
def test_no_anticausal_leakage_bit_exact(params, positions):
    cfg = small_cfg(positions=positions)
    rng = np.random.default_rng(0)
    for _ in range(20):
        toks, times, users = random_point(rng)
        segpos = mdl._runs(users)[None, :]
        base = logits_for(params, cfg, toks, times, users, segpos)
        allow = mdl.temporal_mask(times, users)
        for i in range(len(toks)):
            hidden = ~allow[i]
            if not hidden.any():
                continue
            other = toks.copy()
            other[hidden] = rng.integers(3, V, size=hidden.sum())
            assert np.array_equal(logits_for(params, cfg, other, times, users, segpos)[i], base[i])


def test_gradients_to_disallowed_inputs_are_exactly_zero(params):
    cfg = small_cfg()
    rng = np.random.default_rng(1)
    toks, times, users = random_point(rng)
    allow = mdl.temporal_mask(times, users)
    n = len(toks)
    for i in range(n):
        leaf = {}

        def hook(x):
            leaf["x"] = Tensor(x.data, requires_grad=True)
            return leaf["x"]

        out = mdl.forward(params, cfg, toks[None, :], allow[None], inputs_hook=hook)
        row = take_rows(out.reshape(n, V), np.array([i]))
        backward(sum_(row * Tensor(rng.normal(size=(1, V)))))
        g = np.abs(leaf["x"].grad[0]).sum(axis=1)
        assert np.all(g[~allow[i]] == 0.0)
        assert g[i] > 0
        for p in params.values():
            p.grad = None


def test_cross_user_information_flows(params):
    cfg = small_cfg()
    toks, times, users = np.array([5, 6, 7, 8]), [1, 3, 2, 4], [1, 1, 2, 2]
    base = logits_for(params, cfg, toks, times, users)
    other = toks.copy()
    other[2] = 15  # student 2 at t=2 is visible to student 1 at t=3
    changed = logits_for(params, cfg, other, times, users)
    assert not np.array_equal(base[1], changed[1])
    assert np.array_equal(base[0], changed[0])


@pytest.mark.parametrize("positions", ["none", "segment"])
def test_segment_order_does_not_matter_without_absolute_positions(params, positions):
    cfg = small_cfg(positions=positions)
    a = ([5, 6, 7, SEP], [1, 4, 6, 6], [1, 1, 1, 1])
    b = ([9, 10, SEP], [2, 5, 5], [2, 2, 2])

    def run(first, second):
        toks, times, users = (first[k] + second[k] for k in range(3))
        return logits_for(params, cfg, toks, times, users, mdl._runs(np.array(users))[None, :])

    ab, ba = run(a, b), run(b, a)
    np.testing.assert_allclose(ab[:4], ba[3:], rtol=0, atol=1e-5)
    np.testing.assert_allclose(ab[4:], ba[:3], rtol=0, atol=1e-5)


def test_segment_order_matters_with_absolute_positions(params):
    cfg = small_cfg(positions="absolute")
    ab = logits_for(params, cfg, [5, 6, SEP, 9, SEP], [1, 4, 4, 2, 2], [1, 1, 1, 2, 2])
    ba = logits_for(params, cfg, [9, SEP, 5, 6, SEP], [2, 2, 1, 4, 4], [2, 2, 1, 1, 1])
    assert not np.allclose(ab[:3], ba[2:])


def test_post_multiply_attention_leaks():
    # renormalising before masking lets blocked scores shift the allowed weights
    params = mdl.init_params(small_cfg(init_std=0.5), seed=4)
    cfg = small_cfg(attention="post-multiply")
    toks, times, users = np.array([5, 6, 7, 8]), [1, 3, 2, 4], [1, 1, 2, 2]
    base = logits_for(params, cfg, toks, times, users)
    other = toks.copy()
    other[3] = 20  # position 3 is invisible to position 1
    assert not np.array_equal(logits_for(params, cfg, other, times, users)[1], base[1])


def test_zero_params_give_uniform_logits():
    cfg = small_cfg()
    logits = logits_for(mdl.zero_params(cfg), cfg, [4, 5, 6], [1, 2, 3], [1, 1, 1])
    assert np.all(logits == logits[0, 0])


# training --------------------------------------------------------------------------


def chain_histories(n_students=40, n_items=20, length=12):
    rng = np.random.default_rng(0)
    out = []
    for s in range(1, n_students + 1):
        item = int(rng.integers(3, 3 + n_items))
        out.append(TokenizedHistory(s, 1 + s % 4, 1, 1, (item,) * length, tuple(range(100 + s, 100 + s + 3 * length, 3))))
    return out


def make_stream(cfg, histories, batch_size=16, seed=0):
    pcfg = PipelineConfig(context_length=cfg.max_len, segment_length=cfg.max_len)
    return mdl.batch_stream(lambda e: pack_epoch(histories, pcfg, e), batch_size, cfg.max_len, seed)


def test_repeat_chain_is_learned():
    cfg = small_cfg(max_len=26, vocab_size=3 + 20)
    params = mdl.init_params(cfg, seed=0)
    sched = ScheduleConfig(peak_rate=0.01, warmup_steps=50, total_steps=500)
    _, trace = mdl.train(params, cfg, make_stream(cfg, chain_histories()), sched, mdl.TrainConfig(steps=500, batch_size=16))
    assert len(trace) == 500
    assert np.mean([r.loss for r in trace[-10:]]) < 0.1


def test_zero_steps_leave_params():
    cfg = small_cfg(max_len=26)
    params = mdl.init_params(cfg, seed=1)
    before = {k: v.data.copy() for k, v in params.items()}
    _, trace = mdl.train(params, cfg, make_stream(cfg, chain_histories()), ScheduleConfig(0.01, 10), mdl.TrainConfig(steps=0))
    assert trace == []
    assert all(np.array_equal(before[k], params[k].data) for k in before)


def test_training_is_deterministic_with_dropout():
    cfg = small_cfg(max_len=26, dropout=0.1)

    def run():
        params = mdl.init_params(cfg, seed=2)
        _, trace = mdl.train(params, cfg, make_stream(cfg, chain_histories()), ScheduleConfig(0.01, 5), mdl.TrainConfig(steps=15, seed=4))
        return [r.loss for r in trace], params

    (a, pa), (b, pb) = run(), run()
    assert a == b
    assert all(np.array_equal(pa[k].data, pb[k].data) for k in pa)


def test_divergence_aborts_with_trace():
    cfg = small_cfg(max_len=26)
    params = mdl.init_params(cfg, seed=1)
    stream = make_stream(cfg, chain_histories())
    params["l1.w1"].data[0, 0] = np.nan
    with pytest.raises(mdl.TrainingDivergedError) as info:
        mdl.train(params, cfg, stream, ScheduleConfig(0.01, 5), mdl.TrainConfig(steps=3))
    assert info.value.trace == []


def test_trace_csv(tmp_path):
    rows = [mdl.TraceRow(1, 0.001, 3.5), mdl.TraceRow(2, 0.002, 3.25)]
    mdl.write_trace(tmp_path / "t.csv", rows)
    with open(tmp_path / "t.csv") as fh:
        got = list(csv.DictReader(fh))
    assert [(int(r["step"]), float(r["lr"]), float(r["loss"])) for r in got] == [(1, 0.001, 3.5), (2, 0.002, 3.25)]


def test_batch_loss_uses_loss_mask_only(params):
    cfg = small_cfg(max_len=26)
    p = mdl.init_params(cfg, seed=5)
    points = individual_epoch(chain_histories(4, length=5), PipelineConfig(context_length=26, segment_length=26))
    batch = collate(points, 26)
    full = float(mdl.batch_loss(p, cfg, batch).data)
    logits = mdl.batch_logits(p, cfg, batch)
    z = logits[batch.loss_mask]
    t = batch.targets[batch.loss_mask]
    z = z - z.max(axis=1, keepdims=True)
    oracle = -np.mean(z[np.arange(len(t)), t] - np.log(np.exp(z).sum(axis=1)))
    assert full == pytest.approx(oracle, abs=1e-5)


# ranking ----------------------------------------------------------------------------


def test_rank_tokens_excludes_pad_and_sep_and_keeps_oov():
    scores = np.array([9.0, 8.0, 0.5, 0.1, 2.0, 0.5])
    assert mdl.rank_tokens(scores).tolist() == [4, 2, 5, 3]
    assert mdl.target_rank(scores, OOV) == 2


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=5, max_size=30))
def test_ranking_matches_sort_oracle(values):
    scores = np.asarray(values, dtype=np.float64)
    cand = [OOV] + list(range(3, len(scores)))
    oracle = sorted(cand, key=lambda t: (-scores[t], t))
    ranking = mdl.rank_tokens(scores).tolist()
    assert ranking == oracle
    targets = np.array(cand)
    ranks = mdl.target_ranks(np.tile(scores, (len(cand), 1)), targets)
    assert ranks.tolist() == [oracle.index(t) + 1 for t in cand]
    assert [mdl.target_rank(scores, t) for t in cand] == ranks.tolist()


def test_predict_topn(params):
    cfg = small_cfg()
    pop = np.arange(V)[::-1].astype(float)
    full = mdl.predict_topn(params, cfg, [5, 6, 7], V, pop)
    assert sorted(full) == [OOV] + list(range(3, V))
    assert PAD not in full and SEP not in full
    top = mdl.predict_topn(params, cfg, [5, 6, 7], 3, pop)
    assert top == full[:3]
    logits = logits_for(params, cfg, [5, 6, 7], [1, 2, 3], [0, 0, 0])[-1]
    assert top[0] == int(mdl.rank_tokens(logits)[0])
    # cold start ranks by popularity: OOV (count V-3) leads, then tokens 3, 4, ...
    assert mdl.predict_topn(params, cfg, [], 3, pop) == [OOV, 3, 4]
    with pytest.raises(mdl.ModelError):
        mdl.predict_topn(params, cfg, [5], V + 1, pop)


# persistence ----------------------------------------------------------------------------


def test_model_round_trip(tmp_path, params):
    cfg = small_cfg(init_std=0.3)
    mdl.save_model(tmp_path / "m.ckpt", params, cfg)
    assert (tmp_path / "m.ckpt.config").exists()
    back, cfg2 = mdl.load_model(tmp_path / "m.ckpt")
    assert cfg2 == cfg
    assert all(np.array_equal(back[k].data, params[k].data) for k in params)
    toks, times, users = [5, 6, 7], [1, 2, 3], [1, 1, 1]
    assert np.array_equal(logits_for(back, cfg2, toks, times, users), logits_for(params, cfg, toks, times, users))
