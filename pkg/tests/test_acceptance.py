"""Acceptance suite: one test group per criterion, each tagged ``criterion(n)``.

Criteria 6 and 7 train three models per seed on a 4,000-student cohort and
take roughly 40 minutes on one CPU core.
"""

from __future__ import annotations

import dataclasses
import math
import time
from pathlib import Path

import numpy as np
import pytest

from studyrec import cli, evalharness, experiment, knnrec, synthgen
from studyrec import model as mdl
from studyrec import pipeline as pl
from studyrec.corpus import build_vocab, split
from studyrec.experiment import ExperimentConfig
from studyrec.numkernel import ScheduleConfig, Tensor, backward, check_gradients, lr_schedule, sum_, take_rows

ROOT = Path(__file__).resolve().parents[1]
SMOKE = ROOT / "configs" / "smoke.ini"
SOCIAL = ROOT / "configs" / "social.ini"
SEEDS = (0, 1, 2)


def detail(record_property, text: str) -> None:
    record_property("detail", text)


# shared desk-scale setup for criteria 1 and 2 ---------------------------------------------


@pytest.fixture(scope="module")
def desk():
    cfg = synthgen.CohortConfig(num_districts=1, schools_per_district=2, classrooms_per_school=5, students_per_classroom=20, catalog_size=400, seed=3)
    bundle = synthgen.generate(cfg)
    vocab = build_vocab(split(bundle).train.interactions(), 300)
    histories = pl.tokenize(bundle, vocab)
    dcfg = mdl.DecoderConfig(vocab_size=vocab.num_tokens, dropout=0.0, init_std=0.1)  # 2 layers, d_model 128
    return histories, dcfg, mdl.init_params(dcfg, seed=0)


def coarse_points(rng, count, vocab_size, n=65):
    """Random multi-student datapoints on a coarse clock so cross-student ties are common."""
    out = []
    for _ in range(count):
        users = np.sort(rng.integers(0, 5, size=n))
        times = np.zeros(n, dtype=np.int64)
        for u in np.unique(users):
            idx = np.flatnonzero(users == u)
            times[idx] = np.sort(rng.integers(1, 8, size=len(idx)))
        length = int(rng.integers(n // 2, n + 1))
        toks = rng.integers(2, vocab_size, size=length)
        out.append(pl.DataPoint(tuple(toks), tuple(times[:length]), tuple(users[:length]), tuple(range(length)), (False,) * length))
    return out


def leakage_points(desk):
    histories, dcfg, _ = desk
    points = []
    for sep in ("end", "start"):
        pcfg = pl.PipelineConfig(separator=sep, segment_length=20)
        points += [p for p in pl.pack_epoch(histories, pcfg, 0) if len(set(p.students)) > 1][:50]
    points += coarse_points(np.random.default_rng(5), 20, dcfg.vocab_size)
    return points


# criterion 1 ---------------------------------------------------------------------------------


@pytest.mark.criterion(1)
def test_c1_perturbing_disallowed_positions_is_bit_exact(desk, record_property):
    start = time.time()
    _, dcfg, params = desk
    rng = np.random.default_rng(0)
    points = leakage_points(desk)
    assert len(points) >= 100
    checked = 0
    for dp in points:
        batch = pl.collate([dp], dcfg.max_len)
        allow = mdl.temporal_mask(batch.timestamps, batch.students)[0]
        n = len(dp)
        base = mdl.forward(params, dcfg, batch.tokens, allow[None]).data[0]
        # one perturbed copy per observed position, all disallowed tokens redrawn
        variants = np.repeat(batch.tokens, n, axis=0)
        for i in range(n):
            hidden = ~allow[i]
            variants[i, hidden] = rng.integers(2, dcfg.vocab_size, size=hidden.sum())
        out = mdl.forward(params, dcfg, variants, np.repeat(allow[None], n, axis=0)).data
        for i in range(n):
            assert np.array_equal(out[i, i], base[i]), f"leak into position {i}"
            checked += 1
    elapsed = time.time() - start
    detail(record_property, f"{len(points)} datapoints, {checked} positions bit-identical ({elapsed:.0f}s)")
    assert elapsed < 120


@pytest.mark.criterion(1)
def test_c1_gradients_to_disallowed_embeddings_are_zero(desk, record_property):
    start = time.time()
    _, dcfg, params = desk
    rng = np.random.default_rng(1)
    points = leakage_points(desk)
    checked = 0
    for dp in points:
        batch = pl.collate([dp], dcfg.max_len)
        allow = mdl.temporal_mask(batch.timestamps, batch.students)[0]
        n = len(dp)
        for i in rng.choice(n, size=2, replace=False):
            leaf = {}

            def hook(x):
                leaf["x"] = Tensor(x.data, requires_grad=True)
                return leaf["x"]

            logits = mdl.forward(params, dcfg, batch.tokens, allow[None], inputs_hook=hook)
            row = take_rows(logits.reshape(dcfg.max_len, dcfg.vocab_size), np.array([i]))
            backward(sum_(row * Tensor(rng.normal(size=(1, dcfg.vocab_size)))))
            grad = leaf["x"].grad[0]
            assert np.all(grad[~allow[i]] == 0.0)
            assert np.any(grad[i] != 0.0)
            for p in params.values():
                p.grad = None
            checked += 1
    elapsed = time.time() - start
    detail(record_property, f"{checked} logit rows with exactly zero gradient to blocked embeddings ({elapsed:.0f}s)")
    assert elapsed < 120


# criterion 2 ---------------------------------------------------------------------------------


@pytest.mark.criterion(2)
def test_c2_single_student_masks_agree_bit_exact(desk, record_property):
    histories, dcfg, params = desk
    pdcfg = dataclasses.replace(dcfg, mask_mode="positional")
    points = pl.individual_epoch(histories[:60], pl.PipelineConfig())
    for dp in points:
        batch = pl.collate([dp], dcfg.max_len)
        a = mdl.batch_logits(params, dcfg, batch)
        b = mdl.batch_logits(params, pdcfg, batch)
        assert np.array_equal(a, b)
    detail(record_property, f"{len(points)} single-student datapoints identical under both masks")


@pytest.mark.criterion(2)
def test_c2_interleaved_students_influence_each_other(desk, record_property):
    _, dcfg, params = desk
    toks = np.array([[5, 6, 7, 8, 1, 9, 10, 11, 12, 1]])
    times = np.array([[10, 30, 50, 70, 70, 20, 40, 60, 80, 80]])
    users = np.array([[1, 1, 1, 1, 1, 2, 2, 2, 2, 2]])
    allow = mdl.temporal_mask(times, users)
    base = mdl.forward(params, dcfg, toks, allow).data[0]
    changed = toks.copy()
    changed[0, 5] = 40  # student 2 at t=20 is earlier than student 1 at t=30
    moved = mdl.forward(params, dcfg, changed, allow).data[0]
    delta = float(np.abs(moved[1] - base[1]).max())
    assert delta > 0.0
    assert np.array_equal(moved[0], base[0])  # t=10 precedes the change
    detail(record_property, f"peer change moves later logits by up to {delta:.2e}")


# criterion 3 ---------------------------------------------------------------------------------


@pytest.mark.criterion(3)
def test_c3_finite_difference_gradients(record_property):
    from test_gradcheck import CASES, decoder_loss_fn, tiny_decoder  # same checks as the unit suite

    start = time.time()
    worst = 0.0
    for name, (fn, shapes) in sorted(CASES.items()):
        r = np.random.default_rng(sorted(CASES).index(name))
        errs = check_gradients(fn, {k: r.normal(size=s) for k, s in shapes.items()})
        worst = max(worst, max(errs.values()))
    from studyrec.numkernel.gradcheck import analytic_gradients, numeric_gradients, relative_error

    for mode in ("temporal", "positional"):
        cfg, params = tiny_decoder(mode)
        tokens = np.array([[3, 4, 1, 5, 6, 1]])
        times = np.array([[10, 30, 30, 20, 40, 40]])
        users = np.array([[1, 1, 1, 2, 2, 2]])
        allow = mdl.temporal_mask(times, users) if mode == "temporal" else mdl.positional_mask(users)
        fn = decoder_loss_fn(cfg, tokens, allow, np.array([[4, 1, 5, 6, 1, 0]]), np.array([[True, False, False, True, False, False]]))
        inputs = {k: p.data for k, p in params.items()}
        a, n = analytic_gradients(fn, inputs), numeric_gradients(fn, inputs)
        scale = max(float(np.abs(g).max()) for g in n.values())
        for k in inputs:
            if k.endswith(".bk"):
                # a per-row shift before softmax has no effect: this gradient is identically zero
                assert np.abs(a[k]).max() <= 1e-6 * scale and np.abs(n[k]).max() <= 1e-6 * scale
            else:
                worst = max(worst, relative_error(a[k], n[k]))
    elapsed = time.time() - start
    detail(record_property, f"{len(CASES)} operations + 2-layer decoder, max relative error {worst:.2e} ({elapsed:.0f}s)")
    assert worst <= 1e-3
    assert elapsed < 300


# criterion 4 ---------------------------------------------------------------------------------


@pytest.mark.criterion(4)
def test_c4_inverted_index_equals_brute_force(record_property):
    start = time.time()
    rng = np.random.default_rng(42)
    vocab = 300
    vectors, targets = [], []
    for _ in range(5000):
        k = int(rng.integers(1, 9))
        toks = rng.choice(np.arange(2, vocab), size=k, replace=False)
        vectors.append({int(t): int(rng.integers(1, 5)) for t in toks})
        targets.append(int(rng.integers(2, vocab)))
    idx = knnrec.index_from_vectors(vectors, targets, vocab, rng.integers(0, 20, size=vocab), h=65)
    for _ in range(1000):
        k = int(rng.integers(0, 9))
        toks = rng.choice(np.arange(2, vocab), size=k, replace=False)
        q = {int(t): int(rng.integers(1, 5)) for t in toks}
        assert knnrec.score(idx, q) == knnrec.brute_force_ranking(idx, q)
    elapsed = time.time() - start
    detail(record_property, f"1000 queries over 5000 vectors identical to dense oracle ({elapsed:.0f}s)")
    assert elapsed < 60


# criterion 5 ---------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def knn_run():
    cfg = ExperimentConfig.load(SMOKE)
    prep = experiment.prepare(cfg, synthgen.generate(cfg.cohort))
    events, rep = experiment.evaluate(prep, evalharness.KnnRecommender(experiment.build_knn(prep, cfg)), cfg)
    return cfg, prep, events, rep


@pytest.mark.criterion(5)
def test_c5_monotone_and_nested_on_a_real_run(knn_run, record_property):
    cfg, prep, events, rep = knn_run
    slices = experiment.slice_reports(prep, events, "knn", cfg)
    reports = [rep] + [r for sl in slices for r in sl.reports.values()]
    for r in reports:
        for subset in evalharness.SUBSETS:
            vals = [r.get(subset, n).mean for n in evalharness.CUTOFFS]
            if not math.isnan(vals[0]):
                assert all(a <= b for a, b in zip(vals, vals[1:]))
    by_student: dict[int, dict[str, set]] = {}
    for r in events.events:
        d = by_student.setdefault(r.event.student_id, {s: set() for s in evalharness.SUBSETS})
        for s in evalharness.SUBSETS:
            if r.event.in_subset(s):
                d[s].add(r.event.position)
    for d in by_student.values():
        assert d["novel"] <= d["non_continuation"] <= d["all"]
    detail(record_property, f"monotone over {len(reports)} reports; nesting over {len(by_student)} students")


@pytest.mark.criterion(5)
def test_c5_weighting_example_exact(record_property):
    def ev(sid, k):
        return evalharness.EvalEvent(sid, k, k + 1, 3, False, False)

    events = [evalharness.RankedEvent(ev(1, k), 1) for k in range(100)] + [evalharness.RankedEvent(ev(2, 0), 9)]
    value = evalharness.hits_at_n(events, 1).mean
    detail(record_property, f"100-event vs 1-event student -> {value}")
    assert value == 50.0


@pytest.mark.criterion(5)
def test_c5_bootstrap_deterministic(knn_run, record_property):
    cfg, prep, events, rep = knn_run
    again = evalharness.report(events, "knn", resamples=cfg.eval.resamples, seed=cfg.seed)
    assert evalharness.reports_csv([again]) == evalharness.reports_csv([rep])
    other = evalharness.report(events, "knn", resamples=cfg.eval.resamples, seed=cfg.seed + 1)
    assert [r.mean for r in other.rows] == [r.mean for r in rep.rows]
    detail(record_property, "bootstrap intervals identical under a fixed seed")


# criteria 6 and 7 ----------------------------------------------------------------------------


def cumming_adjacent(a: evalharness.MetricRow, b: evalharness.MetricRow) -> tuple[bool, float]:
    """Intervals count as adjacent when they overlap by at most half the average margin of error."""
    overlap = min(a.ci_high, b.ci_high) - max(a.ci_low, b.ci_low)
    margin = ((a.ci_high - a.ci_low) + (b.ci_high - b.ci_low)) / 4.0
    return overlap <= 0.5 * margin, overlap


@pytest.fixture(scope="module")
def social_runs():
    base = ExperimentConfig.load(SOCIAL)
    runs = {}
    for seed in SEEDS:
        cfg = base.with_seed(seed)
        prep = experiment.prepare(cfg, synthgen.generate(cfg.cohort))
        low = [s for s, i in prep.info.items() if i.eval_interactions < 10]
        single = dataclasses.replace(cfg, pipeline=dataclasses.replace(cfg.pipeline, grouping="single"))
        out = {"low_students": len(low)}
        for name, run_cfg, kind in (("study", cfg, "study"), ("individual", cfg, "individual"), ("single", single, "study")):
            trained = experiment.train_model(prep, run_cfg, kind)
            events, overall = experiment.evaluate(prep, experiment.recommender_for(trained, prep, run_cfg, name), run_cfg)
            low_rep = evalharness.report(events.select(low), name, cutoffs=(1,), subsets=("all",), resamples=cfg.eval.resamples, seed=seed)
            out[name] = {"overall": overall.get("all", 1), "low": low_rep.get("all", 1)}
        runs[seed] = out
    return runs


def fmt(row: evalharness.MetricRow) -> str:
    return f"{row.mean:.2f} [{row.ci_low:.2f},{row.ci_high:.2f}]"


@pytest.mark.slow
@pytest.mark.criterion(6)
def test_c6_social_gain_for_low_engagement_students(social_runs, record_property):
    wins, exceeds = 0, 0
    for seed in SEEDS:
        s, i = social_runs[seed]["study"]["low"], social_runs[seed]["individual"]["low"]
        adjacent, overlap = cumming_adjacent(s, i)
        exceeds += s.mean > i.mean
        wins += s.mean > i.mean and adjacent
        detail(
            record_property,
            f"seed {seed}: study {fmt(s)} vs individual {fmt(i)} (n={s.students}, overlap {overlap:.2f}, separated={adjacent})",
        )
    detail(record_property, f"study ahead in {exceeds}/3 seeds; ahead with separated CIs in {wins}/3")
    assert wins >= 2


@pytest.mark.slow
@pytest.mark.criterion(7)
def test_c7_grouping_direction(social_runs, record_property):
    ordered, within = 0, 0
    for seed in SEEDS:
        c = social_runs[seed]["study"]["overall"]
        g = social_runs[seed]["single"]["overall"]
        i = social_runs[seed]["individual"]["overall"]
        ordered += c.mean >= g.mean
        within += i.ci_low <= g.mean <= i.ci_high
        detail(record_property, f"seed {seed}: classroom {fmt(c)} single {fmt(g)} individual {fmt(i)}")
    detail(record_property, f"classroom >= single in {ordered}/3; single inside individual CI in {within}/3")
    assert ordered >= 2 and within >= 2


# criterion 8 ---------------------------------------------------------------------------------


@pytest.mark.criterion(8)
def test_c8_schedule_values(record_property):
    cfg = ScheduleConfig(peak_rate=0.1024, warmup_steps=1000, total_steps=3500)
    got = {s: lr_schedule(s, cfg) for s in (500, 1000, 3500)}
    detail(record_property, ", ".join(f"step {s}: {v:.9g}" for s, v in got.items()))
    assert abs(got[500] - 0.0512) <= 1e-9
    assert abs(got[1000] - 0.1024) <= 1e-9
    assert abs(got[3500] - 0.002048) <= 1e-9


# criterion 9 ---------------------------------------------------------------------------------


@pytest.mark.criterion(9)
def test_c9_generator_calibration(record_property):
    stats = synthgen.calibration_stats(synthgen.generate(synthgen.CohortConfig()))
    detail(record_property, f"median {stats['median']:.1f}, share <= 65 interactions {stats['frac_le_65']:.3f}")
    assert abs(stats["median"] - 10) <= 3.0
    assert stats["frac_le_65"] >= 0.85


# criterion 10 --------------------------------------------------------------------------------

STAGES = (
    ["generate"],
    ["preprocess"],
    ["train", "--model", "study"],
    ["train", "--model", "individual"],
    ["train", "--model", "knn"],
    ["eval", "--model", "study"],
    ["eval", "--model", "individual"],
    ["eval", "--model", "knn"],
    ["report"],
)


@pytest.mark.criterion(10)
def test_c10_two_runs_are_byte_identical(tmp_path, record_property):
    roots = [tmp_path / "a", tmp_path / "b"]
    for root in roots:
        for stage in STAGES:
            assert cli.main([*stage, "--config", str(SMOKE), "--stage-dir", str(root)]) == 0
    groups = {
        "dataset": ["data/dataset.tsv"],
        "packed epochs": ["data/packed_classroom_epoch0.bin", "data/windows_individual.bin"],
        "checkpoints": ["models/study.ckpt", "models/individual.ckpt", "models/knn.index"],
        "report CSVs": sorted(str(p.relative_to(roots[0])) for p in (roots[0] / "reports").glob("*.csv")),
    }
    for files in groups.values():
        for rel in files:
            assert (roots[0] / rel).read_bytes() == (roots[1] / rel).read_bytes(), rel
    detail(record_property, ", ".join(f"{k} ({len(v)})" for k, v in groups.items()) + " byte-identical")
