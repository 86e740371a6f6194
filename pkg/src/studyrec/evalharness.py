"""Offline evaluation: hits@n per student, bootstrap intervals and slicing.

A recommender turns each evaluation-split history into one rank per position
(teacher forcing: the prediction for position ``k`` may use the true tokens
before ``k``). Ranks become :class:`RankedEvent` records carrying the
continuation and novelty flags; metrics are computed per student first and
then averaged over students.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from . import knnrec
from .corpus import OOV, Bundle
from .model import DecoderConfig, batch_logits, rank_tokens, target_ranks
from .numkernel import Tensor
from .pipeline import DataPoint, PipelineConfig, TokenizedHistory, collate, pack_epoch, individual_epoch

SUBSETS = ("all", "non_continuation", "novel")
CUTOFFS = (1, 3, 5, 10, 20)
NO_RANK = 0


class EvalError(Exception):
    pass


# ---------------------------------------------------------------------------
# events
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalEvent:
    student_id: int
    position: int  # index in the student's evaluation sequence; context = positions before it
    timestamp: int
    target: int
    is_continuation: bool
    is_novel: bool

    @property
    def is_oov(self) -> bool:
        return self.target == OOV

    def in_subset(self, subset: str) -> bool:
        if subset == "all":
            return True
        if subset == "non_continuation":
            return not self.is_continuation
        if subset == "novel":
            return self.is_novel
        raise EvalError(f"unknown subset {subset!r}")


@dataclass(frozen=True)
class RankedEvent:
    event: EvalEvent
    rank: int


@dataclass
class EventSet:
    events: list[RankedEvent]
    oov_skipped: int = 0
    errors: int = 0

    def students(self) -> list[int]:
        return sorted({r.event.student_id for r in self.events})

    def select(self, student_ids: Iterable[int]) -> EventSet:
        keep = set(student_ids)
        return EventSet([r for r in self.events if r.event.student_id in keep], self.oov_skipped, self.errors)


def make_events(history: TokenizedHistory, prior_tokens: Iterable[int] = ()) -> list[EvalEvent]:
    """Events for one history; novelty is judged against ``prior_tokens`` plus earlier positions."""
    seen = set(prior_tokens)
    out = []
    prev = None
    for k, (tok, ts) in enumerate(zip(history.tokens, history.timestamps)):
        out.append(
            EvalEvent(
                student_id=history.student_id,
                position=k,
                timestamp=ts,
                target=tok,
                is_continuation=prev is not None and tok == prev,
                is_novel=tok not in seen,
            )
        )
        seen.add(tok)
        prev = tok
    return out


# ---------------------------------------------------------------------------
# recommenders
# ---------------------------------------------------------------------------


class Recommender(Protocol):
    name: str

    def rank_histories(self, histories: Sequence[TokenizedHistory]) -> dict[int, np.ndarray]:
        """Map student id -> rank (1-based) of the true token at each position; 0 marks a failure."""
        ...


def _popularity_rank_table(popularity: np.ndarray) -> np.ndarray:
    order = rank_tokens(np.asarray(popularity, dtype=np.float64))
    table = np.zeros(len(popularity), dtype=np.int64)
    table[order] = np.arange(1, len(order) + 1)
    return table


@dataclass
class PopularityRecommender:
    popularity: np.ndarray  # counts per token id
    name: str = "popularity"

    def __post_init__(self):
        self._table = _popularity_rank_table(self.popularity)

    def rank_histories(self, histories):
        return {h.student_id: self._table[np.asarray(h.tokens, dtype=np.int64)] for h in histories}


@dataclass
class OracleRecommender:
    name: str = "oracle"

    def rank_histories(self, histories):
        return {h.student_id: np.ones(len(h), dtype=np.int64) for h in histories}


@dataclass
class KnnRecommender:
    index: knnrec.InvertedIndex
    name: str = "knn"

    def rank_histories(self, histories):
        out = {}
        for h in histories:
            toks = list(h.tokens)
            out[h.student_id] = np.array(
                [knnrec.rank_of(self.index, knnrec.featurize(toks[:k], self.index.history), toks[k]) for k in range(len(toks))],
                dtype=np.int64,
            )
        return out


@dataclass
class SequenceRecommender:
    """Transformer ranks read at each student's own positions inside packed datapoints.

    The prediction for position ``k > 0`` comes from the logits at position
    ``k - 1`` wherever that token was packed. Position 0 is predicted from the
    segment's opening separator when one exists, else by popularity.
    """

    params: dict[str, Tensor]
    cfg: DecoderConfig
    pipeline: PipelineConfig
    popularity: np.ndarray
    individual: bool = False
    batch_size: int = 64
    name: str = "study"

    def datapoints(self, histories: Sequence[TokenizedHistory]) -> list[DataPoint]:
        if self.individual:
            return individual_epoch(histories, self.pipeline)
        return pack_epoch(histories, self.pipeline, epoch=0)

    def rank_histories(self, histories):
        lengths = {h.student_id: len(h) for h in histories}
        tokens = {h.student_id: h.tokens for h in histories}
        own = {sid: np.full(n, NO_RANK, dtype=np.int64) for sid, n in lengths.items()}
        opener = {sid: np.full(n, NO_RANK, dtype=np.int64) for sid, n in lengths.items()}
        points = self.datapoints(histories)
        for lo in range(0, len(points), self.batch_size):
            chunk = points[lo : lo + self.batch_size]
            logits = batch_logits(self.params, self.cfg, collate(chunk, self.cfg.max_len))
            rows, keys = [], []
            for b, dp in enumerate(chunk):
                n = len(dp)
                for i in range(n):
                    sid, off = dp.students[i], dp.offsets[i]
                    if off >= 0 and off + 1 < lengths[sid]:
                        rows.append((b, i))
                        keys.append((own, sid, off + 1))
                    elif off < 0 and i + 1 < n and dp.students[i + 1] == sid and dp.offsets[i + 1] >= 0:
                        rows.append((b, i))
                        keys.append((opener, sid, dp.offsets[i + 1]))
            if not rows:
                continue
            idx = np.asarray(rows)
            targets = np.array([tokens[sid][k] for _, sid, k in keys], dtype=np.int64)
            for (dest, sid, k), rank in zip(keys, target_ranks(logits[idx[:, 0], idx[:, 1]], targets)):
                dest[sid][k] = rank
        table = _popularity_rank_table(self.popularity)
        out = {}
        for sid in lengths:
            # the student's own previous token beats a separator; popularity is the last resort
            r = np.where(own[sid] != NO_RANK, own[sid], opener[sid])
            if len(r) and r[0] == NO_RANK:
                r[0] = table[tokens[sid][0]]
            out[sid] = r
        return out


def collect_events(
    histories: Sequence[TokenizedHistory],
    recommender: Recommender,
    prior: Mapping[int, Iterable[int]] | None = None,
) -> EventSet:
    """Teacher-forced ranks for every evaluation event; OOV targets and failures are tallied, not scored."""
    prior = prior or {}
    try:
        ranks = recommender.rank_histories(histories)
    except Exception:
        # fall back to per-student calls so a single bad history only costs its own events
        ranks = {}
        for h in histories:
            try:
                ranks.update(recommender.rank_histories([h]))
            except Exception:
                pass
    out = EventSet([])
    for h in histories:
        r = ranks.get(h.student_id)
        for ev in make_events(h, prior.get(h.student_id, ())):
            if ev.is_oov:
                out.oov_skipped += 1
                continue
            rank = NO_RANK if r is None or ev.position >= len(r) else int(r[ev.position])
            if rank <= NO_RANK:
                out.errors += 1
                continue
            out.events.append(RankedEvent(ev, rank))
    return out


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HitsResult:
    per_student: dict[int, float]  # percentage per student
    events: int

    @property
    def empty(self) -> bool:
        return not self.per_student

    @property
    def mean(self) -> float:
        if self.empty:
            return math.nan
        return float(np.mean([self.per_student[s] for s in sorted(self.per_student)]))


def hits_at_n(events: Iterable[RankedEvent], n: int, subset: str = "all") -> HitsResult:
    """Per-student hit percentages; students without subset events are dropped."""
    if n < 1:
        raise EvalError("n must be >= 1")
    hits: dict[int, int] = {}
    totals: dict[int, int] = {}
    count = 0
    for r in events:
        if not r.event.in_subset(subset):
            continue
        sid = r.event.student_id
        totals[sid] = totals.get(sid, 0) + 1
        hits[sid] = hits.get(sid, 0) + (r.rank <= n)
        count += 1
    return HitsResult({s: 100.0 * hits[s] / totals[s] for s in totals}, count)


def bootstrap_ci(rates: Sequence[float], resamples: int = 50, level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile interval of the mean over students resampled with replacement.

    The interval is widened if needed so that it always contains the point
    estimate (with few resamples the raw percentiles occasionally miss it).
    """
    x = np.asarray(rates, dtype=np.float64)
    if x.size == 0:
        raise EvalError("bootstrap needs at least one student")
    mean = float(x.mean())
    if x.size == 1:
        return mean, mean
    rng = np.random.default_rng(np.random.SeedSequence([seed, 50]))
    means = x[rng.integers(0, x.size, size=(resamples, x.size))].mean(axis=1)
    tail = 100.0 * (1.0 - level) / 2.0
    low, high = np.percentile(means, [tail, 100.0 - tail])
    return min(float(low), mean), max(float(high), mean)


@dataclass(frozen=True)
class MetricRow:
    subset: str
    n: int
    mean: float
    ci_low: float
    ci_high: float
    students: int
    events: int

    @property
    def empty(self) -> bool:
        return self.students == 0


@dataclass
class MetricReport:
    model: str
    rows: list[MetricRow] = field(default_factory=list)

    def get(self, subset: str, n: int) -> MetricRow:
        for row in self.rows:
            if row.subset == subset and row.n == n:
                return row
        raise KeyError((subset, n))


def report(
    events: EventSet | Sequence[RankedEvent],
    model: str,
    cutoffs: Sequence[int] = CUTOFFS,
    subsets: Sequence[str] = SUBSETS,
    resamples: int = 50,
    seed: int = 0,
) -> MetricReport:
    evs = events.events if isinstance(events, EventSet) else list(events)
    out = MetricReport(model)
    for subset in subsets:
        for n in cutoffs:
            res = hits_at_n(evs, n, subset)
            if res.empty:
                out.rows.append(MetricRow(subset, n, math.nan, math.nan, math.nan, 0, 0))
                continue
            rates = [res.per_student[s] for s in sorted(res.per_student)]
            low, high = bootstrap_ci(rates, resamples, 0.95, seed)
            out.rows.append(MetricRow(subset, n, res.mean, low, high, len(rates), res.events))
    return out


# ---------------------------------------------------------------------------
# slicing
# ---------------------------------------------------------------------------

SLICE_VARIABLES = ("engagement", "eval_interactions", "metro_code", "ses_band", "reading_score")
NUMERIC_VARIABLES = ("engagement", "eval_interactions", "reading_score")


@dataclass(frozen=True)
class SliceSpec:
    """Numeric variables use half-open bins ``[edges[i], edges[i+1])``; categorical ones use ``categories``."""

    variable: str
    edges: tuple[float, ...] = ()
    categories: tuple[str, ...] = ()

    def __post_init__(self):
        if self.variable not in SLICE_VARIABLES:
            raise EvalError(f"unknown slicing variable {self.variable!r}")
        if self.variable in NUMERIC_VARIABLES:
            if len(self.edges) < 2 or any(b <= a for a, b in zip(self.edges, self.edges[1:])):
                raise EvalError("numeric slices need >= 2 strictly increasing edges")
        elif not self.categories:
            raise EvalError("categorical slices need categories")

    def labels(self) -> list[str]:
        if self.variable in NUMERIC_VARIABLES:
            return [f"[{_fmt_edge(a)},{_fmt_edge(b)})" for a, b in zip(self.edges, self.edges[1:])]
        return list(self.categories)

    def bin_of(self, value) -> int | None:
        if self.variable in NUMERIC_VARIABLES:
            for i, (a, b) in enumerate(zip(self.edges, self.edges[1:])):
                if a <= value < b:
                    return i
            return None
        return self.categories.index(value) if value in self.categories else None


def _fmt_edge(x: float) -> str:
    if math.isinf(x):
        return "inf"
    return str(int(x)) if float(x).is_integer() else repr(x)


@dataclass(frozen=True)
class StudentInfo:
    engagement: int
    eval_interactions: int
    metro_code: str
    ses_band: str
    reading_score: float


def student_info(full: Bundle, eval_bundle: Bundle) -> dict[int, StudentInfo]:
    """Slicing attributes per evaluation student; engagement counts every interaction on record."""
    records = full.by_id()
    out = {}
    for s in eval_bundle:
        rec = records.get(s.student_id, s)
        out[s.student_id] = StudentInfo(
            engagement=len(rec.interactions),
            eval_interactions=len(s.interactions),
            metro_code=rec.metadata.metro_code,
            ses_band=rec.metadata.ses_band,
            reading_score=rec.metadata.reading_score,
        )
    return out


@dataclass
class SliceReport:
    spec: SliceSpec
    reports: dict[str, MetricReport]
    histogram: dict[str, int]  # students per bin


def slice_events(
    events: EventSet,
    spec: SliceSpec,
    info: Mapping[int, StudentInfo],
    model: str,
    cutoffs: Sequence[int] = CUTOFFS,
    resamples: int = 50,
    seed: int = 0,
) -> SliceReport:
    labels = spec.labels()
    members: dict[str, set[int]] = {lab: set() for lab in labels}
    for sid in events.students():
        b = spec.bin_of(getattr(info[sid], spec.variable))
        if b is not None:
            members[labels[b]].add(sid)
    reports = {lab: report(events.select(members[lab]), model, cutoffs, resamples=resamples, seed=seed) for lab in labels}
    return SliceReport(spec, reports, {lab: len(members[lab]) for lab in labels})


DEFAULT_SLICES = (
    SliceSpec("engagement", edges=(0, 5, 10, 17, 35, 65, math.inf)),
    SliceSpec("eval_interactions", edges=(0, 10, math.inf)),
    SliceSpec("metro_code", categories=("urban", "suburban", "rural", "town")),
    SliceSpec("ses_band", categories=("A", "B", "C", "D", "E", "unknown")),
    SliceSpec("reading_score", edges=(-math.inf, 35, 50, 65, math.inf)),
)


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("model", "subset", "n", "mean", "ci_low", "ci_high", "students", "events")
SLICE_COLUMNS = ("variable", "bin") + REPORT_COLUMNS


def _num(x: float) -> str:
    return "" if math.isnan(x) else f"{x:.4f}"


def _report_rows(rep: MetricReport) -> list[list[str]]:
    return [
        [rep.model, r.subset, str(r.n), _num(r.mean), _num(r.ci_low), _num(r.ci_high), str(r.students), str(r.events)]
        for r in rep.rows
    ]


def reports_csv(reports: Sequence[MetricReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for rep in reports:
        w.writerows(_report_rows(rep))
    return buf.getvalue()


def slices_csv(slices: Sequence[SliceReport]) -> str:
    """One table for a slicing variable across models; ``students`` doubles as the bin histogram."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SLICE_COLUMNS)
    for sl in slices:
        for lab in sl.spec.labels():
            for row in _report_rows(sl.reports[lab]):
                w.writerow([sl.spec.variable, lab] + row)
    return buf.getvalue()


def table_text(reports: Sequence[MetricReport], cutoffs: Sequence[int] = CUTOFFS) -> str:
    """Plain-text table: one block per subset, one line per model, ``mean ± half-width`` cells."""
    width = max([len(r.model) for r in reports] + [5])
    lines = []
    for subset in SUBSETS:
        lines.append(f"{subset}")
        lines.append("  " + "model".ljust(width) + "".join(f"  {'hits@' + str(n):<17}" for n in cutoffs))
        for rep in reports:
            cells = []
            for n in cutoffs:
                try:
                    row = rep.get(subset, n)
                except KeyError:
                    cells.append("-".ljust(17))
                    continue
                if row.empty:
                    cells.append("empty".ljust(17))
                else:
                    half = (row.ci_high - row.ci_low) / 2.0
                    cells.append(f"{row.mean:6.2f} ± {half:5.2f}".ljust(17))
            lines.append("  " + rep.model.ljust(width) + "".join("  " + c for c in cells))
        lines.append("")
    return "\n".join(lines)
