"""Synthetic two-year classroom cohorts.

Each classroom owns a topic vector; each student mixes it with a private topic
vector (weight ``homophily`` on the classroom side). Topics are Zipf-shaped
distributions over a shared item catalog, each with its own item ranking.
Students walk a timeline spanning two school years: at every step they repeat
their current item with probability ``p_repeat`` or draw a fresh one from their
mixture. Per-student interaction counts are log-normal, clipped at
``engagement_max``, and default to the published per-student percentiles
(median 10, 75th percentile 29).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import config as cfgmod
from .corpus import METRO_CODES, SES_BANDS, Bundle, Interaction, StudentMetadata, StudentRecord

# students per wealth band A..E, unknown
SES_DEFAULT = (120281, 91325, 74855, 61685, 39083, 12108)
# students per grade 1..12
GRADE_DEFAULT = (1726, 6386, 16668, 28762, 41070, 49805, 59836, 57413, 51217, 31611, 18353, 14717)

SECONDS_PER_YEAR = 365 * 24 * 3600


class CalibrationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CohortConfig:
    num_districts: int = 20
    schools_per_district: int = 5
    classrooms_per_school: int = 5
    students_per_classroom: int = 20
    catalog_size: int = 3000
    zipf_exponent: float = 1.1
    num_topics: int = 8
    topic_concentration: float = 0.2
    homophily: float = 0.8
    p_repeat: float = 0.6
    year_reset: bool = False
    engagement_median: float = 10.0
    engagement_sigma: float = 1.58
    engagement_max: int = 300
    start_timestamp: int = 1630454400
    metro_weights: tuple[float, ...] = (0.3, 0.3, 0.25, 0.15)
    ses_weights: tuple[float, ...] = SES_DEFAULT
    reading_score_mean: float = 50.0
    reading_score_sd: float = 15.0
    seed: int = 0

    def __post_init__(self):
        # canonical float tuples so a config survives a text round trip unchanged
        object.__setattr__(self, "metro_weights", tuple(float(w) for w in self.metro_weights))
        object.__setattr__(self, "ses_weights", tuple(float(w) for w in self.ses_weights))
        counts = (
            self.num_districts,
            self.schools_per_district,
            self.classrooms_per_school,
            self.students_per_classroom,
            self.catalog_size,
            self.num_topics,
            self.engagement_max,
        )
        if min(counts) < 1:
            raise ValueError("all cohort counts must be >= 1")
        if not 0.0 <= self.homophily <= 1.0:
            raise ValueError("homophily must lie in [0, 1]")
        if not 0.0 <= self.p_repeat <= 1.0:
            raise ValueError("p_repeat must lie in [0, 1]")
        if self.engagement_median <= 0 or self.engagement_sigma < 0:
            raise ValueError("engagement distribution parameters out of range")
        if len(self.metro_weights) != len(METRO_CODES) or len(self.ses_weights) != len(SES_BANDS):
            raise ValueError("metadata weight vectors have the wrong length")
        if min(self.metro_weights) < 0 or min(self.ses_weights) < 0:
            raise ValueError("metadata weights must be non-negative")
        if sum(self.metro_weights) <= 0 or sum(self.ses_weights) <= 0:
            raise ValueError("metadata weights must not all be zero")

    @property
    def num_classrooms(self) -> int:
        return self.num_districts * self.schools_per_district * self.classrooms_per_school

    @property
    def num_students(self) -> int:
        return self.num_classrooms * self.students_per_classroom

    @classmethod
    def from_file(cls, path) -> CohortConfig:
        sections = cfgmod.read_sections(path)
        return cfgmod.from_mapping(cls, sections.get("cohort", {}))


@dataclass(frozen=True)
class PreferenceModel:
    classroom_topics: np.ndarray  # (classrooms, topics)
    student_mixtures: np.ndarray  # (students, topics)
    topic_items: np.ndarray  # (topics, catalog)

    def item_distribution(self, student_index: int) -> np.ndarray:
        return self.student_mixtures[student_index] @ self.topic_items


def _topic_items(cfg: CohortConfig) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    ranks = np.arange(1, cfg.catalog_size + 1, dtype=np.float64)
    base = ranks ** (-cfg.zipf_exponent)
    base /= base.sum()
    out = np.empty((cfg.num_topics, cfg.catalog_size))
    for k in range(cfg.num_topics):
        out[k, rng.permutation(cfg.catalog_size)] = base
    return out


def _timestamps(rng: np.random.Generator, n: int, start: int) -> np.ndarray:
    t = np.sort(rng.integers(start, start + 2 * SECONDS_PER_YEAR - n, size=n))
    steps = np.arange(n)
    # strictly increasing, still inside the two-year window
    return np.maximum.accumulate(t - steps) + steps


def _engagement(rng: np.random.Generator, cfg: CohortConfig) -> int:
    raw = cfg.engagement_median * np.exp(cfg.engagement_sigma * rng.standard_normal())
    return int(min(max(round(raw), 1), cfg.engagement_max))


def generate_with_preferences(cfg: CohortConfig) -> tuple[Bundle, PreferenceModel]:
    topics = _topic_items(cfg)
    alpha = np.full(cfg.num_topics, cfg.topic_concentration)
    grade_p = np.asarray(GRADE_DEFAULT, dtype=np.float64)
    grade_p /= grade_p.sum()
    year_two = cfg.start_timestamp + SECONDS_PER_YEAR

    records: list[StudentRecord] = []
    class_topics = np.empty((cfg.num_classrooms, cfg.num_topics))
    mixtures = np.empty((cfg.num_students, cfg.num_topics))
    student_id = 0
    classroom = 0
    for d in range(cfg.num_districts):
        for s in range(cfg.schools_per_district):
            school_id = d * cfg.schools_per_district + s + 1
            for _ in range(cfg.classrooms_per_school):
                # one independent stream per classroom: output does not depend on visiting order
                rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, classroom]))
                ctopic = rng.dirichlet(alpha)
                class_topics[classroom] = ctopic
                grade = int(rng.choice(12, p=grade_p)) + 1
                for _ in range(cfg.students_per_classroom):
                    mix = cfg.homophily * ctopic + (1.0 - cfg.homophily) * rng.dirichlet(alpha)
                    mixtures[student_id] = mix
                    cdf = np.cumsum(mix @ topics)
                    cdf /= cdf[-1]
                    n = _engagement(rng, cfg)
                    ts = _timestamps(rng, n, cfg.start_timestamp)
                    repeat = rng.random(n) < cfg.p_repeat
                    fresh = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), cfg.catalog_size - 1)
                    sid = student_id + 1
                    its = []
                    current = -1
                    prev_year = 0
                    for i in range(n):
                        year = 1 if ts[i] < year_two else 2
                        new_year = cfg.year_reset and year != prev_year
                        if current < 0 or not repeat[i] or new_year:
                            current = int(fresh[i])
                        its.append(Interaction(sid, current + 1, int(ts[i]), year))
                        prev_year = year
                    records.append(
                        StudentRecord(
                            student_id=sid,
                            classroom_id=classroom + 1,
                            school_id=school_id,
                            district_id=d + 1,
                            grade_level=grade,
                            metadata=StudentMetadata(),
                            interactions=tuple(its),
                        )
                    )
                    student_id += 1
                classroom += 1
    bundle = emit_metadata(cfg, Bundle(tuple(records)))
    _check_calibration(cfg, bundle)
    return bundle, PreferenceModel(class_topics, mixtures, topics)


def generate(cfg: CohortConfig) -> Bundle:
    """Generate a seeded synthetic cohort with slicing metadata attached."""
    return generate_with_preferences(cfg)[0]


def _systematic_allocation(rng: np.random.Generator, sizes: dict[int, int], weights) -> dict[int, int]:
    """Assign each unit a category so category masses track ``weights``.

    Units are visited in a seeded random order; each takes the category whose
    cumulative-weight interval contains the unit's mass midpoint. Marginal
    error per category is at most one unit's share.
    """
    w = np.asarray(weights, dtype=np.float64)
    bounds = np.cumsum(w / w.sum())
    keys = sorted(sizes)
    total = float(sum(sizes.values()))
    cum = 0.0
    out = {}
    for idx in rng.permutation(len(keys)):
        key = keys[idx]
        mid = (cum + sizes[key] / 2.0) / total
        cat = int(np.searchsorted(bounds, mid, side="right"))
        if cat >= len(w):  # rounding at the top edge
            cat = int(np.flatnonzero(w)[-1])
        out[key] = cat
        cum += sizes[key]
    return out


def emit_metadata(cfg: CohortConfig, bundle: Bundle) -> Bundle:
    """Attach metro code and SES band per school and a reading score per classroom."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    school_sizes: dict[int, int] = {}
    classrooms: set[int] = set()
    for s in bundle:
        school_sizes[s.school_id] = school_sizes.get(s.school_id, 0) + 1
        classrooms.add(s.classroom_id)
    metro = _systematic_allocation(rng, school_sizes, cfg.metro_weights)
    ses = _systematic_allocation(rng, school_sizes, cfg.ses_weights)
    scores = {
        c: round(float(rng.normal(cfg.reading_score_mean, cfg.reading_score_sd)), 2) for c in sorted(classrooms)
    }
    out = []
    for s in bundle:
        meta = StudentMetadata(
            metro_code=METRO_CODES[metro[s.school_id]],
            ses_band=SES_BANDS[ses[s.school_id]],
            reading_score=scores[s.classroom_id],
        )
        out.append(
            StudentRecord(
                student_id=s.student_id,
                classroom_id=s.classroom_id,
                school_id=s.school_id,
                district_id=s.district_id,
                grade_level=s.grade_level,
                metadata=meta,
                interactions=s.interactions,
            )
        )
    return Bundle(tuple(out))


def calibration_stats(bundle: Bundle) -> dict[str, float]:
    counts = np.array([len(s.interactions) for s in bundle], dtype=np.float64)
    if counts.size == 0:
        return {"median": 0.0, "p75": 0.0, "p95": 0.0, "frac_le_65": 0.0}
    return {
        "median": float(np.median(counts)),
        "p75": float(np.percentile(counts, 75)),
        "p95": float(np.percentile(counts, 95)),
        "frac_le_65": float((counts <= 65).mean()),
    }


def _check_calibration(cfg: CohortConfig, bundle: Bundle) -> None:
    stats = calibration_stats(bundle)
    problems = []
    if abs(stats["median"] - 10.0) > 3.0:
        problems.append(f"median interactions {stats['median']:.1f} outside 10 +/- 30%")
    if stats["frac_le_65"] < 0.85:
        problems.append(f"only {stats['frac_le_65']:.1%} of students have <= 65 interactions")
    if problems:
        warnings.warn("; ".join(problems), CalibrationWarning, stacklevel=3)


def item_histograms(bundle: Bundle, catalog_size: int) -> np.ndarray:
    """Row-normalised item-count vectors, one per student in bundle order."""
    hist = np.zeros((len(bundle), catalog_size))
    for row, s in enumerate(bundle):
        for it in s.interactions:
            hist[row, it.item_id - 1] += 1
    norms = np.linalg.norm(hist, axis=1, keepdims=True)
    return hist / np.where(norms == 0, 1, norms)


def homophily_stats(bundle: Bundle, catalog_size: int) -> dict[str, float]:
    """Mean cosine similarity of item histograms for intra- vs inter-classroom pairs."""
    h = item_histograms(bundle, catalog_size)
    sims = h @ h.T
    cls = np.array([s.classroom_id for s in bundle])
    same = cls[:, None] == cls[None, :]
    off_diag = ~np.eye(len(cls), dtype=bool)
    return {
        "intra": float(sims[same & off_diag].mean()),
        "inter": float(sims[~same].mean()),
    }
