"""Students, interactions, vocabulary and the year-based train/validation/test split."""

from __future__ import annotations

import hashlib
import io
import logging
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

log = logging.getLogger(__name__)

PAD, SEP, OOV = 0, 1, 2
FIRST_ITEM_TOKEN = 3

METRO_CODES = ("urban", "suburban", "rural", "town")
SES_BANDS = ("A", "B", "C", "D", "E", "unknown")

FORMAT_VERSION = 1
COLUMNS = (
    "student_id",
    "item_id",
    "timestamp",
    "school_year",
    "classroom_id",
    "school_id",
    "district_id",
    "grade",
    "metro_code",
    "ses_band",
    "reading_score",
)
HEADER = f"#studyrec-interactions-v{FORMAT_VERSION}\t" + "\t".join(COLUMNS)


class CorpusError(Exception):
    pass


class ParseError(CorpusError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SplitError(CorpusError):
    pass


@dataclass(frozen=True, slots=True)
class Interaction:
    student_id: int
    item_id: int
    timestamp: int
    school_year: int

    def __post_init__(self):
        if self.timestamp <= 0:
            raise CorpusError(f"timestamp must be positive, got {self.timestamp}")
        if self.school_year not in (1, 2):
            raise CorpusError(f"school_year must be 1 or 2, got {self.school_year}")


@dataclass(frozen=True, slots=True)
class StudentMetadata:
    metro_code: str = "urban"
    ses_band: str = "unknown"
    reading_score: float = 0.0

    def __post_init__(self):
        if self.metro_code not in METRO_CODES:
            raise CorpusError(f"unknown metro code {self.metro_code!r}")
        if self.ses_band not in SES_BANDS:
            raise CorpusError(f"unknown SES band {self.ses_band!r}")


@dataclass(frozen=True, slots=True)
class StudentRecord:
    student_id: int
    classroom_id: int
    school_id: int
    district_id: int
    grade_level: int
    metadata: StudentMetadata
    interactions: tuple[Interaction, ...] = ()

    def __post_init__(self):
        prev = None
        for it in self.interactions:
            if it.student_id != self.student_id:
                raise CorpusError(f"interaction of student {it.student_id} filed under {self.student_id}")
            if prev is not None and it.timestamp < prev:
                raise CorpusError(f"interactions of student {self.student_id} are not time-sorted")
            prev = it.timestamp

    @classmethod
    def sorted(cls, interactions: Iterable[Interaction], **kwargs) -> StudentRecord:
        # sorted() is stable, so equal timestamps keep input order
        return cls(interactions=tuple(sorted(interactions, key=lambda it: it.timestamp)), **kwargs)

    def with_interactions(self, interactions: Iterable[Interaction]) -> StudentRecord:
        return replace(self, interactions=tuple(interactions))


@dataclass(frozen=True)
class Bundle:
    """An immutable collection of student records ordered by student id."""

    students: tuple[StudentRecord, ...] = ()

    def __post_init__(self):
        ids = [s.student_id for s in self.students]
        if ids != sorted(ids) or len(set(ids)) != len(ids):
            object.__setattr__(self, "students", tuple(sorted(self.students, key=lambda s: s.student_id)))
            if len(set(ids)) != len(ids):
                raise CorpusError("duplicate student ids in bundle")

    def __len__(self) -> int:
        return len(self.students)

    def __iter__(self) -> Iterator[StudentRecord]:
        return iter(self.students)

    def interactions(self) -> Iterator[Interaction]:
        for s in self.students:
            yield from s.interactions

    @property
    def num_interactions(self) -> int:
        return sum(len(s.interactions) for s in self.students)

    def by_id(self) -> dict[int, StudentRecord]:
        return {s.student_id: s for s in self.students}

    def select(self, student_ids: Iterable[int]) -> Bundle:
        keep = set(student_ids)
        return Bundle(tuple(s for s in self.students if s.student_id in keep))


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Vocabulary:
    size: int
    item_to_token: dict[int, int]
    counts: dict[int, int] = field(default_factory=dict)
    notes: tuple[str, ...] = ()

    @property
    def num_tokens(self) -> int:
        return self.size + FIRST_ITEM_TOKEN

    def token(self, item_id: int) -> int:
        return self.item_to_token.get(item_id, OOV)

    def tokens(self, item_ids: Iterable[int]) -> list[int]:
        get = self.item_to_token.get
        return [get(i, OOV) for i in item_ids]

    def token_to_item(self) -> dict[int, int]:
        return {t: i for i, t in self.item_to_token.items()}

    def save(self, path: str | os.PathLike) -> None:
        lines = [f"#studyrec-vocab-v1\tsize={self.size}"]
        for item, tok in sorted(self.item_to_token.items(), key=lambda kv: kv[1]):
            lines.append(f"{tok}\t{item}\t{self.counts.get(item, 0)}")
        atomic_write_text(path, "\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> Vocabulary:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("#studyrec-vocab-v1"):
            raise ParseError("not a vocabulary file", 1)
        size = int(lines[0].split("size=")[1])
        mapping, counts = {}, {}
        for lineno, line in enumerate(lines[1:], start=2):
            tok, item, count = line.split("\t")
            mapping[int(item)] = int(tok)
            counts[int(item)] = int(count)
        if len(mapping) != size:
            raise ParseError(f"vocabulary declares {size} items but lists {len(mapping)}")
        return cls(size=size, item_to_token=mapping, counts=counts)


def build_vocab(interactions: Iterable[Interaction], v: int) -> Vocabulary:
    """Map the ``v`` most frequent items to tokens 3..v+2.

    Ties in frequency go to the smaller item id. If fewer than ``v`` distinct
    items exist the vocabulary shrinks and a note is recorded.
    """
    if v < 1:
        raise CorpusError("vocabulary size must be >= 1")
    counts = Counter(it.item_id for it in interactions)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    notes: tuple[str, ...] = ()
    if len(ranked) < v:
        note = f"only {len(ranked)} distinct items; vocabulary shrunk from {v}"
        log.warning(note)
        notes = (note,)
        v = len(ranked)
    chosen = ranked[:v]
    mapping = {item: FIRST_ITEM_TOKEN + rank for rank, (item, _) in enumerate(chosen)}
    return Vocabulary(size=v, item_to_token=mapping, counts=dict(counts), notes=notes)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    validation_fraction: float = 0.5
    seed: int = 0
    train_year: int = 1
    eval_year: int = 2

    def __post_init__(self):
        if not 0.0 <= self.validation_fraction <= 1.0:
            raise CorpusError("validation_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class Splits:
    train: Bundle
    validation: Bundle
    test: Bundle

    def __getitem__(self, name: str) -> Bundle:
        return {"train": self.train, "validation": self.validation, "test": self.test}[name]


def _unit_hash(seed: int, student_id: int) -> float:
    digest = hashlib.blake2b(f"{seed}:{student_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") / 2**64


def _year_slice(bundle: Bundle, year: int) -> Bundle:
    out = []
    for s in bundle:
        its = tuple(it for it in s.interactions if it.school_year == year)
        if its:
            out.append(s.with_interactions(its))
    return Bundle(tuple(out))


def split(bundle: Bundle, spec: SplitSpec = SplitSpec()) -> Splits:
    """Year ``train_year`` goes to train; ``eval_year`` students are hashed into validation or test."""
    train = _year_slice(bundle, spec.train_year)
    later = _year_slice(bundle, spec.eval_year)
    if not len(train) or not len(later):
        raise SplitError("both school years must contain interactions")
    val_ids = [s.student_id for s in later if _unit_hash(spec.seed, s.student_id) < spec.validation_fraction]
    val_set = set(val_ids)
    validation = Bundle(tuple(s for s in later if s.student_id in val_set))
    test = Bundle(tuple(s for s in later if s.student_id not in val_set))
    return Splits(train=train, validation=validation, test=test)


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _format_score(x: float) -> str:
    return repr(float(x))


def dumps(bundle: Bundle) -> str:
    buf = io.StringIO()
    buf.write(HEADER + "\n")
    for s in bundle:
        m = s.metadata
        tail = (
            f"{s.classroom_id}\t{s.school_id}\t{s.district_id}\t{s.grade_level}\t"
            f"{m.metro_code}\t{m.ses_band}\t{_format_score(m.reading_score)}"
        )
        for it in s.interactions:
            buf.write(f"{s.student_id}\t{it.item_id}\t{it.timestamp}\t{it.school_year}\t{tail}\n")
    return buf.getvalue()


def save(bundle: Bundle, path: str | os.PathLike) -> None:
    """Write ``bundle`` as a tab-separated dataset file (atomically)."""
    atomic_write_text(path, dumps(bundle))


def loads(text: str) -> Bundle:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        return Bundle()
    head = lines[0]
    if not head.startswith("#studyrec-interactions-v"):
        raise ParseError("missing format header", 1)
    version = head.split("\t", 1)[0].removeprefix("#studyrec-interactions-v")
    if version != str(FORMAT_VERSION):
        raise ParseError(f"unknown format version {version!r}", 1)

    students: dict[int, dict] = {}
    order: list[int] = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != len(COLUMNS):
            raise ParseError(f"expected {len(COLUMNS)} fields, got {len(fields)}", lineno)
        try:
            sid, item, ts, year, cls_id, school, district, grade = (int(f) for f in fields[:8])
            score = float(fields[10])
            meta = StudentMetadata(fields[8], fields[9], score)
            inter = Interaction(sid, item, ts, year)
        except (ValueError, CorpusError) as exc:
            raise ParseError(str(exc), lineno) from None
        group = (cls_id, school, district, grade, meta)
        entry = students.get(sid)
        if entry is None:
            students[sid] = {"group": group, "its": [inter]}
            order.append(sid)
            continue
        if entry["group"] != group:
            raise ParseError(f"student {sid} changes classroom/school/metadata fields", lineno)
        if ts < entry["its"][-1].timestamp:
            raise ParseError(f"timestamps of student {sid} are not non-decreasing", lineno)
        entry["its"].append(inter)

    records = []
    for sid in order:
        (cls_id, school, district, grade, meta) = students[sid]["group"]
        records.append(
            StudentRecord(
                student_id=sid,
                classroom_id=cls_id,
                school_id=school,
                district_id=district,
                grade_level=grade,
                metadata=meta,
                interactions=tuple(students[sid]["its"]),
            )
        )
    return Bundle(tuple(records))


def load(path: str | os.PathLike) -> Bundle:
    """Read a dataset file; malformed rows raise :class:`ParseError` with the line number."""
    return loads(Path(path).read_text(encoding="utf-8"))
