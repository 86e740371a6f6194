"""Turn tokenized student histories into model-ready datapoints.

Two layouts are produced:

* per-student context windows (the individual model), and
* segment-packed datapoints joining several students of one group, each
  segment delimited by a separator token (the joint model).

``separator="end"`` terminates every segment with SEP; the SEP takes the
segment's student and the timestamp of the token before it. ``separator="start"``
opens every segment with SEP instead, stamped with the timestamp of the
segment's first token, so the opener position can be trained to predict a
student's first item from strictly earlier peer activity.
"""

from __future__ import annotations

import os
import struct
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterable, Sequence

import numpy as np

from .corpus import PAD, SEP, Bundle, Vocabulary

GROUPINGS = ("classroom", "district-year", "single", "individual")
SEPARATORS = ("end", "start")
PAD_STUDENT = -1


class PipelineError(Exception):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    context_length: int = 65
    segment_length: int = 65
    grouping: str = "classroom"
    separator: str = "end"
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.segment_length <= self.context_length:
            raise PipelineError("need 1 <= segment_length <= context_length")
        if self.context_length < 2:
            raise PipelineError("context_length must be >= 2 to hold a token and a separator")
        if self.grouping not in GROUPINGS:
            raise PipelineError(f"unknown grouping {self.grouping!r}")
        if self.separator not in SEPARATORS:
            raise PipelineError(f"unknown separator placement {self.separator!r}")

    @property
    def payload_length(self) -> int:
        """Longest segment that still fits next to its separator."""
        return min(self.segment_length, self.context_length - 1)


@dataclass(frozen=True)
class TokenizedHistory:
    student_id: int
    classroom_id: int
    district_id: int
    school_year: int
    tokens: tuple[int, ...]
    timestamps: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class Segment:
    student_id: int
    index: int  # ordinal of this segment within the student's history
    start: int  # offset of the first token in the student's history
    tokens: tuple[int, ...]
    timestamps: tuple[int, ...]

    def __post_init__(self):
        if len(self.tokens) != len(self.timestamps):
            raise PipelineError("segment tokens and timestamps differ in length")


@dataclass(frozen=True)
class DataPoint:
    tokens: tuple[int, ...]
    timestamps: tuple[int, ...]
    students: tuple[int, ...]  # position -> student id
    offsets: tuple[int, ...]  # position -> index in that student's history, -1 for SEP
    loss_mask: tuple[bool, ...]

    def __len__(self) -> int:
        return len(self.tokens)

    def targets(self) -> tuple[int, ...]:
        """Next token at each position (PAD where none exists)."""
        return self.tokens[1:] + (PAD,)


def tokenize(bundle: Bundle, vocab: Vocabulary) -> list[TokenizedHistory]:
    out = []
    for s in bundle:
        if not s.interactions:
            continue
        years = {it.school_year for it in s.interactions}
        out.append(
            TokenizedHistory(
                student_id=s.student_id,
                classroom_id=s.classroom_id,
                district_id=s.district_id,
                school_year=min(years),
                tokens=tuple(vocab.tokens(it.item_id for it in s.interactions)),
                timestamps=tuple(it.timestamp for it in s.interactions),
            )
        )
    return out


def group_key(history: TokenizedHistory, grouping: str) -> Hashable:
    if grouping == "classroom":
        return history.classroom_id
    if grouping == "district-year":
        return (history.district_id, history.school_year)
    if grouping == "single":
        return 0
    if grouping == "individual":
        return history.student_id
    raise PipelineError(f"unknown grouping {grouping!r}")


def _single_student_point(seg: Segment, with_separator: str | None) -> DataPoint:
    n = len(seg.tokens)
    sid = seg.student_id
    if with_separator is None:
        return DataPoint(
            tokens=seg.tokens,
            timestamps=seg.timestamps,
            students=(sid,) * n,
            offsets=tuple(range(seg.start, seg.start + n)),
            loss_mask=(True,) * (n - 1) + (False,),
        )
    return _pack([seg], with_separator)


def window_individual(history: TokenizedHistory, c: int, separator: str = "end") -> list[DataPoint]:
    """Consecutive non-overlapping context windows of one student.

    With ``separator="end"`` windows hold ``c`` raw tokens and no separator.
    With ``separator="start"`` each window is SEP followed by up to ``c - 1`` tokens.
    """
    if c < 1:
        raise PipelineError("context length must be >= 1")
    if separator == "start":
        segs = segment_student(history, c - 1)
        return [_single_student_point(seg, "start") for seg in segs]
    return [_single_student_point(seg, None) for seg in segment_student(history, c)]


def segment_student(history: TokenizedHistory, s: int) -> list[Segment]:
    if s < 1:
        raise PipelineError("segment length must be >= 1")
    out = []
    for idx, start in enumerate(range(0, len(history.tokens), s)):
        out.append(
            Segment(
                student_id=history.student_id,
                index=idx,
                start=start,
                tokens=history.tokens[start : start + s],
                timestamps=history.timestamps[start : start + s],
            )
        )
    return out


def _pack(segments: Sequence[Segment], separator: str) -> DataPoint:
    tokens: list[int] = []
    times: list[int] = []
    students: list[int] = []
    offsets: list[int] = []
    mask: list[bool] = []
    for seg in segments:
        n = len(seg.tokens)
        sid = seg.student_id
        if separator == "start":
            tokens.append(SEP)
            times.append(seg.timestamps[0])
            students.append(sid)
            offsets.append(-1)
            mask.append(True)
        tokens.extend(seg.tokens)
        times.extend(seg.timestamps)
        students.extend([sid] * n)
        offsets.extend(range(seg.start, seg.start + n))
        # the last token's successor is a separator or another student
        mask.extend([True] * (n - 1) + [False])
        if separator == "end":
            tokens.append(SEP)
            times.append(seg.timestamps[-1])
            students.append(sid)
            offsets.append(-1)
            mask.append(False)
    return DataPoint(tuple(tokens), tuple(times), tuple(students), tuple(offsets), tuple(mask))


def assemble_group(
    segments_by_group: dict[Hashable, list[Segment]],
    cfg: PipelineConfig,
    seed: int | Sequence[int] = 0,
) -> list[DataPoint]:
    """Greedy first-fit packing of segments into datapoints of at most ``c`` tokens.

    Within each group the students are shuffled once (seeded by ``seed`` and the
    group's rank); datapoints are then filled by walking that order and taking
    each student's next unused segment if it fits together with its separator.
    A student contributes at most one segment per datapoint and every segment
    lands in exactly one datapoint.
    """
    c = cfg.context_length
    out: list[DataPoint] = []
    seed_words = list(seed) if isinstance(seed, (list, tuple)) else [seed]
    for rank, key in enumerate(sorted(segments_by_group, key=_sort_key)):
        queues: dict[int, list[Segment]] = defaultdict(list)
        for seg in segments_by_group[key]:
            if len(seg.tokens) > c - 1:
                raise PipelineError(f"segment of {len(seg.tokens)} tokens cannot fit with its separator in c={c}")
            if not seg.tokens:
                continue
            queues[seg.student_id].append(seg)
        for q in queues.values():
            q.sort(key=lambda seg: seg.index)
        if cfg.grouping == "individual":
            for sid in sorted(queues):
                out.extend(_pack([seg], cfg.separator) for seg in queues[sid])
            continue
        rng = np.random.default_rng(np.random.SeedSequence(seed_words + [rank]))
        order = [sorted(queues)[i] for i in rng.permutation(len(queues))]
        heads = {sid: 0 for sid in order}
        active = list(order)
        while active:
            room = c
            chosen: list[Segment] = []
            for sid in active:
                seg = queues[sid][heads[sid]]
                need = len(seg.tokens) + 1
                if need <= room:
                    chosen.append(seg)
                    heads[sid] += 1
                    room -= need
                    if room < 2:
                        break
            out.append(_pack(chosen, cfg.separator))
            active = [sid for sid in active if heads[sid] < len(queues[sid])]
    return out


def _sort_key(key: Hashable):
    return (str(type(key)), key)


def segments_by_group(histories: Iterable[TokenizedHistory], cfg: PipelineConfig) -> dict[Hashable, list[Segment]]:
    groups: dict[Hashable, list[Segment]] = defaultdict(list)
    for h in histories:
        groups[group_key(h, cfg.grouping)].extend(segment_student(h, cfg.payload_length))
    return dict(groups)


def epoch_seed(seed: int, epoch: int) -> list[int]:
    return [seed, epoch]


def pack_epoch(histories: Sequence[TokenizedHistory], cfg: PipelineConfig, epoch: int) -> list[DataPoint]:
    """All segments of ``histories`` packed once; deterministic in (cfg.seed, epoch)."""
    return assemble_group(segments_by_group(histories, cfg), cfg, epoch_seed(cfg.seed, epoch))


def individual_epoch(histories: Sequence[TokenizedHistory], cfg: PipelineConfig) -> list[DataPoint]:
    out = []
    for h in histories:
        out.extend(window_individual(h, cfg.context_length, cfg.separator))
    return out


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    tokens: np.ndarray  # (B, T) int64
    timestamps: np.ndarray  # (B, T) int64
    students: np.ndarray  # (B, T) int64, PAD_STUDENT at padding
    offsets: np.ndarray  # (B, T) int64
    loss_mask: np.ndarray  # (B, T) bool
    targets: np.ndarray  # (B, T) int64
    segment_positions: np.ndarray  # (B, T) position within each student's run

    @property
    def shape(self) -> tuple[int, int]:
        return self.tokens.shape


def collate(points: Sequence[DataPoint], length: int) -> Batch:
    """Right-pad datapoints to ``length``; PAD positions are loss-masked."""
    b = len(points)
    tokens = np.full((b, length), PAD, dtype=np.int64)
    times = np.zeros((b, length), dtype=np.int64)
    students = np.full((b, length), PAD_STUDENT, dtype=np.int64)
    offsets = np.full((b, length), -1, dtype=np.int64)
    loss_mask = np.zeros((b, length), dtype=bool)
    targets = np.full((b, length), PAD, dtype=np.int64)
    seg_pos = np.zeros((b, length), dtype=np.int64)
    for row, dp in enumerate(points):
        n = len(dp.tokens)
        if n > length:
            raise PipelineError(f"datapoint of length {n} exceeds {length}")
        tokens[row, :n] = dp.tokens
        times[row, :n] = dp.timestamps
        students[row, :n] = dp.students
        offsets[row, :n] = dp.offsets
        loss_mask[row, :n] = dp.loss_mask
        targets[row, : n - 1] = dp.tokens[1:]
        pos = 0
        for i in range(n):
            if i > 0 and dp.students[i] != dp.students[i - 1]:
                pos = 0
            seg_pos[row, i] = pos
            pos += 1
    return Batch(tokens, times, students, offsets, loss_mask, targets, seg_pos)


# ---------------------------------------------------------------------------
# packed-epoch cache
# ---------------------------------------------------------------------------

CACHE_MAGIC = b"SRPK"
CACHE_VERSION = 1


def save_datapoints(path: str | os.PathLike, points: Sequence[DataPoint]) -> None:
    parts = [CACHE_MAGIC, struct.pack("<II", CACHE_VERSION, len(points))]
    for dp in points:
        parts.append(struct.pack("<I", len(dp.tokens)))
        parts.append(np.asarray(dp.tokens, dtype="<i4").tobytes())
        parts.append(np.asarray(dp.timestamps, dtype="<i8").tobytes())
        parts.append(np.asarray(dp.students, dtype="<i8").tobytes())
        parts.append(np.asarray(dp.offsets, dtype="<i4").tobytes())
        parts.append(np.asarray(dp.loss_mask, dtype="u1").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def load_datapoints(path: str | os.PathLike) -> list[DataPoint]:
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise PipelineError(f"{path}: not a packed-epoch cache")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CACHE_VERSION:
        raise PipelineError(f"{path}: unsupported cache version {version}")
    pos = 12
    out = []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        tokens = np.frombuffer(raw, "<i4", n, pos); pos += 4 * n
        times = np.frombuffer(raw, "<i8", n, pos); pos += 8 * n
        students = np.frombuffer(raw, "<i8", n, pos); pos += 8 * n
        offsets = np.frombuffer(raw, "<i4", n, pos); pos += 4 * n
        mask = np.frombuffer(raw, "u1", n, pos); pos += n
        out.append(
            DataPoint(
                tuple(int(x) for x in tokens),
                tuple(int(x) for x in times),
                tuple(int(x) for x in students),
                tuple(int(x) for x in offsets),
                tuple(bool(x) for x in mask),
            )
        )
    return out
