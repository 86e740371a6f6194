"""Experiment configuration, in-memory runners and file-backed stages.

The in-memory layer (:func:`prepare`, :func:`train_model`, :func:`evaluate`)
is what tests and ablations call directly. :class:`StageRunner` wraps it with
artifacts under one stage directory, an append-only JSON-lines manifest and
idempotent reruns.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from . import config as cfgmod
from . import corpus, evalharness, knnrec, pipeline
from . import model as mdl
from .numkernel import ScheduleConfig
from .synthgen import CohortConfig, generate

log = logging.getLogger(__name__)

MODELS = ("study", "individual", "knn", "popularity")
ABLATIONS = ("force-mix", "grouping", "tapering")


class StageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    vocab_size: int = 2000
    validation_fraction: float = 0.5
    eval_split: str = "test"

    def __post_init__(self):
        if self.eval_split not in ("validation", "test"):
            raise StageError("eval_split must be 'validation' or 'test'")


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    num_heads: int = 4
    d_model: int = 128
    d_k: int = 32
    d_ff: int = 512
    dropout: float = 0.1
    attention: str = "additive"
    positions: str = "absolute"


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 64
    peak_rate: float = 0.01
    warmup_steps: int = 1000
    total_steps: int = 3500

    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.peak_rate, self.warmup_steps, self.total_steps)


@dataclass(frozen=True)
class EvalConfig:
    resamples: int = 50
    knn_history: int = 65
    knn_neighbors: int = 2
    novelty: str = "full"  # "full": train-year history counts as prior; "split": evaluation split only
    batch_size: int = 64

    def __post_init__(self):
        if self.novelty not in ("full", "split"):
            raise StageError("novelty must be 'full' or 'split'")


@dataclass(frozen=True)
class AblationConfig:
    force_mix_segment: int = 20
    groupings: tuple[str, ...] = ("classroom", "district-year", "single", "individual")
    taper_fractions: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)


SECTIONS = {
    "cohort": CohortConfig,
    "data": DataConfig,
    "pipeline": pipeline.PipelineConfig,
    "model": ModelConfig,
    "training": TrainingConfig,
    "eval": EvalConfig,
    "ablation": AblationConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    cohort: CohortConfig = field(default_factory=CohortConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pipeline: pipeline.PipelineConfig = field(default_factory=pipeline.PipelineConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def with_seed(self, seed: int) -> ExperimentConfig:
        """Propagate one global seed into every seeded component."""
        return dataclasses.replace(
            self,
            seed=seed,
            cohort=dataclasses.replace(self.cohort, seed=seed),
            pipeline=dataclasses.replace(self.pipeline, seed=seed),
        )

    def sections(self) -> dict[str, dict[str, str]]:
        out = {"experiment": {"seed": str(self.seed)}}
        for name in SECTIONS:
            out[name] = cfgmod.to_mapping(getattr(self, name))
        return out

    def dumps(self) -> str:
        return cfgmod.dump_sections(self.sections())

    def hash(self) -> str:
        return cfgmod.digest(self.dumps())

    @classmethod
    def from_sections(cls, sections: dict[str, dict[str, str]], base: ExperimentConfig | None = None) -> ExperimentConfig:
        base = base or cls()
        unknown = set(sections) - set(SECTIONS) - {"experiment"}
        if unknown:
            raise cfgmod.ConfigFileError(f"unknown config sections: {sorted(unknown)}")
        parts = {name: cfgmod.from_mapping(kind, sections.get(name, {}), getattr(base, name)) for name, kind in SECTIONS.items()}
        cfg = dataclasses.replace(base, **parts)
        exp = sections.get("experiment", {})
        extra = set(exp) - {"seed"}
        if extra:
            raise cfgmod.ConfigFileError(f"unknown keys for experiment: {sorted(extra)}")
        if "seed" in exp:
            cfg = cfg.with_seed(int(exp["seed"]))
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike) -> ExperimentConfig:
        return cls.from_sections(cfgmod.read_sections(path))


# ---------------------------------------------------------------------------
# in-memory runners
# ---------------------------------------------------------------------------


@dataclass
class Prepared:
    bundle: corpus.Bundle
    splits: corpus.Splits
    vocab: corpus.Vocabulary
    train: list[pipeline.TokenizedHistory]
    eval: list[pipeline.TokenizedHistory]
    popularity: np.ndarray  # training token counts per token id
    prior: dict[int, set[int]]  # student -> training-year tokens
    info: dict[int, evalharness.StudentInfo]


def token_counts(histories: Sequence[pipeline.TokenizedHistory], num_tokens: int) -> np.ndarray:
    counts = np.zeros(num_tokens, dtype=np.int64)
    for h in histories:
        np.add.at(counts, np.asarray(h.tokens, dtype=np.int64), 1)
    return counts


def prepare(cfg: ExperimentConfig, bundle: corpus.Bundle) -> Prepared:
    splits = corpus.split(bundle, corpus.SplitSpec(cfg.data.validation_fraction, seed=cfg.seed))
    vocab = corpus.build_vocab(splits.train.interactions(), cfg.data.vocab_size)
    train = pipeline.tokenize(splits.train, vocab)
    eval_bundle = splits[cfg.data.eval_split]
    ev = pipeline.tokenize(eval_bundle, vocab)
    prior = {h.student_id: set(h.tokens) for h in train} if cfg.eval.novelty == "full" else {}
    return Prepared(
        bundle=bundle,
        splits=splits,
        vocab=vocab,
        train=train,
        eval=ev,
        popularity=token_counts(train, vocab.num_tokens),
        prior=prior,
        info=evalharness.student_info(bundle, eval_bundle),
    )


def taper_students(student_ids: Sequence[int], fraction: float, seed: int) -> list[int]:
    """Seeded student subset; subsets for growing fractions are nested."""
    if not 0.0 < fraction <= 1.0:
        raise StageError("taper fraction must lie in (0, 1]")
    ranked = sorted(student_ids, key=lambda s: (corpus._unit_hash(seed + 7919, s), s))
    keep = set(ranked[: int(round(fraction * len(ranked)))])
    return [s for s in student_ids if s in keep]


def decoder_config(cfg: ExperimentConfig, vocab_size: int, mask_mode: str) -> mdl.DecoderConfig:
    m = cfg.model
    return mdl.DecoderConfig(
        vocab_size=vocab_size,
        num_layers=m.num_layers,
        num_heads=m.num_heads,
        d_model=m.d_model,
        d_k=m.d_k,
        d_ff=m.d_ff,
        max_len=cfg.pipeline.context_length,
        mask_mode=mask_mode,
        dropout=m.dropout,
        attention=m.attention,
        positions=m.positions,
    )


def resolve_model(kind: str, cfg: ExperimentConfig, mask_mode: str | None = None) -> tuple[pipeline.PipelineConfig, str, bool]:
    """Pipeline config, mask mode and whether to use per-student windows for a sequence model."""
    if kind == "study":
        return cfg.pipeline, mask_mode or "temporal", False
    if kind == "individual":
        return dataclasses.replace(cfg.pipeline, grouping="individual"), mask_mode or "positional", True
    raise StageError(f"{kind!r} is not a sequence model")


def epoch_fn(histories, pcfg: pipeline.PipelineConfig, individual: bool) -> Callable[[int], list[pipeline.DataPoint]]:
    if individual:
        points = pipeline.individual_epoch(histories, pcfg)
        return lambda epoch: points
    return lambda epoch: pipeline.pack_epoch(histories, pcfg, epoch)


@dataclass
class TrainedModel:
    kind: str
    params: dict
    decoder: mdl.DecoderConfig
    pipeline: pipeline.PipelineConfig
    individual: bool
    trace: list[mdl.TraceRow]


def train_model(
    prep: Prepared,
    cfg: ExperimentConfig,
    kind: str,
    mask_mode: str | None = None,
    students: Sequence[int] | None = None,
    on_step: Callable[[mdl.TraceRow], None] | None = None,
) -> TrainedModel:
    pcfg, mode, individual = resolve_model(kind, cfg, mask_mode)
    histories = prep.train
    if students is not None:
        keep = set(students)
        histories = [h for h in histories if h.student_id in keep]
    dcfg = decoder_config(cfg, prep.vocab.num_tokens, mode)
    params = mdl.init_params(dcfg, cfg.seed)
    tc = cfg.training
    stream = mdl.batch_stream(epoch_fn(histories, pcfg, individual), tc.batch_size, dcfg.max_len, cfg.seed)
    train_cfg = mdl.TrainConfig(steps=tc.total_steps, batch_size=tc.batch_size, seed=cfg.seed)
    params, trace = mdl.train(params, dcfg, stream, tc.schedule(), train_cfg, on_step)
    return TrainedModel(kind, params, dcfg, pcfg, individual, trace)


def recommender_for(trained: TrainedModel, prep: Prepared, cfg: ExperimentConfig, name: str | None = None):
    return evalharness.SequenceRecommender(
        params=trained.params,
        cfg=trained.decoder,
        pipeline=trained.pipeline,
        popularity=prep.popularity,
        individual=trained.individual,
        batch_size=cfg.eval.batch_size,
        name=name or trained.kind,
    )


def build_knn(prep: Prepared, cfg: ExperimentConfig) -> knnrec.InvertedIndex:
    kc = knnrec.KnnConfig(cfg.eval.knn_history, cfg.eval.knn_neighbors)
    return knnrec.build_index((h.tokens for h in prep.train), kc, prep.vocab.num_tokens)


def evaluate(prep: Prepared, recommender, cfg: ExperimentConfig) -> tuple[evalharness.EventSet, evalharness.MetricReport]:
    events = evalharness.collect_events(prep.eval, recommender, prep.prior)
    return events, evalharness.report(events, recommender.name, resamples=cfg.eval.resamples, seed=cfg.seed)


def slice_reports(prep: Prepared, events: evalharness.EventSet, model: str, cfg: ExperimentConfig) -> list[evalharness.SliceReport]:
    return [
        evalharness.slice_events(events, spec, prep.info, model, resamples=cfg.eval.resamples, seed=cfg.seed)
        for spec in evalharness.DEFAULT_SLICES
    ]


# ---------------------------------------------------------------------------
# file-backed stages
# ---------------------------------------------------------------------------


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    corpus.atomic_write_text(path, text)


def model_tag(kind: str, cfg: ExperimentConfig, mask_mode: str | None = None) -> str:
    """Artifact name for a model; non-default grouping or mask choices are spelled out."""
    if kind == "study":
        tag, default = "study", "temporal"
        if cfg.pipeline.grouping != "classroom":
            tag += f"-{cfg.pipeline.grouping}"
    elif kind == "individual":
        tag, default = "individual", "positional"
    else:
        return kind
    if mask_mode not in (None, default):
        tag += f"-{mask_mode}"
    return tag


@dataclass
class StageRunner:
    root: Path
    cfg: ExperimentConfig

    def __post_init__(self):
        self.root = Path(self.root)

    # paths -----------------------------------------------------------------
    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.jsonl"

    def data(self, name: str) -> Path:
        return self.root / "data" / name

    def models(self, name: str) -> Path:
        return self.root / "models" / name

    def reports(self, name: str) -> Path:
        return self.root / "reports" / name

    # manifest --------------------------------------------------------------
    def _entries(self) -> list[dict]:
        if not self.manifest_path.exists():
            return []
        return [json.loads(line) for line in self.manifest_path.read_text(encoding="utf-8").splitlines() if line.strip()]

    def _stage_key(self, stage: str, inputs: Sequence[Path]) -> str:
        parts = [stage, self.cfg.hash()]
        for p in inputs:
            parts.append(f"{p.relative_to(self.root)}={sha256_file(p)}")
        return cfgmod.digest("\n".join(parts))

    def _up_to_date(self, stage: str, key: str) -> bool:
        for entry in reversed(self._entries()):
            if entry["stage"] != stage:
                continue
            if entry["key"] != key:
                return False
            for rel, digest in entry["artifacts"].items():
                p = self.root / rel
                if not p.exists() or sha256_file(p) != digest:
                    return False
            return True
        return False

    def _record(self, stage: str, key: str, artifacts: Sequence[Path], started: float, steps: int = 0) -> None:
        entry = {
            "stage": stage,
            "key": key,
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "artifacts": {str(p.relative_to(self.root)): sha256_file(p) for p in artifacts},
            "wall_clock_s": round(time.time() - started, 3),
            "steps": steps,
            "versions": {"studyrec": __version__, "numpy": np.__version__, "python": platform.python_version()},
        }
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.manifest_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def freeze_config(self) -> Path:
        path = self.root / "config.frozen.ini"
        _atomic_text(path, self.cfg.dumps())
        return path

    def _require(self, *paths: Path) -> None:
        for p in paths:
            if not p.exists():
                raise StageError(f"missing upstream artifact: {p}")

    def _run(self, stage: str, inputs: Sequence[Path], body: Callable[[], tuple[list[Path], int]]) -> list[Path]:
        self._require(*inputs)
        self.freeze_config()
        key = self._stage_key(stage, inputs)
        if self._up_to_date(stage, key):
            log.info("stage %s is up to date", stage)
            entry = next(e for e in reversed(self._entries()) if e["stage"] == stage)
            return [self.root / rel for rel in entry["artifacts"]]
        started = time.time()
        artifacts, steps = body()
        self._record(stage, key, artifacts, started, steps)
        return artifacts

    # stages ----------------------------------------------------------------
    def generate(self) -> list[Path]:
        def body():
            path = self.data("dataset.tsv")
            path.parent.mkdir(parents=True, exist_ok=True)
            corpus.save(generate(self.cfg.cohort), path)
            return [path], 0

        return self._run("generate", [], body)

    def _load_prepared(self) -> Prepared:
        bundle = corpus.load(self.data("dataset.tsv"))
        return prepare(self.cfg, bundle)

    def preprocess(self) -> list[Path]:
        dataset = self.data("dataset.tsv")

        def body():
            prep = self._load_prepared()
            out = [self.data("vocab.tsv")]
            prep.vocab.save(out[0])
            for name in ("train", "validation", "test"):
                p = self.data(f"{name}.tsv")
                corpus.save(prep.splits[name], p)
                out.append(p)
            study_p = self.data(f"packed_{self.cfg.pipeline.grouping}_epoch0.bin")
            pipeline.save_datapoints(study_p, pipeline.pack_epoch(prep.train, self.cfg.pipeline, 0))
            indiv_p = self.data("windows_individual.bin")
            pipeline.save_datapoints(indiv_p, pipeline.individual_epoch(prep.train, self.cfg.pipeline))
            return out + [study_p, indiv_p], 0

        return self._run("preprocess", [dataset], body)

    def train(self, kind: str, mask_mode: str | None = None) -> list[Path]:
        if kind not in MODELS:
            raise StageError(f"unknown model {kind!r}")
        dataset = self.data("dataset.tsv")
        tag = model_tag(kind, self.cfg, mask_mode)

        def body():
            prep = self._load_prepared()
            self.models("").mkdir(parents=True, exist_ok=True)
            if kind == "popularity":
                p = self.models("popularity.csv")
                lines = ["token,count"] + [f"{t},{int(c)}" for t, c in enumerate(prep.popularity)]
                _atomic_text(p, "\n".join(lines) + "\n")
                return [p], 0
            if kind == "knn":
                p = self.models("knn.index")
                knnrec.save_index(p, build_knn(prep, self.cfg))
                return [p], 0
            trained = train_model(prep, self.cfg, kind, mask_mode)
            ckpt = self.models(f"{tag}.ckpt")
            mdl.save_model(ckpt, trained.params, trained.decoder)
            trace = self.models(f"{tag}_trace.csv")
            mdl.write_trace(trace, trained.trace)
            return [ckpt, Path(str(ckpt) + ".config"), trace], len(trained.trace)

        return self._run(f"train:{tag}", [dataset], body)

    def _recommender(self, kind: str, prep: Prepared, mask_mode: str | None):
        tag = model_tag(kind, self.cfg, mask_mode)
        if kind == "popularity":
            self._require(self.models("popularity.csv"))
            return evalharness.PopularityRecommender(prep.popularity)
        if kind == "knn":
            self._require(self.models("knn.index"))
            return evalharness.KnnRecommender(knnrec.load_index(self.models("knn.index")))
        ckpt = self.models(f"{tag}.ckpt")
        self._require(ckpt, Path(str(ckpt) + ".config"))
        params, dcfg = mdl.load_model(ckpt)
        pcfg, _, individual = resolve_model(kind, self.cfg, mask_mode)
        return evalharness.SequenceRecommender(params, dcfg, pcfg, prep.popularity, individual, self.cfg.eval.batch_size, tag)

    def evaluate(self, kind: str, mask_mode: str | None = None) -> list[Path]:
        if kind not in MODELS:
            raise StageError(f"unknown model {kind!r}")
        tag = model_tag(kind, self.cfg, mask_mode)
        upstream = {
            "popularity": [self.models("popularity.csv")],
            "knn": [self.models("knn.index")],
        }.get(kind, [self.models(f"{tag}.ckpt")])
        self._require(*upstream)

        def body():
            prep = self._load_prepared()
            rec = self._recommender(kind, prep, mask_mode)
            events, rep = evaluate(prep, rec, self.cfg)
            out = [self.reports(f"{tag}_hits.csv")]
            _atomic_text(out[0], evalharness.reports_csv([rep]))
            for sl in slice_reports(prep, events, tag, self.cfg):
                p = self.reports(f"{tag}_slice_{sl.spec.variable}.csv")
                _atomic_text(p, evalharness.slices_csv([sl]))
                out.append(p)
            tally = self.reports(f"{tag}_tally.csv")
            _atomic_text(tally, f"events,oov_skipped,errors\n{len(events.events)},{events.oov_skipped},{events.errors}\n")
            return out + [tally], 0

        return self._run(f"eval:{tag}", [self.data("dataset.tsv")] + upstream, body)

    def report(self) -> list[Path]:
        hits = sorted(self.reports("").glob("*_hits.csv")) if self.reports("").exists() else []
        if not hits:
            raise StageError(f"no evaluation reports under {self.reports('')}")

        def body():
            reports = [_read_report(p) for p in hits]
            table = self.reports("table.txt")
            note = (
                f"desk-scale run: batch {self.cfg.training.batch_size} datapoints, "
                f"{self.cfg.training.total_steps} steps, seed {self.cfg.seed}\n\n"
            )
            _atomic_text(table, note + evalharness.table_text(reports))
            combined = self.reports("hits_all.csv")
            _atomic_text(combined, evalharness.reports_csv(reports))
            return [table, combined], 0

        return self._run("report", hits, body)

    def ablate(self, kind: str) -> list[Path]:
        if kind not in ABLATIONS:
            raise StageError(f"unknown ablation {kind!r}; expected one of {', '.join(ABLATIONS)}")
        dataset = self.data("dataset.tsv")

        def body():
            prep = self._load_prepared()
            results = run_ablation(kind, prep, self.cfg)
            overall = self.reports(f"ablation_{kind}.csv")
            _atomic_text(overall, ablation_csv(results))
            engagement = self.reports(f"ablation_{kind}_engagement.csv")
            _atomic_text(engagement, ablation_slice_csv(results, prep, self.cfg))
            return [overall, engagement], 0

        return self._run(f"ablate:{kind}", [dataset], body)


def _read_report(path: Path) -> evalharness.MetricReport:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    rep = evalharness.MetricReport(rows[0]["model"] if rows else path.stem)
    def num(x: str) -> float:
        return math.nan if x == "" else float(x)

    for r in rows:
        rep.rows.append(
            evalharness.MetricRow(r["subset"], int(r["n"]), num(r["mean"]), num(r["ci_low"]), num(r["ci_high"]), int(r["students"]), int(r["events"]))
        )
    return rep


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------


@dataclass
class AblationResult:
    variant: str
    events: evalharness.EventSet
    report: evalharness.MetricReport


def _run_variant(name: str, prep: Prepared, cfg: ExperimentConfig, kind: str, students=None) -> AblationResult:
    log.info("ablation variant %s", name)
    trained = train_model(prep, cfg, kind, students=students)
    events, rep = evaluate(prep, recommender_for(trained, prep, cfg, name), cfg)
    return AblationResult(name, events, rep)


def run_ablation(kind: str, prep: Prepared, cfg: ExperimentConfig) -> list[AblationResult]:
    ab = cfg.ablation
    if kind == "force-mix":
        forced = dataclasses.replace(cfg, pipeline=dataclasses.replace(cfg.pipeline, segment_length=ab.force_mix_segment))
        return [
            _run_variant("study", prep, cfg, "study"),
            _run_variant(f"force-mix-s{ab.force_mix_segment}", prep, forced, "study"),
            _run_variant("individual", prep, cfg, "individual"),
        ]
    if kind == "grouping":
        out = []
        for grouping in ab.groupings:
            if grouping == "individual":
                out.append(_run_variant("individual", prep, cfg, "individual"))
            else:
                g = dataclasses.replace(cfg, pipeline=dataclasses.replace(cfg.pipeline, grouping=grouping))
                out.append(_run_variant(grouping, prep, g, "study"))
        return out
    if kind == "tapering":
        ids = [h.student_id for h in prep.train]
        out = []
        for frac in ab.taper_fractions:
            subset = None if frac == 1.0 else taper_students(ids, frac, cfg.seed)
            pct = f"{int(round(frac * 100))}pct"
            for model_kind in ("study", "individual"):
                out.append(_run_variant(f"{model_kind}-{pct}", prep, cfg, model_kind, subset))
        return out
    raise StageError(f"unknown ablation {kind!r}; expected one of {', '.join(ABLATIONS)}")


def ablation_csv(results: Sequence[AblationResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("variant",) + evalharness.REPORT_COLUMNS[1:])
    for r in results:
        for row in evalharness._report_rows(r.report):
            w.writerow([r.variant] + row[1:])
    return buf.getvalue()


def ablation_slice_csv(results: Sequence[AblationResult], prep: Prepared, cfg: ExperimentConfig) -> str:
    spec = evalharness.DEFAULT_SLICES[0]
    slices = [
        evalharness.slice_events(r.events, spec, prep.info, r.variant, resamples=cfg.eval.resamples, seed=cfg.seed)
        for r in results
    ]
    return evalharness.slices_csv(slices)
