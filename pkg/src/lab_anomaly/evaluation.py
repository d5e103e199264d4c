"""Benchmark manifests, per-level evaluation runs and ACC/FPR/MDR/UR reports."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Sequence

from .client import ImageDecodeError, Observation, ProviderError, VLMClient, request_hash
from .prompts import PromptLevel, assemble_prompt
from .response_parser import Verdict, parse_judgment
from .workflow import Workflow, resolve_point

log = logging.getLogger(__name__)


class ManifestError(ValueError):
    pass


class GroundTruth(str, Enum):
    NORMAL = "normal"
    ABNORMAL = "abnormal"


class Outcome(str, Enum):
    CORRECT = "correct"
    FALSE_POSITIVE = "false_positive"
    MISSED_DETECTION = "missed_detection"
    UNCERTAIN = "uncertain"


class MetricMode(str, Enum):
    POPULATION = "population"
    CLASS = "class"


@dataclass(frozen=True)
class Sample:
    sample_id: str
    image_ref: str
    point_id: str
    ground_truth: GroundTruth
    device: str | None = None
    viewpoint: str | None = None


@dataclass(frozen=True)
class EvalRecord:
    sample_id: str
    level: int
    ground_truth: GroundTruth
    verdict: Verdict
    outcome: Outcome
    request_hash: str
    latency: float = 0.0
    rule: str | None = None
    error: str | None = None

    def to_json(self) -> str:
        data: dict[str, Any] = {
            "sample_id": self.sample_id,
            "level": self.level,
            "label": self.ground_truth.value,
            "verdict": self.verdict.value,
            "outcome": self.outcome.value,
            "rule": self.rule,
            "request_hash": self.request_hash,
            "latency_s": self.latency,
        }
        if self.error is not None:
            data["error"] = self.error
        return json.dumps(data, ensure_ascii=False)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> EvalRecord:
        return cls(
            sample_id=str(data["sample_id"]),
            level=int(data["level"]),
            ground_truth=GroundTruth(data["label"]),
            verdict=Verdict(data["verdict"]),
            outcome=Outcome(data["outcome"]),
            request_hash=str(data["request_hash"]),
            latency=float(data.get("latency_s", 0.0)),
            rule=data.get("rule"),
            error=data.get("error"),
        )


@dataclass(frozen=True)
class MetricsReport:
    level: int
    total: int
    counts: dict[Outcome, int]
    n_normal: int
    n_abnormal: int
    acc: float
    fpr: float
    mdr: float
    ur: float
    mode: MetricMode
    exact: dict[str, Fraction] = field(default_factory=dict, compare=False, repr=False)
    warnings: tuple[str, ...] = ()

    def as_dict(self) -> dict[str, Any]:
        return {
            "level": self.level,
            "mode": self.mode.value,
            "total": self.total,
            "n_normal": self.n_normal,
            "n_abnormal": self.n_abnormal,
            "counts": {o.value: self.counts.get(o, 0) for o in Outcome},
            "acc": self.acc,
            "fpr": self.fpr,
            "mdr": self.mdr,
            "ur": self.ur,
            "warnings": list(self.warnings),
        }


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

_MANIFEST_KEYS = {"sample_id", "image", "point_id", "label", "device", "viewpoint"}


def load_manifest(source: str, base_dir: str | Path | None = None) -> list[Sample]:
    """Parse a JSON-lines manifest. Relative image paths resolve against ``base_dir``."""
    samples: list[Sample] = []
    seen: set[str] = set()
    for lineno, line in enumerate(source.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
        if not isinstance(obj, dict):
            raise ManifestError(f"line {lineno}: expected an object")
        missing = {"sample_id", "image", "point_id", "label"} - set(obj)
        if missing:
            raise ManifestError(f"line {lineno}: missing key(s) {', '.join(sorted(missing))}")
        unknown = set(obj) - _MANIFEST_KEYS
        if unknown:
            raise ManifestError(f"line {lineno}: unknown key(s) {', '.join(sorted(unknown))}")
        try:
            truth = GroundTruth(str(obj["label"]).lower())
        except ValueError:
            raise ManifestError(
                f"line {lineno}: unknown label {obj['label']!r} (expected normal/abnormal)"
            ) from None
        sid = str(obj["sample_id"])
        if sid in seen:
            raise ManifestError(f"line {lineno}: duplicate sample_id {sid!r}")
        seen.add(sid)
        image = str(obj["image"])
        if base_dir is not None and not Path(image).is_absolute():
            image = str(Path(base_dir) / image)
        samples.append(
            Sample(sid, image, str(obj["point_id"]), truth, obj.get("device"), obj.get("viewpoint"))
        )
    return samples


def read_manifest(path: str | Path) -> list[Sample]:
    path = Path(path)
    return load_manifest(path.read_text(encoding="utf-8"), base_dir=path.parent)


# ---------------------------------------------------------------------------
# Outcomes and metrics
# ---------------------------------------------------------------------------


def classify_outcome(ground_truth: GroundTruth, verdict: Verdict) -> Outcome:
    if verdict is Verdict.UNCERTAIN:
        return Outcome.UNCERTAIN
    if ground_truth is GroundTruth.NORMAL and verdict is Verdict.ANOMALOUS:
        return Outcome.FALSE_POSITIVE
    if ground_truth is GroundTruth.ABNORMAL and verdict is Verdict.NORMAL:
        return Outcome.MISSED_DETECTION
    return Outcome.CORRECT


def _pct(num: int, den: int) -> Fraction:
    return Fraction(100 * num, den)


def compute_metrics(
    records: Sequence[EvalRecord], mode: MetricMode | str = MetricMode.POPULATION
) -> MetricsReport:
    """Percentages for one level.

    Population mode divides every count by the total, so the four figures
    sum to 100. Class mode divides false positives by the number of normal
    samples and missed detections by the number of abnormal samples; an
    empty class yields 0 and a warning.
    """
    mode = MetricMode(mode)
    if not records:
        raise ValueError("no records to score")
    levels = {r.level for r in records}
    if len(levels) != 1:
        raise ValueError(f"records span several levels: {sorted(levels)}")

    counts = {o: 0 for o in Outcome}
    for r in records:
        counts[r.outcome] += 1
    total = len(records)
    n_normal = sum(r.ground_truth is GroundTruth.NORMAL for r in records)
    n_abnormal = total - n_normal

    acc = _pct(counts[Outcome.CORRECT], total)
    ur = _pct(counts[Outcome.UNCERTAIN], total)
    warnings: list[str] = []
    if mode is MetricMode.POPULATION:
        fpr = _pct(counts[Outcome.FALSE_POSITIVE], total)
        mdr = _pct(counts[Outcome.MISSED_DETECTION], total)
    else:
        if n_normal:
            fpr = _pct(counts[Outcome.FALSE_POSITIVE], n_normal)
        else:
            fpr = Fraction(0)
            warnings.append("no normal samples; FPR set to 0")
        if n_abnormal:
            mdr = _pct(counts[Outcome.MISSED_DETECTION], n_abnormal)
        else:
            mdr = Fraction(0)
            warnings.append("no abnormal samples; MDR set to 0")

    exact = {"acc": acc, "fpr": fpr, "mdr": mdr, "ur": ur}
    return MetricsReport(
        level=levels.pop(),
        total=total,
        counts=counts,
        n_normal=n_normal,
        n_abnormal=n_abnormal,
        acc=float(acc),
        fpr=float(fpr),
        mdr=float(mdr),
        ur=float(ur),
        mode=mode,
        exact=exact,
        warnings=tuple(warnings),
    )


def metrics_by_level(
    records: Iterable[EvalRecord], mode: MetricMode | str = MetricMode.POPULATION
) -> list[MetricsReport]:
    grouped: dict[int, list[EvalRecord]] = {}
    for r in records:
        grouped.setdefault(r.level, []).append(r)
    return [compute_metrics(grouped[k], mode) for k in sorted(grouped)]


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


def run_eval(
    w: Workflow,
    samples: Sequence[Sample],
    levels: Iterable[int],
    client: VLMClient,
    parallelism: int = 1,
) -> list[EvalRecord]:
    """Judge every sample at every level.

    Provider failures (after the client's retries) become Uncertain records
    carrying the error message. Bad workflows, unresolved points and
    undecodable images raise before any request is sent.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    levels = sorted({PromptLevel(k) for k in levels})
    if not levels:
        raise ValueError("no prompt levels requested")

    observations: dict[str, Observation] = {}
    for s in samples:
        resolve_point(w, s.point_id)
        try:
            observations[s.sample_id] = Observation.from_path(
                s.image_ref, s.point_id, device=s.device, viewpoint=s.viewpoint
            )
        except (OSError, ImageDecodeError) as exc:
            raise ManifestError(f"sample {s.sample_id!r}: {exc}") from exc

    jobs = [(level, s) for level in levels for s in samples]
    bundles = {
        (level, s.point_id): assemble_prompt(w, s.point_id, level)
        for level, s in jobs
    }

    def run_one(job: tuple[PromptLevel, Sample]) -> EvalRecord:
        level, sample = job
        bundle = bundles[(level, sample.point_id)]
        obs = observations[sample.sample_id]
        try:
            raw = client.judge(bundle, obs)
        except ProviderError as exc:
            log.warning("sample %s level %d failed: %s", sample.sample_id, level, exc)
            key = request_hash(
                bundle.content_hash, obs.digest, client.config.model_name, client.config.temperature
            )
            return EvalRecord(
                sample.sample_id, int(level), sample.ground_truth, Verdict.UNCERTAIN,
                Outcome.UNCERTAIN, key, 0.0, None, f"{type(exc).__name__}: {exc}",
            )
        judgment = parse_judgment(raw.text)
        return EvalRecord(
            sample_id=sample.sample_id,
            level=int(level),
            ground_truth=sample.ground_truth,
            verdict=judgment.verdict,
            outcome=classify_outcome(sample.ground_truth, judgment.verdict),
            request_hash=raw.request_hash,
            latency=raw.latency,
            rule=judgment.matched_rule,
        )

    if parallelism == 1:
        records = [run_one(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            records = list(pool.map(run_one, jobs))
    records.sort(key=lambda r: (r.level, r.sample_id))
    return records


def write_results(records: Iterable[EvalRecord]) -> str:
    return "".join(r.to_json() + "\n" for r in records)


def load_results(source: str) -> list[EvalRecord]:
    records = []
    for lineno, line in enumerate(source.splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(EvalRecord.from_dict(json.loads(line)))
        except (ValueError, KeyError, TypeError) as exc:
            raise ManifestError(f"results line {lineno}: {exc}") from exc
    return records


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

_BANNERS = {
    MetricMode.POPULATION: "Mode: population-relative (all rates over all samples)",
    MetricMode.CLASS: "Mode: class-conditional (FPR over normal samples, MDR over abnormal samples)",
}


def render_table(reports: Sequence[MetricsReport]) -> str:
    reports = sorted(reports, key=lambda r: r.level)
    modes = {r.mode for r in reports}
    if len(modes) > 1:
        raise ValueError("render one mode per table")
    lines = []
    if reports:
        lines.append(_BANNERS[reports[0].mode])
    lines.append(f"{'Level':<8}{'N':>6}{'ACC':>8}{'FPR':>8}{'MDR':>8}{'UR':>8}")
    for r in reports:
        lines.append(
            f"{'Level ' + str(r.level):<8}{r.total:>6}"
            f"{r.acc:>8.1f}{r.fpr:>8.1f}{r.mdr:>8.1f}{r.ur:>8.1f}"
        )
        for w in r.warnings:
            lines.append(f"  warning: {w}")
    return "\n".join(lines) + "\n"


def write_report(reports: Sequence[MetricsReport], format: str = "text") -> str:
    """Render reports as plain-text tables (one per mode) or as JSON."""
    if format == "json":
        by_level: dict[int, dict[str, Any]] = {}
        for r in sorted(reports, key=lambda r: (r.level, r.mode.value)):
            entry = by_level.setdefault(r.level, {"level": r.level})
            entry[r.mode.value] = r.as_dict()
        return json.dumps({"levels": list(by_level.values())}, indent=2) + "\n"
    if format != "text":
        raise ValueError(f"unknown report format {format!r}")
    tables = []
    for mode in MetricMode:
        subset = [r for r in reports if r.mode is mode]
        if subset:
            tables.append(render_table(subset))
    return "\n".join(tables)
