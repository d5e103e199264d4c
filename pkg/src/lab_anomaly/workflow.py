"""Declarative experiment workflows: context, ordered meta-steps, monitoring points.

Workflows are stored as a single JSON document::

    {
      "context": "...",
      "steps": [{"id", "name", "operator", "target_object",
                 "source_location", "destination_location", "actions": [...]}],
      "points": [{"id", "step_id", "phase": "pre"|"post",
                  "detection": {"object", "expected_state"},
                  "anomaly_label": {"normal", "abnormal"},
                  "camera_hint": optional}]
    }

Structural problems (bad JSON, wrong types, unknown keys) raise while
parsing. Semantic problems (duplicate ids, dangling references, empty
required text) are reported by :func:`validate_workflow`.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any


class WorkflowError(ValueError):
    """Base class for workflow loading failures."""


class WorkflowSyntaxError(WorkflowError):
    """The document is not valid JSON."""


class WorkflowConstraintError(WorkflowError):
    """The document violates a structural or semantic constraint."""

    def __init__(self, message: str, violations: tuple[Violation, ...] = ()):
        super().__init__(message)
        self.violations = violations


class WorkflowReferenceError(WorkflowConstraintError):
    """A monitoring point names a step that does not exist."""


class PointNotFoundError(LookupError):
    pass


class Phase(str, Enum):
    PRE = "pre"
    POST = "post"


@dataclass(frozen=True)
class ExperimentContext:
    text: str


@dataclass(frozen=True)
class MetaStep:
    id: str
    name: str
    operator: str
    target_object: str
    source_location: str
    destination_location: str
    actions: tuple[str, ...]


@dataclass(frozen=True)
class DetectionTarget:
    object: str
    expected_state: str

    def render(self) -> str:
        return f"Check whether {self.object} is {self.expected_state}."


@dataclass(frozen=True)
class AnomalyLabelDescription:
    normal_condition: str
    abnormal_condition: str


@dataclass(frozen=True)
class MonitoringPoint:
    id: str
    step_id: str
    detection_target: DetectionTarget
    anomaly_label: AnomalyLabelDescription
    phase: Phase = Phase.POST
    camera_hint: str | None = None


@dataclass(frozen=True)
class Workflow:
    context: ExperimentContext
    steps: tuple[MetaStep, ...]
    points: tuple[MonitoringPoint, ...]

    def step(self, step_id: str) -> MetaStep:
        for s in self.steps:
            if s.id == step_id:
                return s
        raise KeyError(step_id)


@dataclass(frozen=True)
class Violation:
    subject: str
    rule: str
    kind: str = "constraint"  # or "reference"

    def __str__(self) -> str:
        return f"{self.subject}: {self.rule}"


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_TOP_KEYS = {"context", "steps", "points"}
_STEP_KEYS = {
    "id", "name", "operator", "target_object",
    "source_location", "destination_location", "actions",
}
_POINT_REQUIRED = {"id", "step_id", "detection", "anomaly_label"}
_POINT_KEYS = _POINT_REQUIRED | {"phase", "camera_hint"}
_DETECTION_KEYS = {"object", "expected_state"}
_LABEL_KEYS = {"normal", "abnormal"}


def _check_keys(obj: Any, where: str, allowed: set[str], required: set[str]) -> dict:
    if not isinstance(obj, dict):
        raise WorkflowConstraintError(f"{where}: expected an object, got {type(obj).__name__}")
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise WorkflowConstraintError(f"{where}: unknown key(s) {', '.join(unknown)}")
    missing = sorted(required - set(obj))
    if missing:
        raise WorkflowConstraintError(f"{where}: missing key(s) {', '.join(missing)}")
    return obj


def _text(value: Any, where: str) -> str:
    if not isinstance(value, str):
        raise WorkflowConstraintError(f"{where}: expected a string")
    return value


def _parse_step(raw: Any, index: int) -> MetaStep:
    where = f"steps[{index}]"
    obj = _check_keys(raw, where, _STEP_KEYS, _STEP_KEYS)
    actions = obj["actions"]
    if not isinstance(actions, list):
        raise WorkflowConstraintError(f"{where}.actions: expected an array")
    return MetaStep(
        id=_text(obj["id"], f"{where}.id"),
        name=_text(obj["name"], f"{where}.name"),
        operator=_text(obj["operator"], f"{where}.operator"),
        target_object=_text(obj["target_object"], f"{where}.target_object"),
        source_location=_text(obj["source_location"], f"{where}.source_location"),
        destination_location=_text(obj["destination_location"], f"{where}.destination_location"),
        actions=tuple(_text(a, f"{where}.actions[{i}]") for i, a in enumerate(actions)),
    )


def _parse_point(raw: Any, index: int) -> MonitoringPoint:
    where = f"points[{index}]"
    obj = _check_keys(raw, where, _POINT_KEYS, _POINT_REQUIRED)
    det = _check_keys(obj["detection"], f"{where}.detection", _DETECTION_KEYS, _DETECTION_KEYS)
    label = _check_keys(obj["anomaly_label"], f"{where}.anomaly_label", _LABEL_KEYS, {"abnormal"})
    phase_raw = obj.get("phase", Phase.POST.value)
    try:
        phase = Phase(phase_raw)
    except ValueError:
        raise WorkflowConstraintError(
            f"{where}.phase: expected 'pre' or 'post', got {phase_raw!r}"
        ) from None
    hint = obj.get("camera_hint")
    if hint is not None:
        hint = _text(hint, f"{where}.camera_hint")
    return MonitoringPoint(
        id=_text(obj["id"], f"{where}.id"),
        step_id=_text(obj["step_id"], f"{where}.step_id"),
        phase=phase,
        detection_target=DetectionTarget(
            object=_text(det["object"], f"{where}.detection.object"),
            expected_state=_text(det["expected_state"], f"{where}.detection.expected_state"),
        ),
        anomaly_label=AnomalyLabelDescription(
            normal_condition=_text(label.get("normal", ""), f"{where}.anomaly_label.normal"),
            abnormal_condition=_text(label["abnormal"], f"{where}.anomaly_label.abnormal"),
        ),
        camera_hint=hint,
    )


def parse_workflow(source: str) -> Workflow:
    """Parse a workflow document without semantic validation."""
    try:
        doc = json.loads(source)
    except json.JSONDecodeError as exc:
        raise WorkflowSyntaxError(f"malformed workflow document: {exc}") from exc
    doc = _check_keys(doc, "workflow", _TOP_KEYS, _TOP_KEYS)
    if not isinstance(doc["steps"], list):
        raise WorkflowConstraintError("steps: expected an array")
    if not isinstance(doc["points"], list):
        raise WorkflowConstraintError("points: expected an array")
    return Workflow(
        context=ExperimentContext(_text(doc["context"], "context")),
        steps=tuple(_parse_step(s, i) for i, s in enumerate(doc["steps"])),
        points=tuple(_parse_point(p, i) for i, p in enumerate(doc["points"])),
    )


def load_workflow(source: str) -> Workflow:
    """Parse and validate a workflow document.

    Raises :class:`WorkflowSyntaxError` for malformed JSON,
    :class:`WorkflowReferenceError` when a point names an unknown step, and
    :class:`WorkflowConstraintError` for every other violation.
    """
    w = parse_workflow(source)
    violations = validate_workflow(w)
    if violations:
        message = "; ".join(str(v) for v in violations)
        if any(v.kind == "reference" for v in violations):
            raise WorkflowReferenceError(message, tuple(violations))
        raise WorkflowConstraintError(message, tuple(violations))
    return w


def read_workflow(path: str | Path, *, validate: bool = True) -> Workflow:
    """Load a workflow from a file path or ``builtin:<name>``."""
    text = read_workflow_text(path)
    return load_workflow(text) if validate else parse_workflow(text)


def read_workflow_text(path: str | Path) -> str:
    path = str(path)
    if path.startswith("builtin:"):
        name = path.split(":", 1)[1]
        ref = resources.files("lab_anomaly") / "data" / f"{name}.json"
        if not ref.is_file():
            raise FileNotFoundError(f"no bundled workflow named {name!r}")
        return ref.read_text(encoding="utf-8")
    return Path(path).read_text(encoding="utf-8")


def bundled_workflow(name: str = "silicone_workflow") -> Workflow:
    return read_workflow(f"builtin:{name}")


def workflow_to_dict(w: Workflow) -> dict[str, Any]:
    points = []
    for p in w.points:
        entry: dict[str, Any] = {
            "id": p.id,
            "step_id": p.step_id,
            "phase": p.phase.value,
            "detection": {
                "object": p.detection_target.object,
                "expected_state": p.detection_target.expected_state,
            },
            "anomaly_label": {
                "normal": p.anomaly_label.normal_condition,
                "abnormal": p.anomaly_label.abnormal_condition,
            },
        }
        if p.camera_hint is not None:
            entry["camera_hint"] = p.camera_hint
        points.append(entry)
    return {
        "context": w.context.text,
        "steps": [
            {
                "id": s.id,
                "name": s.name,
                "operator": s.operator,
                "target_object": s.target_object,
                "source_location": s.source_location,
                "destination_location": s.destination_location,
                "actions": list(s.actions),
            }
            for s in w.steps
        ],
        "points": points,
    }


def dump_workflow(w: Workflow) -> str:
    return json.dumps(workflow_to_dict(w), indent=2, ensure_ascii=False) + "\n"


# ---------------------------------------------------------------------------
# Validation and lookup
# ---------------------------------------------------------------------------


def validate_workflow(w: Workflow) -> list[Violation]:
    """Return every invariant violation in ``w``; an empty list means valid."""
    out: list[Violation] = []
    if not w.context.text.strip():
        out.append(Violation("context", "experiment context is empty"))
    if not w.steps:
        out.append(Violation("steps", "workflow has no steps"))

    step_counts = Counter(s.id for s in w.steps)
    point_counts = Counter(p.id for p in w.points)
    reported: set[str] = set()
    for s in w.steps:
        if not s.id.strip():
            out.append(Violation(f"steps[{w.steps.index(s)}]", "step id is empty"))
        if step_counts[s.id] > 1 and s.id not in reported:
            reported.add(s.id)
            out.append(Violation(s.id, "duplicate step id (step ids must be unique)"))
        if not s.actions:
            out.append(Violation(s.id, "step has an empty actions list"))
        elif any(not a.strip() for a in s.actions):
            out.append(Violation(s.id, "step has a blank action"))

    step_ids = set(step_counts)
    for p in w.points:
        if not p.id.strip():
            out.append(Violation(f"points[{w.points.index(p)}]", "point id is empty"))
        if point_counts[p.id] > 1 and p.id not in reported:
            reported.add(p.id)
            out.append(Violation(p.id, "duplicate point id (point ids must be unique)"))
        if p.id in step_ids and p.id not in reported:
            reported.add(p.id)
            out.append(Violation(p.id, "id is used by both a step and a point"))
        if p.step_id not in step_ids:
            out.append(
                Violation(p.id, f"references unknown step {p.step_id!r}", kind="reference")
            )
        if not p.detection_target.object.strip():
            out.append(Violation(p.id, "detection object is empty"))
        if not p.detection_target.expected_state.strip():
            out.append(Violation(p.id, "detection expected_state is empty"))
        if not p.anomaly_label.abnormal_condition.strip():
            out.append(Violation(p.id, "abnormal condition is empty"))
    return out


def resolve_point(w: Workflow, point_id: str) -> tuple[MetaStep, MonitoringPoint]:
    for p in w.points:
        if p.id == point_id:
            try:
                return w.step(p.step_id), p
            except KeyError:
                raise PointNotFoundError(
                    f"point {point_id!r} references unknown step {p.step_id!r}"
                ) from None
    raise PointNotFoundError(f"unknown monitoring point {point_id!r}")


def checkpoints(w: Workflow, step_id: str | None = None) -> list[tuple[MetaStep, MonitoringPoint]]:
    """Monitoring points in execution order: step order, pre before post.

    Points sharing a (step, phase) slot keep their declaration order.
    """
    order = {s.id: i for i, s in enumerate(w.steps)}
    phase_rank = {Phase.PRE: 0, Phase.POST: 1}
    indexed = [
        (order[p.step_id], phase_rank[p.phase], i, p)
        for i, p in enumerate(w.points)
        if p.step_id in order and (step_id is None or p.step_id == step_id)
    ]
    indexed.sort(key=lambda t: t[:3])
    return [(w.steps[t[0]], t[3]) for t in indexed]
