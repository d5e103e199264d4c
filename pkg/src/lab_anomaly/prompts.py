"""Level-controlled prompt assembly.

Each of the four prompt levels adds one section on top of the previous one:

    1  Experiment Context
    2  + Stage Description
    3  + Detection Content
    4  + Anomaly Label Description

The reasoning instruction is identical at every level so that differences
between levels come from the sections alone.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum, IntEnum

from .workflow import (
    AnomalyLabelDescription,
    DetectionTarget,
    MetaStep,
    Workflow,
    resolve_point,
)

INSTRUCTION = (
    "Analyze the image step by step against the information above. "
    "End with one line: 'Conclusion: anomaly detected.' or "
    "'Conclusion: no anomaly detected.' "
    "If you cannot decide, end with 'Conclusion: uncertain.'"
)


class MissingContentError(ValueError):
    """The requested level needs a section whose source text is empty."""


class PromptLevel(IntEnum):
    CONTEXT = 1
    STAGE = 2
    DETECTION = 3
    LABEL = 4


class SectionKind(Enum):
    EXPERIMENT_CONTEXT = "Experiment Context"
    STAGE_DESCRIPTION = "Stage Description"
    DETECTION_CONTENT = "Detection Content"
    ANOMALY_LABEL_DESCRIPTION = "Anomaly Label Description"

    @property
    def heading(self) -> str:
        return self.value


SECTION_ORDER: tuple[SectionKind, ...] = tuple(SectionKind)


@dataclass(frozen=True)
class PromptSection:
    kind: SectionKind
    heading: str
    body: str


@dataclass(frozen=True)
class PromptBundle:
    level: PromptLevel
    sections: tuple[PromptSection, ...]
    instruction: str
    rendered: str
    content_hash: str
    point_id: str | None = None

    def kinds(self) -> tuple[SectionKind, ...]:
        return tuple(s.kind for s in self.sections)


def phi_select(level: int) -> frozenset[SectionKind]:
    """Section kinds included at ``level`` (the first ``level`` in fixed order)."""
    level = PromptLevel(level)
    return frozenset(SECTION_ORDER[: int(level)])


def _join_actions(actions: tuple[str, ...]) -> str:
    return "; ".join(f"({i}) {a.strip()}" for i, a in enumerate(actions, 1))


def render_stage_description(step: MetaStep) -> str:
    return (
        f"Current stage: {step.name.strip()}. "
        f"Operator: {step.operator.strip()}. "
        f"Target object: {step.target_object.strip()}. "
        f"Start position: {step.source_location.strip()}. "
        f"Destination: {step.destination_location.strip()}. "
        f"Actions: {_join_actions(step.actions)}."
    )


def render_detection_content(target: DetectionTarget) -> str:
    return target.render()


def render_anomaly_label(label: AnomalyLabelDescription) -> str:
    text = f"Abnormal when: {label.abnormal_condition.strip()}"
    if label.normal_condition.strip():
        text += f"\nNormal when: {label.normal_condition.strip()}"
    return text


def render_bundle_text(sections: tuple[PromptSection, ...], instruction: str) -> str:
    blocks = [f"## {s.heading}\n{s.body}" for s in sections]
    blocks.append(f"## Instruction\n{instruction}")
    return "\n\n".join(blocks) + "\n"


def content_hash(rendered: str) -> str:
    return hashlib.sha256(rendered.encode("utf-8")).hexdigest()


def assemble_prompt(w: Workflow, point_id: str, level: int) -> PromptBundle:
    """Build the prompt for one monitoring point at one granularity level.

    Raises ``PointNotFoundError`` for an unknown point and
    :class:`MissingContentError` when a required section would be empty.
    """
    level = PromptLevel(level)
    step, point = resolve_point(w, point_id)
    wanted = phi_select(level)

    sections = []
    for kind in SECTION_ORDER:
        if kind not in wanted:
            continue
        if kind is SectionKind.EXPERIMENT_CONTEXT:
            if not w.context.text.strip():
                raise MissingContentError("experiment context is empty")
            body = w.context.text.strip()
        elif kind is SectionKind.STAGE_DESCRIPTION:
            if not step.actions or not step.target_object.strip():
                raise MissingContentError(f"step {step.id!r} lacks a target object or actions")
            body = render_stage_description(step)
        elif kind is SectionKind.DETECTION_CONTENT:
            t = point.detection_target
            if not t.object.strip() or not t.expected_state.strip():
                raise MissingContentError(f"point {point.id!r} has no detection target")
            body = render_detection_content(t)
        else:
            if not point.anomaly_label.abnormal_condition.strip():
                raise MissingContentError(f"point {point.id!r} has no abnormal condition")
            body = render_anomaly_label(point.anomaly_label)
        sections.append(PromptSection(kind, kind.heading, body))

    sections_t = tuple(sections)
    rendered = render_bundle_text(sections_t, INSTRUCTION)
    return PromptBundle(
        level=level,
        sections=sections_t,
        instruction=INSTRUCTION,
        rendered=rendered,
        content_hash=content_hash(rendered),
        point_id=point.id,
    )
