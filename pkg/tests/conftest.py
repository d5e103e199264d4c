from __future__ import annotations

import copy
import io
import json
from pathlib import Path

import pytest
from PIL import Image

from lab_anomaly.workflow import bundled_workflow, read_workflow_text

MINIMAL = {
    "context": "Prepare a buffer solution on an automated bench.",
    "steps": [
        {
            "id": "s1",
            "name": "Fetch tube",
            "operator": "the robot arm",
            "target_object": "the test tube",
            "source_location": "the storage rack",
            "destination_location": "the bench rack",
            "actions": ["grasp the tube", "place the tube"],
        },
        {
            "id": "s2",
            "name": "Pour buffer",
            "operator": "the robot arm",
            "target_object": "the buffer bottle",
            "source_location": "the bench",
            "destination_location": "the test tube",
            "actions": ["pour the buffer"],
        },
    ],
    "points": [
        {
            "id": "p1",
            "step_id": "s1",
            "phase": "post",
            "detection": {"object": "the test tube", "expected_state": "on the bench rack"},
            "anomaly_label": {"normal": "The tube stands in the rack.", "abnormal": "The rack slot is empty."},
        },
        {
            "id": "p2",
            "step_id": "s2",
            "phase": "pre",
            "detection": {"object": "the buffer bottle", "expected_state": "next to the tube"},
            "anomaly_label": {"normal": "", "abnormal": "The buffer bottle is missing."},
            "camera_hint": "wrist camera",
        },
    ],
}


@pytest.fixture
def minimal_doc() -> dict:
    return copy.deepcopy(MINIMAL)


@pytest.fixture
def minimal_text(minimal_doc) -> str:
    return json.dumps(minimal_doc)


@pytest.fixture(scope="session")
def silicone():
    return bundled_workflow("silicone_workflow")


@pytest.fixture(scope="session")
def demo_text() -> str:
    return read_workflow_text("builtin:transfer_demo")


def png_bytes(size=(64, 48), color=(10, 120, 200), mode="RGB", fmt="PNG") -> bytes:
    img = Image.new(mode, size, color)
    # A gradient keeps resampling non-trivial.
    px = img.load()
    for x in range(0, size[0], 3):
        px[x, 0] = color[::-1] if mode == "RGB" else px[x, 0]
    buf = io.BytesIO()
    img.save(buf, format=fmt)
    return buf.getvalue()


def write_image(path: Path, color=(10, 120, 200), size=(64, 48)) -> Path:
    path.write_bytes(png_bytes(size, color))
    return path


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Acceptance summary: one line per criterion-marked test.
# ---------------------------------------------------------------------------

_CRITERIA: list[tuple[str, str, str]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        timing = dict(item.user_properties).get("elapsed")
        detail = f"{timing:.3f}s" if timing is not None else ""
        _CRITERIA.append((marker.args[0], rep.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    labels = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}
    for name, outcome, detail in sorted(_CRITERIA):
        terminalreporter.write_line(f"[{labels.get(outcome, outcome.upper())}] {name} {detail}".rstrip())
