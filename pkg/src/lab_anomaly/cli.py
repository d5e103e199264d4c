"""Command-line entry point: ``lab-anomaly <command> ...``.

Exit codes
    0   success / Normal verdict
    1   I/O or configuration error
    2   workflow violations (validate) or unknown monitoring point
    3   requested prompt level needs content the workflow lacks
    4   provider failure after retries
    10  Anomalous verdict
    11  Uncertain verdict
    64  usage error
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator, Sequence, TextIO

from .client import (
    ChatCompletionsProvider,
    ImageDecodeError,
    MockProvider,
    Observation,
    ProviderConfig,
    ProviderError,
    ResponseCache,
    VLMClient,
    script_digest,
)
from .evaluation import (
    ManifestError,
    MetricMode,
    load_results,
    metrics_by_level,
    read_manifest,
    run_eval,
    write_report,
    write_results,
)
from .prompts import MissingContentError, assemble_prompt
from .response_parser import Verdict, parse_judgment
from .workflow import (
    Phase,
    PointNotFoundError,
    Workflow,
    WorkflowError,
    checkpoints,
    parse_workflow,
    read_workflow,
    read_workflow_text,
    validate_workflow,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INVALID = 2
EXIT_MISSING_CONTENT = 3
EXIT_PROVIDER = 4
EXIT_ANOMALY = 10
EXIT_UNCERTAIN = 11
EXIT_USAGE = 64

VERDICT_EXIT = {
    Verdict.NORMAL: EXIT_OK,
    Verdict.ANOMALOUS: EXIT_ANOMALY,
    Verdict.UNCERTAIN: EXIT_UNCERTAIN,
}

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}


class CommandError(Exception):
    def __init__(self, message: str, exit_code: int = EXIT_ERROR):
        super().__init__(message)
        self.exit_code = exit_code


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _levels_csv(value: str) -> list[int]:
    try:
        levels = sorted({int(v) for v in value.split(",") if v.strip()})
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid level list {value!r}") from None
    if not levels or any(k not in (1, 2, 3, 4) for k in levels):
        raise argparse.ArgumentTypeError(f"levels must be drawn from 1,2,3,4: {value!r}")
    return levels


def _positive_int(value: str) -> int:
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {value!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="lab-anomaly",
        description="Vision-language process anomaly detection for laboratory workflows.",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    provider = _Parser(add_help=False)
    provider.add_argument("--provider", choices=("live", "mock"), default=None)
    provider.add_argument("--endpoint", help="chat completions URL")
    provider.add_argument("--model")
    provider.add_argument("--mock-script", help="JSON script for --provider mock")
    provider.add_argument("--config", help="JSON file with provider defaults")
    provider.add_argument("--cache-dir", help="directory for cached responses")

    p = sub.add_parser("validate", help="check a workflow file")
    p.add_argument("--workflow", required=True)

    p = sub.add_parser("render-prompt", help="print the prompt for one point and level")
    p.add_argument("--workflow", required=True)
    p.add_argument("--point", required=True)
    p.add_argument("--level", type=int, choices=(1, 2, 3, 4), required=True)

    p = sub.add_parser("judge", parents=[provider], help="judge one image")
    p.add_argument("--workflow", required=True)
    p.add_argument("--point", required=True)
    p.add_argument("--level", type=int, choices=(1, 2, 3, 4), default=4)
    p.add_argument("--image", required=True)
    p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("eval", parents=[provider], help="evaluate a manifest across levels")
    p.add_argument("--workflow", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--levels", type=_levels_csv, default=[1, 2, 3, 4])
    p.add_argument("--parallelism", type=_positive_int, default=None)
    p.add_argument("--out", required=True, help="JSON-lines results file")
    p.add_argument("--mode", choices=("population", "class", "both"), default="population")

    p = sub.add_parser("report", help="metric tables from a results file")
    p.add_argument("results")
    p.add_argument("--mode", choices=("population", "class", "both"), default="population")
    p.add_argument("--format", choices=("text", "json"), default="text")

    p = sub.add_parser("monitor", parents=[provider], help="judge checkpoints in workflow order")
    p.add_argument("--workflow", required=True)
    p.add_argument(
        "--image", "--images", dest="images", default="-",
        help="directory of images (lexical order) or '-' for paths on stdin",
    )
    p.add_argument("--step", help="only monitor checkpoints of this step")
    p.add_argument("--level", type=int, choices=(1, 2, 3, 4), default=2)
    p.add_argument("--halt-on-anomaly", action="store_true")
    p.add_argument("--verbose", action="store_true")
    return parser


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _load_workflow(path: str) -> Workflow:
    try:
        return read_workflow(path)
    except OSError as exc:
        raise CommandError(f"cannot read workflow {path}: {exc}") from exc
    except WorkflowError as exc:
        raise CommandError(f"invalid workflow {path}: {exc}") from exc


def _bundle(w: Workflow, point: str, level: int):
    try:
        return assemble_prompt(w, point, level)
    except PointNotFoundError as exc:
        raise CommandError(str(exc), EXIT_INVALID) from exc
    except MissingContentError as exc:
        raise CommandError(f"level {level}: {exc}", EXIT_MISSING_CONTENT) from exc


def _read_config(path: str | None) -> dict[str, Any]:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CommandError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise CommandError(f"config {path} must be a JSON object")
    return data


@dataclass
class _Runtime:
    client: VLMClient
    parallelism: int


def _build_runtime(args: argparse.Namespace) -> _Runtime:
    """Defaults, then config file, then command-line flags."""
    file_cfg = _read_config(args.config)
    provider_kind = args.provider or file_cfg.pop("provider", "live")
    mock_script = args.mock_script or file_cfg.pop("mock_script", None)
    cache_dir = args.cache_dir or file_cfg.pop("cache_dir", None)
    parallelism = getattr(args, "parallelism", None) or file_cfg.pop("parallelism", 1)
    for key in ("provider", "mock_script", "cache_dir", "parallelism"):
        file_cfg.pop(key, None)

    settings = dict(file_cfg)
    if args.endpoint:
        settings["endpoint_url"] = args.endpoint
    if args.model:
        settings["model_name"] = args.model

    if provider_kind == "mock":
        if not mock_script:
            raise CommandError("--provider mock requires --mock-script", EXIT_USAGE)
        try:
            provider = MockProvider.from_file(mock_script)
            digest = script_digest(mock_script)
        except (OSError, ValueError, TypeError) as exc:
            raise CommandError(f"cannot load mock script {mock_script}: {exc}") from exc
        # Tie cached responses to the script content.
        settings.setdefault("model_name", f"mock-{digest[:12]}")
    elif provider_kind != "live":
        raise CommandError(f"unknown provider {provider_kind!r}", EXIT_USAGE)

    try:
        cfg = ProviderConfig.from_mapping(settings)
    except (TypeError, ValueError) as exc:
        raise CommandError(f"bad provider configuration: {exc}") from exc
    if provider_kind == "live":
        provider = ChatCompletionsProvider(cfg)
    cache = ResponseCache(cache_dir) if cache_dir else None
    return _Runtime(VLMClient(provider, cfg, cache), int(parallelism))


def _observation(path: str, point_id: str) -> Observation:
    try:
        return Observation.from_path(path, point_id)
    except OSError as exc:
        raise CommandError(f"cannot read image {path}: {exc}") from exc
    except ImageDecodeError as exc:
        raise CommandError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_validate(args: argparse.Namespace, out: TextIO) -> int:
    try:
        w = parse_workflow(read_workflow_text(args.workflow))
    except OSError as exc:
        raise CommandError(f"cannot read workflow {args.workflow}: {exc}") from exc
    except WorkflowError as exc:
        raise CommandError(f"malformed workflow {args.workflow}: {exc}") from exc
    violations = validate_workflow(w)
    for v in violations:
        print(v, file=out)
    return EXIT_INVALID if violations else EXIT_OK


def cmd_render_prompt(args: argparse.Namespace, out: TextIO) -> int:
    w = _load_workflow(args.workflow)
    bundle = _bundle(w, args.point, args.level)
    print(f"# level={int(bundle.level)} point={args.point} hash={bundle.content_hash}", file=out)
    out.write(bundle.rendered)
    return EXIT_OK


def cmd_judge(args: argparse.Namespace, out: TextIO) -> int:
    w = _load_workflow(args.workflow)
    bundle = _bundle(w, args.point, args.level)
    obs = _observation(args.image, args.point)
    rt = _build_runtime(args)
    try:
        raw = rt.client.judge(bundle, obs)
    except ProviderError as exc:
        raise CommandError(f"provider failure: {exc}", EXIT_PROVIDER) from exc
    judgment = parse_judgment(raw.text)
    print(f"verdict={judgment.verdict.value} rule={judgment.matched_rule}", file=out)
    if args.verbose:
        print(judgment.rationale, file=out)
    return VERDICT_EXIT[judgment.verdict]


class _CountingProvider:
    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    def complete(self, query):
        self.calls += 1
        return self.inner.complete(query)


def _modes(flag: str) -> list[MetricMode]:
    return list(MetricMode) if flag == "both" else [MetricMode(flag)]


def cmd_eval(args: argparse.Namespace, out: TextIO) -> int:
    w = _load_workflow(args.workflow)
    try:
        samples = read_manifest(args.manifest)
    except OSError as exc:
        raise CommandError(f"cannot read manifest {args.manifest}: {exc}") from exc
    except ManifestError as exc:
        raise CommandError(f"invalid manifest {args.manifest}: {exc}") from exc
    if not samples:
        raise CommandError(f"manifest {args.manifest} has no samples")
    rt = _build_runtime(args)
    counter = _CountingProvider(rt.client.provider)
    rt.client.provider = counter
    try:
        records = run_eval(w, samples, args.levels, rt.client, rt.parallelism)
    except (ManifestError, PointNotFoundError, MissingContentError) as exc:
        raise CommandError(str(exc)) from exc

    Path(args.out).write_text(write_results(records), encoding="utf-8")
    reports = [r for m in _modes(args.mode) for r in metrics_by_level(records, m)]
    out.write(write_report(reports))
    failed = sum(r.error is not None for r in records)
    print(
        f"records={len(records)} provider_calls={counter.calls} failed={failed} out={args.out}",
        file=sys.stderr,
    )
    return EXIT_OK


def cmd_report(args: argparse.Namespace, out: TextIO) -> int:
    try:
        text = Path(args.results).read_text(encoding="utf-8")
    except OSError as exc:
        raise CommandError(f"cannot read results {args.results}: {exc}") from exc
    try:
        records = load_results(text)
    except ManifestError as exc:
        raise CommandError(str(exc)) from exc
    if not records:
        raise CommandError(f"no records in {args.results}")
    modes = list(MetricMode) if args.format == "json" else _modes(args.mode)
    reports = [r for m in modes for r in metrics_by_level(records, m)]
    out.write(write_report(reports, args.format))
    return EXIT_OK


def _image_stream(source: str, stdin: TextIO) -> Iterator[str]:
    if source == "-":
        for line in stdin:
            if line.strip():
                yield line.strip()
        return
    root = Path(source)
    if not root.is_dir():
        raise CommandError(f"image source {source} is not a directory")
    yield from (
        str(p) for p in sorted(root.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES
    )


def cmd_monitor(args: argparse.Namespace, out: TextIO, stdin: TextIO | None = None) -> int:
    w = _load_workflow(args.workflow)
    queue = checkpoints(w, args.step)
    if not queue:
        raise CommandError("no checkpoints to monitor")
    stream = _image_stream(args.images, stdin or sys.stdin)
    if args.images != "-":
        images = list(stream)
        if len(images) < len(queue):
            raise CommandError(
                f"image source underrun: {len(images)} image(s) for {len(queue)} checkpoints"
            )
        stream = iter(images)
    rt = _build_runtime(args)

    seen: set[Verdict] = set()
    total = len(queue)
    for i, (step, point) in enumerate(queue, 1):
        bundle = _bundle(w, point.id, args.level)
        path = next(stream, None)
        if path is None:
            raise CommandError(
                f"image source underrun: no image for checkpoint {i}/{total} ({point.id})"
            )
        obs = _observation(path, point.id)
        try:
            raw = rt.client.judge(bundle, obs)
        except ProviderError as exc:
            raise CommandError(f"provider failure at {point.id}: {exc}", EXIT_PROVIDER) from exc
        judgment = parse_judgment(raw.text)
        seen.add(judgment.verdict)
        phase = "pre-step" if point.phase is Phase.PRE else "post-step"
        summary = {
            Verdict.NORMAL: "no anomaly",
            Verdict.ANOMALOUS: "anomaly detected",
            Verdict.UNCERTAIN: "uncertain",
        }[judgment.verdict]
        print(
            f"[{i}/{total}] step={step.id} phase={phase} point={point.id} "
            f"verdict={judgment.verdict.value} rule={judgment.matched_rule}: {summary}",
            file=out,
        )
        if args.verbose:
            print(judgment.rationale, file=out)
        out.flush()
        if judgment.verdict is Verdict.ANOMALOUS:
            print(f"ALERT: anomaly at point {point.id} ({step.name}, {phase})", file=out)
            if args.halt_on_anomaly:
                return EXIT_ANOMALY
    if Verdict.ANOMALOUS in seen:
        return EXIT_ANOMALY
    if Verdict.UNCERTAIN in seen:
        return EXIT_UNCERTAIN
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "render-prompt": cmd_render_prompt,
    "judge": cmd_judge,
    "eval": cmd_eval,
    "report": cmd_report,
    "monitor": cmd_monitor,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args, sys.stdout)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
