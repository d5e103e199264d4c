"""Vision-language process anomaly detection for laboratory workflows."""

from .client import (
    ChatCompletionsProvider,
    MockProvider,
    Observation,
    ProviderConfig,
    RawResponse,
    ResponseCache,
    VLMClient,
    judge_observation,
    mock_provider,
    preprocess_image,
)
from .evaluation import (
    EvalRecord,
    GroundTruth,
    MetricMode,
    MetricsReport,
    Outcome,
    Sample,
    classify_outcome,
    compute_metrics,
    load_manifest,
    run_eval,
    write_report,
)
from .prompts import PromptBundle, PromptLevel, SectionKind, assemble_prompt, phi_select
from .response_parser import Judgment, Verdict, parse_corpus, parse_judgment
from .workflow import (
    Workflow,
    bundled_workflow,
    load_workflow,
    resolve_point,
    validate_workflow,
)

__version__ = "0.1.0"
