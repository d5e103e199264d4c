"""Rule-based extraction of a verdict from a chain-of-thought response.

Scope selection
    S1  If the text contains a conclusion marker (``conclusion:``,
        ``final answer:``, ``verdict:``, ``judgment:``), each marker opens a
        segment running to the next marker. The verdict comes from the last
        segment. If two segments give contradictory definite verdicts the
        result is Uncertain (R4).
    S2  Without a marker the scope is the last two sentences.

Rules inside a scope, highest precedence first
    R1  uncertainty phrase ("cannot determine", "cannot tell", "unclear",
        "not sure", "uncertain", "insufficient", plus the variants
        "can't determine", "can't tell", "unable to determine") -> Uncertain
    R2  negated anomaly: "no anomaly", "no anomalies", "not abnormal",
        "not anomalous", "no issue(s)", "is/are/appears/looks/seems (to be)
        normal", a bare "normal" opening a marker segment, or any R3
        keyword preceded by a negation cue (no / not / nothing / without /
        never / -n't) with at most two words in between and no
        punctuation -> Normal
    R3  positive anomaly. Strong: "anomaly detected", "anomalies detected".
        Weak: "anomalous", "abnormal", "abnormality", "anomaly",
        "anomalies", "not normal" -> Anomalous. R3 matches that overlap an
        R2 match are part of that negation and do not count.
    R2 outranks weak R3 matches. R2 together with a strong R3 match in a
    separate clause is a conflict (R4) -> Uncertain.
    No rule firing -> Uncertain.

All matching is case-insensitive and whole-word. Markdown emphasis
characters (``*`` and ``_``) count as word boundaries, so ``no _anomaly_``
reads the same as ``no anomaly``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Iterable


class Verdict(str, Enum):
    NORMAL = "normal"
    ANOMALOUS = "anomalous"
    UNCERTAIN = "uncertain"

    @property
    def y(self) -> int | None:
        """Binary label: 1 for anomaly, 0 for normal, None when uncertain."""
        return {Verdict.NORMAL: 0, Verdict.ANOMALOUS: 1}.get(self)


@dataclass(frozen=True)
class Judgment:
    verdict: Verdict
    rationale: str
    matched_rule: str
    conclusion_span: tuple[int, int] | None


_FLAGS = re.IGNORECASE

MARKER_RE = re.compile(r"\b(?:conclusion|final answer|verdict|judge?ment)\s*:", _FLAGS)

_UNCERTAIN_PHRASES = (
    "cannot determine", "can't determine", "unable to determine",
    "cannot tell", "can't tell", "unclear", "not sure", "uncertain", "insufficient",
)
UNCERTAIN_RE = re.compile(
    r"\b(?:" + "|".join(re.escape(p) for p in _UNCERTAIN_PHRASES) + r")\b", _FLAGS
)

STRONG_POSITIVE = ("anomaly detected", "anomalies detected")
WEAK_POSITIVE = ("abnormality", "abnormal", "anomalous", "anomalies", "anomaly", "not normal")
POSITIVE_KEYWORDS = STRONG_POSITIVE + WEAK_POSITIVE

_KW_ALT = "|".join(re.escape(k) for k in sorted(POSITIVE_KEYWORDS, key=len, reverse=True))
POSITIVE_RE = re.compile(r"\b(?:" + _KW_ALT + r")\b", _FLAGS)
_STRONG_RE = re.compile(r"(?:" + "|".join(re.escape(k) for k in STRONG_POSITIVE) + r")", _FLAGS)

NEGATED_RE = re.compile(
    r"\bno anomal(?:y|ies)\b"
    r"|\bnot (?:abnormal|anomalous)\b"
    r"|\bno issues?\b"
    r"|\b(?:is|are|appears?|looks?|seems?)\s+(?:to be\s+)?normal\b"
    r"|(?:\b(?:no|not|nothing|without|never)|n't)\s+(?:[a-z]+\s+){0,2}?(?:" + _KW_ALT + r")\b",
    _FLAGS,
)

_LEADING_NORMAL_RE = re.compile(r"[\s\"'`-]*(normal)\b", _FLAGS)

# Same length replacement keeps every span valid for the original text.
_EMPHASIS = str.maketrans("*_", "  ")

_SENTENCE_RE = re.compile(r"[^.!?\n]+(?:[.!?]+|$)", re.MULTILINE)


@dataclass(frozen=True)
class _ScopeResult:
    verdict: Verdict
    rule: str
    span: tuple[int, int]


def _overlaps(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return a[0] < b[1] and b[0] < a[1]


def classify_scope(
    text: str, start: int = 0, end: int | None = None, *, after_marker: bool = False
) -> _ScopeResult:
    """Apply R1-R4 to ``text[start:end]``; spans are offsets into ``text``."""
    text = text.translate(_EMPHASIS)
    end = len(text) if end is None else end
    scope_span = (start, end)

    m = UNCERTAIN_RE.search(text, start, end)
    if m:
        return _ScopeResult(Verdict.UNCERTAIN, "R1", m.span())

    negated = [m.span() for m in NEGATED_RE.finditer(text, start, end)]
    if after_marker:
        lead = _LEADING_NORMAL_RE.match(text, start, end)
        if lead:
            negated.insert(0, lead.span(1))
    positive = [
        m for m in POSITIVE_RE.finditer(text, start, end)
        if not any(_overlaps(m.span(), n) for n in negated)
    ]
    if negated and positive:
        if any(_STRONG_RE.fullmatch(p.group(0)) for p in positive):
            return _ScopeResult(Verdict.UNCERTAIN, "R4", scope_span)
        return _ScopeResult(Verdict.NORMAL, "R2", negated[-1])
    if negated:
        return _ScopeResult(Verdict.NORMAL, "R2", negated[-1])
    if positive:
        return _ScopeResult(Verdict.ANOMALOUS, "R3", positive[-1].span())
    return _ScopeResult(Verdict.UNCERTAIN, "none", scope_span)


def _last_sentences(text: str, n: int = 2) -> int:
    """Offset where the last ``n`` non-blank sentences begin."""
    sentences = [m for m in _SENTENCE_RE.finditer(text) if m.group(0).strip()]
    if not sentences:
        return 0
    first = sentences[-n] if len(sentences) >= n else sentences[0]
    return first.start()


def parse_judgment(response_text: str) -> Judgment:
    original = response_text if isinstance(response_text, str) else str(response_text)
    text = original.translate(_EMPHASIS)
    markers = list(MARKER_RE.finditer(text))

    if not markers:
        start = _last_sentences(text)
        res = classify_scope(text, start)
        return Judgment(
            verdict=res.verdict,
            rationale=original[:start].strip() or original.strip(),
            matched_rule=f"S2.{res.rule}",
            conclusion_span=res.span,
        )

    bounds = [m.end() for m in markers]
    ends = [m.start() for m in markers[1:]] + [len(text)]
    results = [classify_scope(text, s, e, after_marker=True) for s, e in zip(bounds, ends)]
    final = results[-1]
    definite = {r.verdict for r in results} - {Verdict.UNCERTAIN}
    if len(definite) > 1:
        final = _ScopeResult(Verdict.UNCERTAIN, "R4", (markers[0].start(), len(text)))
    last = markers[-1]
    return Judgment(
        verdict=final.verdict,
        rationale=original[: last.start()].strip(),
        matched_rule=f"S1.{final.rule}",
        conclusion_span=final.span,
    )


@dataclass(frozen=True)
class CorpusItem:
    text: str
    expected: Verdict
    judgment: Judgment

    @property
    def agrees(self) -> bool:
        return self.judgment.verdict is self.expected


@dataclass(frozen=True)
class CorpusReport:
    items: tuple[CorpusItem, ...]

    @property
    def agreed(self) -> int:
        return sum(item.agrees for item in self.items)

    @property
    def agreement(self) -> Fraction:
        return Fraction(self.agreed, len(self.items))

    def disagreements(self) -> list[CorpusItem]:
        return [item for item in self.items if not item.agrees]


def parse_corpus(responses: Iterable[tuple[str, Verdict | str]]) -> CorpusReport:
    items = tuple(
        CorpusItem(text, Verdict(expected), parse_judgment(text)) for text, expected in responses
    )
    if not items:
        raise ValueError("corpus is empty")
    return CorpusReport(items)
