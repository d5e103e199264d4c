"""Image+prompt queries against an OpenAI-compatible chat endpoint.

The client layers retries and a content-addressed response cache over a
provider. Two providers ship: :class:`ChatCompletionsProvider` (HTTP) and
:class:`MockProvider` (scripted, offline).
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import tempfile
import threading
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence
from urllib.parse import urlparse

import httpx
from PIL import Image, UnidentifiedImageError

from .prompts import PromptBundle

log = logging.getLogger(__name__)

TARGET_SIZE = (640, 480)
DEFAULT_ENDPOINT = "https://api.openai.com/v1/chat/completions"
DEFAULT_CREDENTIAL_ENV = "LAB_ANOMALY_API_KEY"


class ImageDecodeError(ValueError):
    pass


class ProviderError(RuntimeError):
    """Base class for provider failures."""


class TransientProviderError(ProviderError):
    """Network-level or server-side failure; worth retrying."""


class ProviderTimeoutError(TransientProviderError):
    pass


class AuthenticationError(ProviderError):
    pass


class ProviderResponseError(ProviderError):
    """The provider answered with an error payload or an unusable body."""


class UnmatchedRequestError(ProviderError):
    pass


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------


def preprocess_image(raw: bytes) -> bytes:
    """Decode, convert to RGB and resample to exactly 640x480.

    The result is PNG-encoded, so preprocessing is lossless and idempotent:
    feeding the output back in returns the same bytes.
    """
    try:
        with Image.open(io.BytesIO(raw)) as img:
            img.load()
            rgb = img.convert("RGB")
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ImageDecodeError(f"cannot decode image: {exc}") from exc
    if rgb.size != TARGET_SIZE:
        rgb = rgb.resize(TARGET_SIZE, Image.Resampling.BICUBIC)
    buf = io.BytesIO()
    rgb.save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def to_jpeg(image: bytes, quality: int = 95) -> bytes:
    with Image.open(io.BytesIO(image)) as img:
        rgb = img.convert("RGB")
    buf = io.BytesIO()
    rgb.save(buf, format="JPEG", quality=quality)
    return buf.getvalue()


@dataclass(frozen=True)
class Observation:
    image: bytes  # preprocessed PNG bytes
    point_id: str
    width: int = TARGET_SIZE[0]
    height: int = TARGET_SIZE[1]
    device: str | None = None
    viewpoint: str | None = None
    source: str | None = None

    @classmethod
    def from_bytes(cls, raw: bytes, point_id: str, **kw: Any) -> Observation:
        return cls(image=preprocess_image(raw), point_id=point_id, **kw)

    @classmethod
    def from_path(cls, path: str | Path, point_id: str, **kw: Any) -> Observation:
        kw.setdefault("source", str(path))
        return cls.from_bytes(Path(path).read_bytes(), point_id, **kw)

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.image).hexdigest()


# ---------------------------------------------------------------------------
# Config and wire format
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProviderConfig:
    endpoint_url: str = DEFAULT_ENDPOINT
    model_name: str = "gpt-4o"
    temperature: float = 0.0
    max_output_tokens: int = 1024
    timeout: float = 60.0
    max_retries: int = 3
    backoff_base: float = 1.0
    credential_env_name: str = DEFAULT_CREDENTIAL_ENV

    def __post_init__(self) -> None:
        parsed = urlparse(self.endpoint_url)
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise ValueError(f"invalid endpoint URL: {self.endpoint_url!r}")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.backoff_base < 0:
            raise ValueError("backoff_base must be >= 0")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> ProviderConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown provider setting(s): {', '.join(sorted(unknown))}")
        return cls(**data)


def request_hash(prompt_hash: str, image_digest: str, model_name: str, temperature: float) -> str:
    key = json.dumps(
        {
            "prompt": prompt_hash,
            "image": image_digest,
            "model": model_name,
            "temperature": float(temperature),
        },
        sort_keys=True,
    )
    return hashlib.sha256(key.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Query:
    bundle: PromptBundle
    observation: Observation
    config: ProviderConfig

    @property
    def request_hash(self) -> str:
        return request_hash(
            self.bundle.content_hash,
            self.observation.digest,
            self.config.model_name,
            self.config.temperature,
        )

    def body(self) -> dict[str, Any]:
        data_url = "data:image/jpeg;base64," + base64.b64encode(
            to_jpeg(self.observation.image)
        ).decode("ascii")
        return {
            "model": self.config.model_name,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_output_tokens,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": self.bundle.rendered},
                        {"type": "image_url", "image_url": {"url": data_url}},
                    ],
                }
            ],
        }


@dataclass(frozen=True)
class ProviderReply:
    text: str
    model_id: str
    latency: float = 0.0


@dataclass(frozen=True)
class RawResponse:
    text: str
    model_id: str
    latency: float
    from_cache: bool
    request_hash: str


class Provider(Protocol):
    def complete(self, query: Query) -> ProviderReply: ...


# ---------------------------------------------------------------------------
# HTTP provider
# ---------------------------------------------------------------------------


def _extract_text(message: Any) -> str:
    content = message.get("content") if isinstance(message, dict) else None
    if isinstance(content, str):
        return content
    if isinstance(content, list):
        return "".join(p.get("text", "") for p in content if isinstance(p, dict))
    return ""


class ChatCompletionsProvider:
    """One POST per call to an OpenAI-compatible ``/chat/completions`` URL."""

    def __init__(
        self,
        config: ProviderConfig,
        *,
        transport: httpx.BaseTransport | None = None,
        environ: Mapping[str, str] | None = None,
    ):
        self.config = config
        self._environ = os.environ if environ is None else environ
        self._http = httpx.Client(timeout=config.timeout, transport=transport)

    def close(self) -> None:
        self._http.close()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = self._environ.get(self.config.credential_env_name)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, query: Query) -> ProviderReply:
        started = time.perf_counter()
        try:
            resp = self._http.post(
                self.config.endpoint_url, json=query.body(), headers=self._headers()
            )
        except httpx.TimeoutException as exc:
            raise ProviderTimeoutError(f"request timed out: {exc}") from exc
        except httpx.TransportError as exc:
            raise TransientProviderError(f"network error: {exc}") from exc
        latency = time.perf_counter() - started

        try:
            payload = resp.json()
        except ValueError:
            payload = None
        message = _error_message(payload) or resp.text[:200]

        if resp.status_code in (401, 403):
            raise AuthenticationError(f"HTTP {resp.status_code}: {message}")
        if resp.status_code in (408, 409, 429) or resp.status_code >= 500:
            raise TransientProviderError(f"HTTP {resp.status_code}: {message}")
        if resp.status_code >= 400:
            raise ProviderResponseError(f"HTTP {resp.status_code}: {message}")
        if not isinstance(payload, dict):
            raise ProviderResponseError("response body is not a JSON object")
        if "error" in payload:
            raise ProviderResponseError(f"provider error: {message}")
        try:
            text = _extract_text(payload["choices"][0]["message"])
        except (KeyError, IndexError, TypeError):
            raise ProviderResponseError("response has no choices[0].message") from None
        if not text.strip():
            raise ProviderResponseError("provider returned an empty completion")
        return ProviderReply(text, str(payload.get("model") or self.config.model_name), latency)


def _error_message(payload: Any) -> str | None:
    if isinstance(payload, dict) and "error" in payload:
        err = payload["error"]
        if isinstance(err, dict):
            return str(err.get("message") or err)
        return str(err)
    return None


# ---------------------------------------------------------------------------
# Mock provider
# ---------------------------------------------------------------------------

_ERRORS: dict[str, type[ProviderError]] = {
    "network": TransientProviderError,
    "timeout": ProviderTimeoutError,
    "auth": AuthenticationError,
    "provider": ProviderResponseError,
}


@dataclass(frozen=True)
class MockRule:
    """One scripted reply. Every given condition must hold for a match.

    ``contains`` is a substring (or list of substrings) of the rendered
    prompt; ``image_name`` compares against the observation's file name.
    """

    response: str | None = None
    error: str | None = None
    point_id: str | None = None
    level: int | tuple[int, ...] | None = None
    contains: tuple[str, ...] = ()
    image_name: str | None = None
    image_digest: str | None = None
    latency: float = 0.0

    def __post_init__(self) -> None:
        if (self.response is None) == (self.error is None):
            raise ValueError("a mock rule needs exactly one of 'response' or 'error'")
        if self.error is not None and self.error not in _ERRORS:
            raise ValueError(f"unknown mock error kind {self.error!r}")

    def matches(self, query: Query) -> bool:
        obs, bundle = query.observation, query.bundle
        if self.point_id is not None and obs.point_id != self.point_id:
            return False
        if self.level is not None:
            levels = self.level if isinstance(self.level, tuple) else (self.level,)
            if int(bundle.level) not in levels:
                return False
        if any(s not in bundle.rendered for s in self.contains):
            return False
        if self.image_name is not None:
            if obs.source is None or Path(obs.source).name != self.image_name:
                return False
        if self.image_digest is not None and not obs.digest.startswith(self.image_digest):
            return False
        return True


class MockProvider:
    """Deterministic offline provider. Rules are tried in order; first match wins."""

    def __init__(
        self,
        rules: Sequence[MockRule] = (),
        default: str | None = None,
        model_id: str = "mock",
    ):
        self.rules = tuple(rules)
        self.default = default
        self.model_id = model_id
        self.calls = 0
        self._lock = threading.Lock()

    @classmethod
    def from_script(cls, script: Mapping[str, Any]) -> MockProvider:
        rules = []
        for raw in script.get("rules", []):
            raw = dict(raw)
            match = dict(raw.pop("match", {}))
            if isinstance(match.get("contains"), str):
                match["contains"] = (match["contains"],)
            elif "contains" in match:
                match["contains"] = tuple(match["contains"])
            if isinstance(match.get("level"), list):
                match["level"] = tuple(match["level"])
            rules.append(MockRule(**match, **raw))
        return cls(rules, default=script.get("default"), model_id=script.get("model_id", "mock"))

    @classmethod
    def from_file(cls, path: str | Path) -> MockProvider:
        return cls.from_script(json.loads(Path(path).read_text(encoding="utf-8")))

    def complete(self, query: Query) -> ProviderReply:
        with self._lock:
            self.calls += 1
        for rule in self.rules:
            if rule.matches(query):
                if rule.error is not None:
                    raise _ERRORS[rule.error](f"scripted {rule.error} failure")
                return ProviderReply(rule.response, self.model_id, rule.latency)
        if self.default is not None:
            return ProviderReply(self.default, self.model_id, 0.0)
        raise UnmatchedRequestError(
            f"no mock rule matches point {query.observation.point_id!r} "
            f"at level {int(query.bundle.level)}"
        )


def mock_provider(script: Mapping[str, Any]) -> MockProvider:
    return MockProvider.from_script(script)


def script_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Cache and client
# ---------------------------------------------------------------------------


class ResponseCache:
    """Content-addressed store: ``<root>/<hash[:2]>/<hash>.json``."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def path_for(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def lock_for(self, key: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())

    def get(self, key: str) -> RawResponse | None:
        path = self.path_for(key)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None
        except (OSError, ValueError):
            log.warning("ignoring unreadable cache entry %s", path)
            return None
        if data.get("request_hash") != key:
            return None
        return RawResponse(
            text=data["text"],
            model_id=data["model_id"],
            latency=float(data["latency"]),
            from_cache=True,
            request_hash=key,
        )

    def put(self, response: RawResponse) -> None:
        path = self.path_for(response.request_hash)
        path.parent.mkdir(parents=True, exist_ok=True)
        data = asdict(response)
        data.pop("from_cache")
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(data, fh, sort_keys=True)
        os.replace(tmp, path)


@dataclass
class VLMClient:
    provider: Provider
    config: ProviderConfig = field(default_factory=ProviderConfig)
    cache: ResponseCache | None = None
    sleep: Callable[[float], None] = time.sleep

    def judge(self, bundle: PromptBundle, obs: Observation) -> RawResponse:
        query = Query(bundle, obs, self.config)
        key = query.request_hash
        if self.cache is None:
            return self._call(query, key)
        with self.cache.lock_for(key):
            hit = self.cache.get(key)
            if hit is not None:
                return hit
            response = self._call(query, key)
            self.cache.put(response)
            return response

    def _call(self, query: Query, key: str) -> RawResponse:
        attempt = 0
        while True:
            try:
                reply = self.provider.complete(query)
                break
            except TransientProviderError as exc:
                if attempt >= self.config.max_retries:
                    raise
                delay = self.config.backoff_base * (2**attempt)
                log.info("transient failure (%s); retry %d in %.2fs", exc, attempt + 1, delay)
                self.sleep(delay)
                attempt += 1
        if not reply.text.strip():
            raise ProviderResponseError("provider returned an empty completion")
        return RawResponse(
            text=reply.text,
            model_id=reply.model_id,
            latency=reply.latency,
            from_cache=False,
            request_hash=key,
        )


def judge_observation(
    bundle: PromptBundle,
    obs: Observation,
    cfg: ProviderConfig,
    provider: Provider | None = None,
    cache: ResponseCache | None = None,
) -> RawResponse:
    """Run one query; the live HTTP provider is used when none is given."""
    if provider is not None:
        return VLMClient(provider, cfg, cache).judge(bundle, obs)
    live = ChatCompletionsProvider(cfg)
    try:
        return VLMClient(live, cfg, cache).judge(bundle, obs)
    finally:
        live.close()


def with_overrides(cfg: ProviderConfig, **changes: Any) -> ProviderConfig:
    return replace(cfg, **{k: v for k, v in changes.items() if v is not None})
