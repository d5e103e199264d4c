import base64
import hashlib
import io
import json
import threading

import httpx
import pytest
from PIL import Image

from lab_anomaly.client import (
    AuthenticationError,
    ChatCompletionsProvider,
    ImageDecodeError,
    MockProvider,
    MockRule,
    Observation,
    ProviderConfig,
    ProviderResponseError,
    ProviderTimeoutError,
    Query,
    ResponseCache,
    TransientProviderError,
    UnmatchedRequestError,
    VLMClient,
    judge_observation,
    mock_provider,
    preprocess_image,
    request_hash,
)
from lab_anomaly.prompts import assemble_prompt

from conftest import png_bytes


def decode(data):
    return Image.open(io.BytesIO(data))


def test_downscale_to_target():
    out = decode(preprocess_image(png_bytes((1280, 960))))
    assert out.size == (640, 480)
    assert out.mode == "RGB"


@pytest.mark.parametrize("size", [(100, 100), (1920, 1080), (33, 700)])
def test_any_aspect_is_resampled_directly(size):
    assert decode(preprocess_image(png_bytes(size))).size == (640, 480)


def test_target_size_passthrough_is_stable():
    raw = png_bytes((640, 480), fmt="JPEG")
    once = preprocess_image(raw)
    assert hashlib.sha256(preprocess_image(once)).hexdigest() == hashlib.sha256(once).hexdigest()
    # No resampling happened: pixels equal the decoded input.
    assert decode(once).tobytes() == decode(raw).convert("RGB").tobytes()


def test_non_rgb_input_converted():
    out = decode(preprocess_image(png_bytes((640, 480), color=128, mode="L")))
    assert out.mode == "RGB"


def test_deterministic_bytes():
    raw = png_bytes((800, 600))
    assert preprocess_image(raw) == preprocess_image(raw)


def test_corrupt_bytes():
    with pytest.raises(ImageDecodeError):
        preprocess_image(b"\x89PNG not really")


def test_config_validation():
    with pytest.raises(ValueError):
        ProviderConfig(endpoint_url="not a url")
    with pytest.raises(ValueError):
        ProviderConfig(timeout=0)
    with pytest.raises(ValueError):
        ProviderConfig.from_mapping({"colour": 1})
    assert ProviderConfig().temperature == 0.0


@pytest.fixture
def query_parts(silicone):
    bundle = assemble_prompt(silicone, "p02", 2)
    obs = Observation.from_bytes(png_bytes((320, 240)), "p02", source="/data/pre.png")
    return bundle, obs


def test_request_hash_inputs(query_parts):
    bundle, obs = query_parts
    cfg = ProviderConfig()
    base = Query(bundle, obs, cfg).request_hash
    assert base == request_hash(bundle.content_hash, obs.digest, "gpt-4o", 0.0)
    assert Query(bundle, obs, ProviderConfig(model_name="other")).request_hash != base
    assert Query(bundle, obs, ProviderConfig(temperature=0.5)).request_hash != base
    # Settings outside the hash key do not change it.
    assert Query(bundle, obs, ProviderConfig(max_retries=0, timeout=3)).request_hash == base


def test_wire_body(query_parts):
    bundle, obs = query_parts
    body = Query(bundle, obs, ProviderConfig(max_output_tokens=256)).body()
    assert set(body) == {"model", "temperature", "max_tokens", "messages"}
    assert body["max_tokens"] == 256
    (msg,) = body["messages"]
    assert msg["role"] == "user"
    text, image = msg["content"]
    assert text == {"type": "text", "text": bundle.rendered}
    assert image["type"] == "image_url"
    url = image["image_url"]["url"]
    assert url.startswith("data:image/jpeg;base64,")
    jpeg = decode(base64.b64decode(url.split(",", 1)[1]))
    assert jpeg.format == "JPEG" and jpeg.size == (640, 480)


def _http_provider(handler, env=None, **cfg):
    config = ProviderConfig(endpoint_url="https://vlm.test/v1/chat/completions", **cfg)
    return ChatCompletionsProvider(
        config, transport=httpx.MockTransport(handler), environ=env or {"LAB_ANOMALY_API_KEY": "k123"}
    ), config


def _ok(text, model="gpt-4o-2024"):
    return httpx.Response(200, json={"model": model, "choices": [{"message": {"role": "assistant", "content": text}}]})


def test_http_provider_success(query_parts):
    seen = {}

    def handler(request):
        seen["auth"] = request.headers.get("authorization")
        seen["body"] = json.loads(request.content)
        return _ok("Reasoning. Conclusion: no anomaly detected.")

    provider, cfg = _http_provider(handler)
    bundle, obs = query_parts
    raw = judge_observation(bundle, obs, cfg, provider)
    assert raw.text.endswith("no anomaly detected.")
    assert raw.model_id == "gpt-4o-2024"
    assert not raw.from_cache
    assert seen["auth"] == "Bearer k123"
    assert seen["body"]["model"] == "gpt-4o"
    assert seen["body"]["temperature"] == 0.0


def test_http_provider_list_content(query_parts):
    provider, cfg = _http_provider(
        lambda r: httpx.Response(200, json={"choices": [{"message": {"content": [{"type": "text", "text": "Verdict: normal"}]}}]})
    )
    raw = judge_observation(*query_parts, cfg, provider)
    assert raw.text == "Verdict: normal"
    assert raw.model_id == "gpt-4o"


def test_no_credential_sends_no_header(query_parts):
    seen = {}

    def handler(request):
        seen["auth"] = request.headers.get("authorization")
        return _ok("Conclusion: normal")

    provider, cfg = _http_provider(handler, env={"OTHER": "x"})
    judge_observation(*query_parts, cfg, provider)
    assert seen["auth"] is None


def test_auth_error_not_retried(query_parts):
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(401, json={"error": {"message": "bad key"}})

    provider, cfg = _http_provider(handler)
    client = VLMClient(provider, cfg, sleep=lambda s: None)
    with pytest.raises(AuthenticationError, match="bad key"):
        client.judge(*query_parts)
    assert len(calls) == 1


def test_server_errors_retried_then_succeed(query_parts):
    responses = [httpx.Response(503), httpx.Response(429), _ok("Conclusion: anomaly detected.")]
    sleeps = []
    provider, cfg = _http_provider(lambda r: responses.pop(0), max_retries=3, backoff_base=0.5)
    raw = VLMClient(provider, cfg, sleep=sleeps.append).judge(*query_parts)
    assert raw.text == "Conclusion: anomaly detected."
    assert sleeps == [0.5, 1.0]


def test_provider_error_payload(query_parts):
    provider, cfg = _http_provider(lambda r: httpx.Response(200, json={"error": {"message": "model overloaded"}}))
    with pytest.raises(ProviderResponseError, match="model overloaded"):
        VLMClient(provider, cfg).judge(*query_parts)


def test_bad_request_surfaces_message(query_parts):
    provider, cfg = _http_provider(lambda r: httpx.Response(400, json={"error": {"message": "image too large"}}))
    with pytest.raises(ProviderResponseError, match="image too large"):
        VLMClient(provider, cfg).judge(*query_parts)


def test_empty_completion_is_error(query_parts):
    provider, cfg = _http_provider(lambda r: _ok("   "))
    with pytest.raises(ProviderResponseError):
        VLMClient(provider, cfg).judge(*query_parts)


def test_timeout_retried_then_raised(query_parts):
    calls = []

    def handler(request):
        calls.append(1)
        raise httpx.ReadTimeout("slow", request=request)

    provider, cfg = _http_provider(handler, max_retries=2, backoff_base=0)
    with pytest.raises(ProviderTimeoutError):
        VLMClient(provider, cfg, sleep=lambda s: None).judge(*query_parts)
    assert len(calls) == 3


def test_network_error(query_parts):
    def handler(request):
        raise httpx.ConnectError("refused", request=request)

    provider, cfg = _http_provider(handler, max_retries=0)
    with pytest.raises(TransientProviderError, match="network"):
        VLMClient(provider, cfg).judge(*query_parts)


@pytest.mark.parametrize("retries", [0, 1, 4])
def test_attempts_bounded(query_parts, retries):
    mock = MockProvider([MockRule(error="network")])
    cfg = ProviderConfig(max_retries=retries, backoff_base=0)
    with pytest.raises(TransientProviderError):
        VLMClient(mock, cfg, sleep=lambda s: None).judge(*query_parts)
    assert mock.calls == retries + 1


def test_mock_scripted_text(query_parts):
    mock = mock_provider({"rules": [{"match": {"point_id": "p02"}, "response": "Conclusion: no anomaly detected."}]})
    raw = judge_observation(*query_parts, ProviderConfig(), mock)
    assert raw.text == "Conclusion: no anomaly detected."


def test_mock_point_rule_and_default(query_parts):
    bundle, obs = query_parts
    mock = MockProvider([MockRule(response="Conclusion: anomaly detected.", point_id="p1")], default="Conclusion: uncertain.")
    assert mock.complete(Query(bundle, obs, ProviderConfig())).text == "Conclusion: uncertain."
    other = Observation(obs.image, "p1")
    assert mock.complete(Query(bundle, other, ProviderConfig())).text == "Conclusion: anomaly detected."


def test_mock_empty_script_default(query_parts):
    mock = mock_provider({"default": "Conclusion: uncertain."})
    assert mock.complete(Query(*query_parts, ProviderConfig())).text == "Conclusion: uncertain."


def test_mock_unmatched_error(query_parts):
    with pytest.raises(UnmatchedRequestError):
        MockProvider().complete(Query(*query_parts, ProviderConfig()))


def test_mock_first_match_wins(query_parts):
    mock = MockProvider([MockRule(response="first", point_id="p02"), MockRule(response="second")])
    assert mock.complete(Query(*query_parts, ProviderConfig())).text == "first"


def test_mock_keyed_on_level_text(silicone, query_parts):
    _, obs = query_parts
    script = {
        "rules": [{"match": {"contains": "Anomaly Label Description"}, "response": "Conclusion: anomaly detected."}],
        "default": "Conclusion: no anomaly detected.",
    }
    mock = mock_provider(script)
    low = mock.complete(Query(assemble_prompt(silicone, "p02", 1), obs, ProviderConfig()))
    high = mock.complete(Query(assemble_prompt(silicone, "p02", 4), obs, ProviderConfig()))
    assert low.text == "Conclusion: no anomaly detected."
    assert high.text == "Conclusion: anomaly detected."


def test_mock_match_on_level_and_image(query_parts):
    bundle, obs = query_parts
    script = {
        "rules": [
            {"match": {"level": [3, 4]}, "response": "L34"},
            {"match": {"image_name": "pre.png", "level": 2}, "response": "pre2"},
        ]
    }
    assert mock_provider(script).complete(Query(bundle, obs, ProviderConfig())).text == "pre2"


def test_mock_rule_validation():
    with pytest.raises(ValueError):
        MockRule()
    with pytest.raises(ValueError):
        MockRule(error="meteor")


def test_cache_hit(tmp_path, query_parts):
    mock = MockProvider(default="Conclusion: no anomaly detected.")
    cache = ResponseCache(tmp_path / "cache")
    client = VLMClient(mock, ProviderConfig(), cache)
    first = client.judge(*query_parts)
    second = client.judge(*query_parts)
    assert not first.from_cache and second.from_cache
    assert second.text == first.text
    assert second.request_hash == first.request_hash
    assert mock.calls == 1
    key = first.request_hash
    stored = tmp_path / "cache" / key[:2] / f"{key}.json"
    assert json.loads(stored.read_text())["text"] == first.text


def test_cache_keys_on_request(tmp_path, query_parts, silicone):
    mock = MockProvider(default="Conclusion: normal")
    cache = ResponseCache(tmp_path)
    bundle, obs = query_parts
    VLMClient(mock, ProviderConfig(), cache).judge(bundle, obs)
    VLMClient(mock, ProviderConfig(model_name="b"), cache).judge(bundle, obs)
    VLMClient(mock, ProviderConfig(), cache).judge(assemble_prompt(silicone, "p02", 3), obs)
    assert mock.calls == 3


def test_cache_ignores_mismatched_entry(tmp_path, query_parts):
    cache = ResponseCache(tmp_path)
    key = Query(*query_parts, ProviderConfig()).request_hash
    path = cache.path_for(key)
    path.parent.mkdir(parents=True)
    path.write_text(json.dumps({"request_hash": "0" * 64, "text": "x", "model_id": "m", "latency": 0}))
    assert cache.get(key) is None


def test_failures_are_not_cached(tmp_path, query_parts):
    cache = ResponseCache(tmp_path)
    with pytest.raises(AuthenticationError):
        VLMClient(MockProvider([MockRule(error="auth")]), ProviderConfig(), cache).judge(*query_parts)
    assert not any(tmp_path.rglob("*.json"))


def test_concurrent_same_key_single_call(tmp_path, query_parts):
    mock = MockProvider(default="Conclusion: normal")
    client = VLMClient(mock, ProviderConfig(), ResponseCache(tmp_path))
    threads = [threading.Thread(target=client.judge, args=query_parts) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert mock.calls == 1
