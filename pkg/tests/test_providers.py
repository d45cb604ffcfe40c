import numpy as np
import pytest

from cirlab.errors import EmptyCompletion, ProviderMalformedResponse, ProviderTimeout
from cirlab.providers import (Gateway, HTTPProvider, MockCaptioner, MockInstructor,
                              MockTextEmbedder, ProviderConfig, ResponseCache, TransientError,
                              clean_instruction, requests_transport)
from cirlab.synthesis import build_prompt


def test_mock_caption_is_deterministic():
    gw = Gateway.mock()
    a = gw.caption_image("img_007")
    assert a and a == gw.caption_image("img_007")
    assert a == MockCaptioner()("img_007")
    assert gw.stats["caption"].calls == 1 and gw.stats["caption"].hits == 1


def test_mock_instruction_template():
    out = Gateway.mock().generate_instruction(build_prompt("a dog", "a cat"))
    assert out == "change dog to cat"


def test_mock_embedding_unit_and_deterministic():
    gw = Gateway.mock(embed_dim=32)
    v = gw.embed_text("a red car")
    assert v.shape == (32,)
    assert np.linalg.norm(v) == pytest.approx(1.0)
    np.testing.assert_array_equal(v, MockTextEmbedder(32)("a red car"))
    with pytest.raises(ValueError):
        gw.embed_text("")


def test_disk_cache_roundtrip(tmp_path):
    cache = ResponseCache(tmp_path)
    gw = Gateway.mock(cache=cache)
    v1 = gw.embed_text("hello")
    gw2 = Gateway.mock(cache=ResponseCache(tmp_path))
    v2 = gw2.embed_text("hello")
    assert gw2.provider_calls == 0
    assert v1.tobytes() == v2.tobytes()
    files = list(tmp_path.rglob("*.json"))
    assert len(files) == 1 and len(files[0].stem) == 64


def test_cache_keyed_on_content_not_time(tmp_path):
    cache = ResponseCache(tmp_path)
    cache.put("ns", "k", "v1")
    assert cache.get("ns", "k") == "v1"
    assert cache.get("ns", "other") is None


def failing_gateway(provider, max_retries=2, **kw):
    sleeps = []
    cfg = ProviderConfig(max_retries=max_retries)
    gw = Gateway(provider, MockInstructor(), MockTextEmbedder(),
                 configs={"caption": cfg, "instruction": cfg}, sleep=sleeps.append, **kw)
    return gw, sleeps


def test_unreachable_endpoint_times_out_after_retries():
    attempts = []

    def transport(url, payload, headers, timeout):
        attempts.append(url)
        raise TransientError("connection refused")

    provider = HTTPProvider(ProviderConfig(endpoint="http://127.0.0.1:9/caption"), transport)
    gw, sleeps = failing_gateway(provider, max_retries=2)
    with pytest.raises(ProviderTimeout):
        gw.caption_image("img_1")
    assert len(attempts) == 3
    assert sleeps == [0.5, 1.0]


def test_real_transport_against_closed_port():
    cfg = ProviderConfig(endpoint="http://127.0.0.1:9/x", timeout_seconds=0.5, max_retries=2)
    calls = []

    def counting(*args):
        calls.append(1)
        return requests_transport(*args)

    gw = Gateway(HTTPProvider(cfg, counting), MockInstructor(), MockTextEmbedder(),
                 configs={"caption": cfg}, sleep=lambda s: None)
    with pytest.raises(ProviderTimeout):
        gw.caption_image("img_1")
    assert len(calls) == 3


def test_backoff_is_bounded():
    gw = Gateway.mock(backoff_base=1.0, backoff_max=4.0)
    assert [gw.backoff(i) for i in range(6)] == [1, 2, 4, 4, 4, 4]


def test_malformed_response():
    provider = HTTPProvider(ProviderConfig(response_path="choices.0.text"),
                            lambda *a: {"unexpected": 1})
    gw, _ = failing_gateway(provider, max_retries=1)
    with pytest.raises(ProviderMalformedResponse):
        gw.caption_image("x")
    assert gw.stats["caption"].calls == 2


def test_http_provider_payload_and_path(monkeypatch):
    seen = {}

    def transport(url, payload, headers, timeout):
        seen.update(url=url, payload=payload, headers=headers, timeout=timeout)
        return {"choices": [{"text": "  'Make it red.'\n"}]}

    monkeypatch.setenv("CIR_TEST_KEY", "secret")
    cfg = ProviderConfig(endpoint="http://llm/v1", model_name="m", timeout_seconds=3,
                         api_key_env_var="CIR_TEST_KEY", request_field="prompt",
                         response_path="choices.0.text", extra={"temperature": 0})
    gw = Gateway(MockCaptioner(), HTTPProvider(cfg, transport), MockTextEmbedder(),
                 configs={"instruction": cfg})
    assert gw.generate_instruction("p") == "Make it red."
    assert seen["payload"] == {"model": "m", "prompt": "p", "temperature": 0}
    assert seen["headers"]["Authorization"] == "Bearer secret"
    assert seen["timeout"] == 3


def test_empty_completion():
    gw = Gateway(MockCaptioner(), lambda p: "  ", MockTextEmbedder())
    with pytest.raises(EmptyCompletion):
        gw.generate_instruction("prompt")


def test_clean_instruction():
    assert clean_instruction('"Add a forest\nnext to the train."') == "Add a forest next to the train."
    assert clean_instruction("  'x'  ") == "x"
    assert clean_instruction('\n\n"Make it red."\n\nThis changes the color.') == "Make it red."
    assert clean_instruction(' "" ') == ""


def test_provider_config_validation():
    with pytest.raises(ValueError):
        ProviderConfig(timeout_seconds=0)
    with pytest.raises(ValueError):
        ProviderConfig(max_retries=11)


def test_map_keeps_order_and_captures_errors():
    def flaky(image_id):
        if image_id == "bad":
            raise ProviderTimeout("nope")
        return image_id.upper()

    gw = Gateway(MockCaptioner(), MockInstructor(), MockTextEmbedder(), max_workers=4)
    out = gw.map(flaky, ["a", "bad", "c", "d"])
    assert out[0] == "A" and isinstance(out[1], ProviderTimeout) and out[2:] == ["C", "D"]
