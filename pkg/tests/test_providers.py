import base64
import io
import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from PIL import Image

from sgmapper.providers import mock, prompts
from sgmapper.providers.base import ProviderConfig, ProviderDecodeError, ProviderError, ProviderTimeout, cosine
from sgmapper.providers.registry import build_providers
from sgmapper.providers.remote import (
    RemoteCaptionProvider,
    RemoteEmbeddingProvider,
    RemoteReasonProvider,
    RemoteSegmentationProvider,
    ResponseCache,
)


class StubServer:
    """Serves scripted (status, body, delay) replies in order; repeats the last one."""

    def __init__(self):
        self.script = []
        self.requests = []
        self.active = 0
        self.peak = 0
        self.lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                with stub.lock:
                    stub.requests.append((dict(self.headers), body))
                    status, reply, delay = stub.script.pop(0) if len(stub.script) > 1 else stub.script[0]
                    stub.active += 1
                    stub.peak = max(stub.peak, stub.active)
                time.sleep(delay)
                with stub.lock:
                    stub.active -= 1
                data = reply.encode() if isinstance(reply, str) else json.dumps(reply).encode()
                try:
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(data)))
                    self.end_headers()
                    self.wfile.write(data)
                except (BrokenPipeError, ConnectionResetError):
                    pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.httpd.server_port}/v1"
        self.thread = threading.Thread(target=self.httpd.serve_forever, kwargs={"poll_interval": 0.01}, daemon=True)
        self.thread.start()

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def server():
    s = StubServer()
    yield s
    s.close()


def chat(text):
    return {"choices": [{"message": {"role": "assistant", "content": text}}]}


def cfg(server, **kw):
    base = dict(kind="remote", endpoint=server.url, model="m", timeout=2.0, max_retries=3, backoff=0.0, api_key_env="SGM_TEST_KEY")
    base.update(kw)
    return ProviderConfig(**base)


def test_reason_provider_success_and_auth(server, monkeypatch):
    monkeypatch.setenv("SGM_TEST_KEY", "sekret")
    server.script = [(200, chat(" near \n"), 0)]
    assert RemoteReasonProvider(cfg(server)).complete("hi") == "near"
    headers, body = server.requests[0]
    assert headers["Authorization"] == "Bearer sekret"
    assert body["messages"][0]["content"] == "hi" and body["temperature"] == 0.0
    assert headers["X-Request-ID"]


@pytest.mark.parametrize("status", [429, 500, 503])
def test_retries_transient_status(server, status, caplog):
    server.script = [(status, {"error": "busy"}, 0), (status, {"error": "busy"}, 0), (200, chat("ok"), 0)]
    with caplog.at_level("WARNING"):
        assert RemoteReasonProvider(cfg(server)).complete("x") == "ok"
    assert len(server.requests) == 3
    assert sum("event=provider_retry" in r.message for r in caplog.records) == 2
    ids = {h["X-Request-ID"] for h, _ in server.requests}
    assert len(ids) == 1


def test_gives_up_after_max_retries(server):
    server.script = [(503, {"error": "down"}, 0)]
    with pytest.raises(ProviderError) as err:
        RemoteReasonProvider(cfg(server, max_retries=2)).complete("x")
    assert len(server.requests) == 3
    assert err.value.diagnostics["status"] == 503 and err.value.request_id


def test_client_error_is_not_retried(server):
    server.script = [(400, {"error": "bad"}, 0)]
    with pytest.raises(ProviderError, match="HTTP 400"):
        RemoteReasonProvider(cfg(server)).complete("x")
    assert len(server.requests) == 1


def test_timeout_raises_provider_timeout(server):
    server.script = [(200, chat("late"), 0.5)]
    with pytest.raises(ProviderTimeout):
        RemoteReasonProvider(cfg(server, timeout=0.1, max_retries=1)).complete("x")
    assert len(server.requests) == 2


def test_backoff_grows_exponentially(server, monkeypatch):
    delays = []
    monkeypatch.setattr("sgmapper.providers.remote.time.sleep", delays.append)
    server.script = [(500, {}, 0), (500, {}, 0), (500, {}, 0), (200, chat("ok"), 0)]
    RemoteReasonProvider(cfg(server, backoff=0.25)).complete("x")
    # the stub server sleeps through the same module; keep only the client's backoff
    assert [d for d in delays if d] == [0.25, 0.5, 1.0]


def test_non_json_and_malformed(server):
    server.script = [(200, "<html>", 0)]
    with pytest.raises(ProviderDecodeError):
        RemoteReasonProvider(cfg(server)).complete("x")
    server.script = [(200, {"choices": []}, 0)]
    with pytest.raises(ProviderDecodeError):
        RemoteReasonProvider(cfg(server)).complete("y")


def test_connection_refused_is_provider_error():
    c = ProviderConfig(kind="remote", endpoint="http://127.0.0.1:9/v1", model="m", max_retries=1, backoff=0.0, timeout=0.5)
    with pytest.raises(ProviderError, match="transport"):
        RemoteReasonProvider(c).complete("x")


def test_concurrency_bound_is_respected(server):
    server.script = [(200, chat("ok"), 0.05)]
    provider = RemoteReasonProvider(cfg(server, max_concurrency=2, endpoint=server.url + "?bound"))
    threads = [threading.Thread(target=provider.complete, args=(f"p{i}",)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(server.requests) == 8
    assert server.peak <= 2


def test_cache_hit_skips_network(server, tmp_path):
    server.script = [(200, chat("cached answer"), 0)]
    cache = ResponseCache(tmp_path / "cache")
    p = RemoteReasonProvider(cfg(server), cache)
    assert p.complete("same") == "cached answer"
    assert p.complete("same") == "cached answer"
    assert len(server.requests) == 1
    fresh = RemoteReasonProvider(cfg(server), ResponseCache(tmp_path / "cache"))
    assert fresh.complete("same") == "cached answer"
    assert len(server.requests) == 1
    assert len(list((tmp_path / "cache").rglob("*.json"))) == 1


def test_cache_concurrent_writers(tmp_path):
    cache = ResponseCache(tmp_path)
    key = ResponseCache.key("k")

    def write(i):
        for _ in range(20):
            cache.put(key, {"v": i})
            assert cache.get(key) is not None

    threads = [threading.Thread(target=write, args=(i,)) for i in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert cache.get(key)["v"] in range(6)
    assert not list(tmp_path.rglob("*.tmp"))


def test_caption_sends_png_data_url(server):
    server.script = [(200, chat("a red chair"), 0)]
    img = np.zeros((4, 5, 3), np.uint8)
    assert RemoteCaptionProvider(cfg(server)).caption(img, "describe") == "a red chair"
    content = server.requests[0][1]["messages"][0]["content"]
    url = content[1]["image_url"]["url"]
    assert url.startswith("data:image/png;base64,")
    decoded = np.asarray(Image.open(io.BytesIO(base64.b64decode(url.split(",", 1)[1]))))
    assert decoded.shape == (4, 5, 3)


def test_embedding_dimension_check(server):
    server.script = [(200, {"data": [{"embedding": [0.1, 0.2, 0.3]}]}, 0)]
    p = RemoteEmbeddingProvider(cfg(server, extra={"dim": 3}))
    np.testing.assert_allclose(p.embed_text("x"), [0.1, 0.2, 0.3])
    with pytest.raises(ProviderDecodeError):
        RemoteEmbeddingProvider(cfg(server, extra={"dim": 4})).embed_text("x")


def test_segmentation_decodes_masks(server):
    bitmap = np.zeros((6, 8), np.uint8)
    bitmap[1:3, 2:5] = 255
    buf = io.BytesIO()
    Image.fromarray(bitmap).save(buf, format="PNG")
    item = {"png": base64.b64encode(buf.getvalue()).decode(), "confidence": 0.7}
    server.script = [(200, {"masks": [item]}, 0)]
    masks = RemoteSegmentationProvider(cfg(server)).segment(np.zeros((6, 8, 3), np.uint8))
    assert len(masks) == 1 and masks[0].area == 6 and masks[0].confidence == 0.7
    server.script = [(200, {"masks": [item]}, 0)]
    with pytest.raises(ProviderDecodeError):
        RemoteSegmentationProvider(cfg(server)).segment(np.zeros((5, 8, 3), np.uint8))


def test_prompt_templates_are_fixed():
    assert prompts.render(prompts.CROP_CAPTION) == "briefly describe the central object in the image in a few words."
    assert prompts.render(prompts.AGGREGATE, captions='["a", "b"]') == (
        'The following captions describe the same object from different views: ["a", "b"]. Reply with one concise caption.'
    )
    with pytest.raises(KeyError):
        prompts.render(prompts.REFINE)
    assert len(prompts.prompt_digest(prompts.RELATION)) == 64


def test_mock_embedding_determinism_and_synonyms():
    a = mock.MockEmbeddingProvider(seed=3, synonyms={"sofa": ["couch", 0.8]})
    b = mock.MockEmbeddingProvider(seed=3, synonyms={"sofa": ["couch", 0.8]})
    np.testing.assert_array_equal(a.embed_text("lamp"), b.embed_text("lamp"))
    assert np.linalg.norm(a.embed_text("lamp")) == pytest.approx(1.0)
    assert cosine(a.embed_text("sofa"), a.embed_text("couch")) == pytest.approx(0.8, abs=1e-9)
    assert abs(cosine(a.embed_text("lamp"), a.embed_text("desk"))) < 0.3


def test_mock_caption_provider_palette():
    palette = [
        {"color": [200, 40, 40], "caption": "a red chair", "reshot_caption": "a red stool"},
        {"color": [200, 190, 160], "caption": "a beige wall", "background": True},
    ]
    vlm = mock.MockCaptionProvider(palette, reshot_background=(255, 255, 255))
    chair = np.zeros((4, 4, 3), np.uint8)
    chair[1:, 1:] = (200, 40, 40)
    assert vlm.caption(chair, prompts.render(prompts.CROP_CAPTION)) == "a red chair"
    shot = np.full((4, 4, 3), 255, np.uint8)
    shot[1:, 1:] = (200, 40, 40)
    assert vlm.caption(shot, prompts.render(prompts.CROP_CAPTION)) == "a red stool"
    wall = np.full((4, 4, 3), (200, 190, 160), np.uint8)
    assert vlm.caption(wall, prompts.render(prompts.BACKGROUND)) == "yes"
    assert vlm.caption(chair, prompts.render(prompts.BACKGROUND)) == "no"


def test_mock_reasoner_rejects_unknown_prompt():
    with pytest.raises(ProviderError):
        mock.MockReasonProvider().complete("tell me a joke")


def test_registry_mixes_mock_and_remote(fixture_dataset, tmp_path):
    remote = ProviderConfig(kind="remote", endpoint="http://127.0.0.1:9/v1", model="m")
    ps = build_providers({"llm": remote}, fixture_dataset, tmp_path)
    assert isinstance(ps.llm, RemoteReasonProvider)
    assert isinstance(ps.vlm, mock.MockCaptionProvider)
    with pytest.raises(ValueError):
        build_providers({}, None)


def test_provider_config_problems():
    bad = ProviderConfig(kind="cloud", timeout=0, max_retries=-1, max_concurrency=0)
    problems = bad.problems("providers.llm.")
    assert any(p.startswith("providers.llm.kind") for p in problems)
    assert len(problems) >= 4
