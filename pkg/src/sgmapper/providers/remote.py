"""HTTP providers speaking a chat-completions style JSON protocol.

Requests carry images as base64 PNG data URLs. Every call goes through
:class:`HttpBackend`, which owns retries with exponential backoff, a
process-wide concurrency bound per endpoint, and the on-disk response cache.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import threading
import time
import uuid
from pathlib import Path
from typing import Optional

import httpx
import numpy as np
from PIL import Image

from ..ingest import Mask
from .base import ProviderConfig, ProviderDecodeError, ProviderError, ProviderTimeout

log = logging.getLogger(__name__)

_RETRY_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}
_bounds: dict[tuple[str, int], threading.BoundedSemaphore] = {}
_bounds_lock = threading.Lock()


def concurrency_bound(endpoint: str, limit: int) -> threading.BoundedSemaphore:
    """Semaphore shared by every backend that talks to ``endpoint`` with the same limit."""
    with _bounds_lock:
        key = (endpoint, int(limit))
        if key not in _bounds:
            _bounds[key] = threading.BoundedSemaphore(int(limit))
        return _bounds[key]


def encode_png(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image).astype(np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def png_data_url(image: np.ndarray) -> str:
    return "data:image/png;base64," + base64.b64encode(encode_png(image)).decode("ascii")


class ResponseCache:
    """Content-addressed JSON files: ``<root>/<k[:2]>/<k>.json``.

    Reads are lock-free; writes go through a temp file and ``os.replace`` under
    a lock so concurrent readers never see a partial file.
    """

    def __init__(self, root):
        self.root = Path(root)
        self._lock = threading.Lock()

    @staticmethod
    def key(*parts) -> str:
        h = hashlib.sha256()
        for p in parts:
            if isinstance(p, (bytes, bytearray)):
                h.update(bytes(p))
            else:
                h.update(json.dumps(p, sort_keys=True).encode("utf-8"))
            h.update(b"\x1f")
        return h.hexdigest()

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str):
        path = self._path(key)
        try:
            return json.loads(path.read_text())
        except (FileNotFoundError, json.JSONDecodeError):
            return None

    def put(self, key: str, value) -> None:
        path = self._path(key)
        with self._lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(f".{os.getpid()}.{threading.get_ident()}.tmp")
            tmp.write_text(json.dumps(value, sort_keys=True))
            os.replace(tmp, path)


class HttpBackend:
    def __init__(self, config: ProviderConfig, cache: Optional[ResponseCache] = None, client: Optional[httpx.Client] = None):
        self.config = config
        self.cache = cache
        self._client = client or httpx.Client(timeout=config.timeout)
        self._bound = concurrency_bound(config.endpoint, config.max_concurrency)

    def _headers(self, request_id: str) -> dict:
        headers = {"Content-Type": "application/json", "X-Request-ID": request_id}
        key = os.environ.get(self.config.api_key_env, "") if self.config.api_key_env else ""
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def post(self, payload: dict, cache_parts: tuple = ()) -> dict:
        ckey = None
        if self.cache is not None:
            ckey = ResponseCache.key(self.config.endpoint, self.config.model, *cache_parts)
            hit = self.cache.get(ckey)
            if hit is not None:
                return hit
        body = self._post_with_retries(payload)
        if self.cache is not None:
            self.cache.put(ckey, body)
        return body

    def _post_with_retries(self, payload: dict) -> dict:
        cfg = self.config
        request_id = uuid.uuid4().hex
        last: Optional[ProviderError] = None
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                delay = cfg.backoff * (2 ** (attempt - 1))
                log.warning(
                    "event=provider_retry endpoint=%s attempt=%d request_id=%s reason=%s delay=%.3f",
                    cfg.endpoint, attempt, request_id, last, delay,
                )
                time.sleep(delay)
            try:
                with self._bound:
                    resp = self._client.post(cfg.endpoint, json=payload, headers=self._headers(request_id), timeout=cfg.timeout)
            except httpx.TimeoutException:
                last = ProviderTimeout(f"timeout after {cfg.timeout}s", request_id)
                continue
            except httpx.TransportError as exc:
                last = ProviderError(f"transport error: {exc}", request_id)
                continue
            rid = resp.headers.get("x-request-id", request_id)
            if resp.status_code in _RETRY_STATUS:
                last = ProviderError(f"HTTP {resp.status_code}", rid, {"status": resp.status_code, "body": resp.text[:500]})
                continue
            if resp.status_code >= 400:
                raise ProviderError(f"HTTP {resp.status_code}", rid, {"status": resp.status_code, "body": resp.text[:500]})
            try:
                return resp.json()
            except ValueError as exc:
                raise ProviderDecodeError(f"response is not JSON: {exc}", rid) from exc
        assert last is not None
        raise last


def _chat_text(body: dict) -> str:
    try:
        content = body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise ProviderDecodeError(f"malformed chat response: missing {exc}") from exc
    if isinstance(content, list):
        content = "".join(part.get("text", "") for part in content if isinstance(part, dict))
    if not isinstance(content, str) or not content.strip():
        raise ProviderDecodeError("empty chat response")
    return content.strip()


class RemoteCaptionProvider:
    def __init__(self, config: ProviderConfig, cache: Optional[ResponseCache] = None, client=None):
        self.backend = HttpBackend(config, cache, client)

    def caption(self, image, prompt: str) -> str:
        png = encode_png(image)
        url = "data:image/png;base64," + base64.b64encode(png).decode("ascii")
        payload = {
            "model": self.backend.config.model,
            "temperature": self.backend.config.temperature,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": prompt},
                        {"type": "image_url", "image_url": {"url": url}},
                    ],
                }
            ],
        }
        return _chat_text(self.backend.post(payload, (prompt, png)))


class RemoteReasonProvider:
    def __init__(self, config: ProviderConfig, cache: Optional[ResponseCache] = None, client=None):
        self.backend = HttpBackend(config, cache, client)

    def complete(self, prompt: str) -> str:
        payload = {
            "model": self.backend.config.model,
            "temperature": self.backend.config.temperature,
            "messages": [{"role": "user", "content": prompt}],
        }
        return _chat_text(self.backend.post(payload, (prompt,)))


class RemoteEmbeddingProvider:
    """``POST {model, input: [...]}`` -> ``{data: [{embedding: [...]}]}``.

    Image regions are sent as a single input item ``{"image": <data url>}`` of
    the masked crop.
    """

    def __init__(self, config: ProviderConfig, cache: Optional[ResponseCache] = None, client=None):
        self.backend = HttpBackend(config, cache, client)
        self.dim = int(config.extra.get("dim", 0))

    def _vector(self, body: dict) -> np.ndarray:
        try:
            vec = np.asarray(body["data"][0]["embedding"], dtype=np.float64)
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ProviderDecodeError(f"malformed embedding response: {exc}") from exc
        if vec.ndim != 1 or vec.size == 0:
            raise ProviderDecodeError("embedding is not a non-empty vector")
        if self.dim and vec.size != self.dim:
            raise ProviderDecodeError(f"embedding has dimension {vec.size}, expected {self.dim}")
        self.dim = self.dim or vec.size
        return vec

    def embed_text(self, text: str) -> np.ndarray:
        payload = {"model": self.backend.config.model, "input": [text]}
        return self._vector(self.backend.post(payload, ("text", text)))

    def embed_image_region(self, image, mask) -> np.ndarray:
        from ..ingest import mask_crop

        png = encode_png(mask_crop(np.asarray(image), np.asarray(mask, dtype=bool)))
        url = "data:image/png;base64," + base64.b64encode(png).decode("ascii")
        payload = {"model": self.backend.config.model, "input": [{"image": url}]}
        return self._vector(self.backend.post(payload, ("image", png)))


class RemoteSegmentationProvider:
    """``POST {model, image}`` -> ``{masks: [{png: <b64 1-bit png>, confidence}]}``."""

    def __init__(self, config: ProviderConfig, cache: Optional[ResponseCache] = None, client=None):
        self.backend = HttpBackend(config, cache, client)

    def segment(self, image, frame_index: Optional[int] = None) -> list[Mask]:
        png = encode_png(image)
        payload = {"model": self.backend.config.model, "image": base64.b64encode(png).decode("ascii")}
        body = self.backend.post(payload, ("segment", png))
        shape = np.asarray(image).shape[:2]
        out = []
        try:
            for item in body["masks"]:
                raw = base64.b64decode(item["png"])
                bitmap = np.asarray(Image.open(io.BytesIO(raw)).convert("L")) > 0
                if bitmap.shape != shape:
                    raise ProviderDecodeError(f"mask shape {bitmap.shape} != image {shape}")
                conf = float(item.get("confidence", 1.0))
                if bitmap.any():
                    out.append(Mask(bitmap, min(max(conf, 0.0), 1.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ProviderDecodeError(f"malformed segmentation response: {exc}") from exc
        return out
