"""Provider interfaces for the foundation-model capabilities the pipeline consumes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Protocol, runtime_checkable

import numpy as np


class ProviderError(RuntimeError):
    """A provider call failed. ``request_id`` and ``diagnostics`` carry what the backend told us."""

    def __init__(self, message: str, request_id: Optional[str] = None, diagnostics: Optional[dict] = None):
        super().__init__(message if request_id is None else f"{message} (request {request_id})")
        self.request_id = request_id
        self.diagnostics = diagnostics or {}


class ProviderTimeout(ProviderError):
    pass


class ProviderDecodeError(ProviderError):
    pass


@runtime_checkable
class SegmentationProvider(Protocol):
    def segment(self, image: np.ndarray, frame_index: Optional[int] = None) -> list:
        """Class-agnostic masks for ``image`` as a list of ``ingest.Mask``."""


@runtime_checkable
class EmbeddingProvider(Protocol):
    dim: int

    def embed_image_region(self, image: np.ndarray, mask: np.ndarray) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


@runtime_checkable
class CaptionProvider(Protocol):
    def caption(self, image: np.ndarray, prompt: str) -> str: ...


@runtime_checkable
class ReasonProvider(Protocol):
    def complete(self, prompt: str) -> str: ...


@dataclass
class ProviderConfig:
    """Where a remote provider lives and how hard to try."""

    kind: str = "mock"
    endpoint: str = ""
    model: str = ""
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    max_concurrency: int = 4
    backoff: float = 0.5
    temperature: float = 0.0
    extra: dict = field(default_factory=dict)

    def problems(self, prefix: str = "") -> list[str]:
        out = []
        if self.kind not in ("mock", "remote"):
            out.append(f"{prefix}kind: must be 'mock' or 'remote'")
        if not self.timeout > 0:
            out.append(f"{prefix}timeout: must be > 0")
        if self.max_retries < 0:
            out.append(f"{prefix}max_retries: must be >= 0")
        if self.max_concurrency < 1:
            out.append(f"{prefix}max_concurrency: must be >= 1")
        if self.backoff < 0:
            out.append(f"{prefix}backoff: must be >= 0")
        if self.kind == "remote" and not self.endpoint:
            out.append(f"{prefix}endpoint: required for remote providers")
        return out


def renormalize(vec) -> np.ndarray:
    """Caller-side unit normalisation applied to every provider embedding."""
    v = np.asarray(vec, dtype=np.float64).reshape(-1)
    n = float(np.linalg.norm(v))
    if not np.isfinite(n) or n == 0.0:
        raise ProviderError("provider returned a zero or non-finite embedding")
    return v / n


def cosine(a, b) -> float:
    return float(np.dot(renormalize(a), renormalize(b)))
