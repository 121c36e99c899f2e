from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from .base import ProviderConfig


@dataclass
class ProviderSet:
    segmentation: Any
    embedding: Any
    vlm: Any
    llm: Any


ROLES = ("segmentation", "embedding", "vlm", "llm")


def build_providers(configs: dict[str, ProviderConfig], dataset: Optional[Path], cache_dir: Optional[Path] = None) -> ProviderSet:
    """Mock roles are configured from the dataset's mock manifest; remote roles from their config."""
    from . import mock, remote

    mocks = None
    chosen = {}
    for role in ROLES:
        cfg = configs.get(role, ProviderConfig())
        if cfg.kind == "mock":
            if mocks is None:
                if dataset is None:
                    raise ValueError("mock providers need a dataset with mock_manifest.json")
                mocks = mock.mock_providers(dataset)
            chosen[role] = getattr(mocks, role)
            continue
        cache = remote.ResponseCache(cache_dir) if cache_dir is not None else None
        cls = {
            "segmentation": remote.RemoteSegmentationProvider,
            "embedding": remote.RemoteEmbeddingProvider,
            "vlm": remote.RemoteCaptionProvider,
            "llm": remote.RemoteReasonProvider,
        }[role]
        chosen[role] = cls(cfg, cache)
    return ProviderSet(**chosen)
