"""Foundation-model capabilities behind small interfaces, with mock and HTTP backends."""

from .base import (
    CaptionProvider,
    EmbeddingProvider,
    ProviderConfig,
    ProviderDecodeError,
    ProviderError,
    ProviderTimeout,
    ReasonProvider,
    SegmentationProvider,
    renormalize,
)

__all__ = [
    "CaptionProvider",
    "EmbeddingProvider",
    "ProviderConfig",
    "ProviderDecodeError",
    "ProviderError",
    "ProviderTimeout",
    "ReasonProvider",
    "SegmentationProvider",
    "renormalize",
]
