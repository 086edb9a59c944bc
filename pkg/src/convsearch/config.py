"""Declarative application configuration.

Defaults match the reference experimental setup: two previous messages of
extraction context, temperature 0.0, max_tokens 1024, all five components
active. Ablations are therefore flag flips, not code changes. API keys are
only ever read from environment variables named here.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from .core import ComponentKind, ContractViolation
from .embedding import EmbeddingBackend, HashedEmbeddingBackend, HttpEmbeddingBackend
from .extraction import (
    ChatBackend,
    ExtractionConfig,
    ExtractionMode,
    HttpChatBackend,
    MockChatBackend,
)
from .retrieval import ScoringConfig, resolve_combination


@dataclass
class ChatSettings:
    kind: str = "mock"  # "mock" | "http"
    base_url: Optional[str] = None
    api_key_env: str = "CHAT_API_KEY"
    model: str = "gpt-3.5-turbo"
    temperature: float = 0.0
    max_tokens: int = 1024


@dataclass
class EmbeddingSettings:
    kind: str = "hashed"  # "hashed" | "http"
    base_url: Optional[str] = None
    api_key_env: str = "EMBED_API_KEY"
    model_id: str = "hashed-bow-256"
    dimension: int = 256
    instruction_prefix: str = ""
    batch_size: int = 64


@dataclass
class ExtractionSettings:
    context_window_k: int = 2
    mode: str = ExtractionMode.TWO_STEP.value
    max_parse_retries: int = 2


@dataclass
class ScoringSettings:
    combination: str = "sv_svo_svoa_conv_msg"
    weights: Optional[dict[str, float]] = None
    bm25_weight: float = 0.0


@dataclass
class PathSettings:
    index: Optional[str] = None
    cache: Optional[str] = None


@dataclass
class AppConfig:
    chat: ChatSettings = field(default_factory=ChatSettings)
    embedding: EmbeddingSettings = field(default_factory=EmbeddingSettings)
    extraction: ExtractionSettings = field(default_factory=ExtractionSettings)
    scoring: ScoringSettings = field(default_factory=ScoringSettings)
    paths: PathSettings = field(default_factory=PathSettings)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(data: dict) -> "AppConfig":
        return AppConfig(
            chat=ChatSettings(**data.get("chat", {})),
            embedding=EmbeddingSettings(**data.get("embedding", {})),
            extraction=ExtractionSettings(**data.get("extraction", {})),
            scoring=ScoringSettings(**data.get("scoring", {})),
            paths=PathSettings(**data.get("paths", {})),
        )

    @staticmethod
    def load(path: str | Path) -> "AppConfig":
        with Path(path).open("r", encoding="utf-8") as handle:
            return AppConfig.from_dict(json.load(handle))

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as handle:
            json.dump(self.to_dict(), handle, indent=2)
            handle.write("\n")

    def build_chat_backend(self) -> ChatBackend:
        if self.chat.kind == "mock":
            return MockChatBackend()
        if self.chat.kind == "http":
            if not self.chat.base_url:
                raise ContractViolation("chat.base_url is required for the http backend")
            return HttpChatBackend(
                base_url=self.chat.base_url,
                model=self.chat.model,
                api_key_env=self.chat.api_key_env,
            )
        raise ContractViolation(f"unknown chat backend kind {self.chat.kind!r}")

    def build_embedding_backend(self) -> EmbeddingBackend:
        if self.embedding.kind == "hashed":
            return HashedEmbeddingBackend(self.embedding.dimension)
        if self.embedding.kind == "http":
            if not self.embedding.base_url:
                raise ContractViolation("embedding.base_url is required for the http backend")
            return HttpEmbeddingBackend(
                base_url=self.embedding.base_url,
                model_id=self.embedding.model_id,
                dimension=self.embedding.dimension,
                api_key_env=self.embedding.api_key_env,
                instruction_prefix=self.embedding.instruction_prefix,
            )
        raise ContractViolation(f"unknown embedding backend kind {self.embedding.kind!r}")

    def build_extraction_config(self) -> ExtractionConfig:
        return ExtractionConfig(
            context_window_k=self.extraction.context_window_k,
            temperature=self.chat.temperature,
            max_tokens=self.chat.max_tokens,
            max_parse_retries=self.extraction.max_parse_retries,
            mode=ExtractionMode(self.extraction.mode),
        )

    def build_scoring_config(self) -> ScoringConfig:
        weights = None
        if self.scoring.weights is not None:
            weights = {ComponentKind(k): v for k, v in self.scoring.weights.items()}
        return ScoringConfig(
            active_components=resolve_combination(self.scoring.combination),
            weights=weights,
            bm25_weight=self.scoring.bm25_weight,
        )
