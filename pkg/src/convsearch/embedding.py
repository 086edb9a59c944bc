"""Pluggable text embedding with batching, caching, and an offline mock.

Vectors are L2-normalized at ingestion time so that cosine similarity reduces
to a dot product in the retrieval hot path. The hashed bag-of-words backend
is fully deterministic across runs and platforms (BLAKE2b token hashing) and
exists so every pipeline stage can run without network access.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from pathlib import Path
from typing import Optional, Protocol, Sequence

import httpx
import numpy as np

from .core import ContractViolation, Vector, as_vector, l2_normalize, tokenize


class EmbeddingBackend(Protocol):
    """Batch embedding contract: output order matches input order, every
    vector has the declared dimension, deterministic backends return
    identical vectors for identical texts."""

    model_id: str
    dimension: int

    def embed_batch(self, texts: Sequence[str]) -> list[Vector]: ...


class EmbeddingBackendError(RuntimeError):
    """Raised when a backend keeps failing; carries the input indices of the
    batch that could not be embedded."""

    def __init__(self, message: str, failed_indices: Sequence[int]) -> None:
        super().__init__(message)
        self.failed_indices = tuple(failed_indices)


def hashed_embed(text: str, dimension: int = 256) -> Vector:
    """Deterministic feature-hashed bag-of-words embedding.

    Each token is hashed with unkeyed BLAKE2b (8-byte digest); the first four
    digest bytes choose the bucket, the low bit of the fifth byte chooses the
    sign. Token-order free by construction; empty text maps to the zero
    vector.
    """
    if dimension < 2:
        raise ContractViolation(f"hashed_embed dimension must be >= 2, got {dimension}")
    vec = np.zeros(dimension, dtype=np.float64)
    for token in tokenize(text):
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        bucket = int.from_bytes(digest[:4], "big") % dimension
        sign = 1.0 if digest[4] & 1 else -1.0
        vec[bucket] += sign
    return l2_normalize(vec)


class HashedEmbeddingBackend:
    def __init__(self, dimension: int = 256) -> None:
        self.dimension = dimension
        self.model_id = f"hashed-bow-{dimension}"

    def embed_batch(self, texts: Sequence[str]) -> list[Vector]:
        return [hashed_embed(t, self.dimension) for t in texts]


class HttpEmbeddingBackend:
    """Embedding endpoint client (OpenAI-compatible wire shape).

    ``instruction_prefix`` is prepended to every text before the request;
    change ``model_id`` alongside the prefix so cached vectors stay distinct.
    """

    def __init__(
        self,
        base_url: str,
        model_id: str,
        dimension: int,
        api_key_env: str = "EMBED_API_KEY",
        instruction_prefix: str = "",
        timeout: float = 60.0,
        transport: Optional[httpx.BaseTransport] = None,
    ) -> None:
        self.model_id = model_id
        self.dimension = dimension
        self.instruction_prefix = instruction_prefix
        headers = {}
        api_key = os.environ.get(api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(
            base_url=base_url, timeout=timeout, headers=headers, transport=transport
        )

    def embed_batch(self, texts: Sequence[str]) -> list[Vector]:
        payload = {
            "model": self.model_id,
            "input": [self.instruction_prefix + t for t in texts],
        }
        response = self._client.post("/embeddings", json=payload)
        response.raise_for_status()
        data = response.json()["data"]
        return [as_vector(item["embedding"]) for item in data]

    def close(self) -> None:
        self._client.close()


class EmbeddingCache:
    """(model_id, text) -> vector map with an optional append-only backing file.

    Safe for concurrent lookups and inserts; duplicate concurrent misses may
    both reach the backend, which is harmless because deterministic backends
    return identical vectors (last write wins).
    """

    def __init__(self, path: Optional[str | Path] = None) -> None:
        self._data: dict[tuple[str, str], Vector] = {}
        self._lock = threading.Lock()
        self._path = Path(path) if path is not None else None
        if self._path is not None and self._path.exists():
            self._load_file()

    def _load_file(self) -> None:
        assert self._path is not None
        with self._path.open("r", encoding="utf-8") as handle:
            for line in handle:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                vec = as_vector(record["vector"])
                self._data[(record["model_id"], record["text"])] = vec

    def get(self, model_id: str, text: str) -> Optional[Vector]:
        with self._lock:
            return self._data.get((model_id, text))

    def put(self, model_id: str, text: str, vector: Vector) -> None:
        with self._lock:
            self._data[(model_id, text)] = vector
            if self._path is not None:
                record = {
                    "model_id": model_id,
                    "text_hash": hashlib.sha256(text.encode("utf-8")).hexdigest()[:16],
                    "text": text,
                    "vector": [float(x) for x in vector],
                }
                with self._path.open("a", encoding="utf-8") as handle:
                    handle.write(json.dumps(record, ensure_ascii=False) + "\n")

    def __len__(self) -> int:
        with self._lock:
            return len(self._data)


def embed_texts(
    texts: Sequence[str],
    backend: EmbeddingBackend,
    cache: Optional[EmbeddingCache] = None,
    batch_size: int = 64,
    retries: int = 3,
    retry_base_delay: float = 0.5,
) -> list[Vector]:
    """Embed texts cache-first, batching misses to the backend.

    Results are L2-normalized before caching. Empty strings map to the zero
    vector without a backend call. Transport failures are retried with
    exponential backoff (``retries`` attempts total); persistent failure
    raises :class:`EmbeddingBackendError` carrying the failed input indices.
    """
    if not isinstance(texts, Sequence) or isinstance(texts, str) or not texts:
        raise ContractViolation("embed_texts expects a non-empty list of strings")
    if batch_size < 1:
        raise ContractViolation("batch_size must be >= 1")

    dim = backend.dimension
    zero = as_vector(np.zeros(dim))
    results: list[Optional[Vector]] = [None] * len(texts)
    miss_positions: dict[str, list[int]] = {}

    for i, text in enumerate(texts):
        if text == "":
            results[i] = zero
            continue
        cached = cache.get(backend.model_id, text) if cache is not None else None
        if cached is not None:
            results[i] = cached
        else:
            miss_positions.setdefault(text, []).append(i)

    unique_misses = list(miss_positions)
    for batch_start in range(0, len(unique_misses), batch_size):
        batch = unique_misses[batch_start : batch_start + batch_size]
        vectors = _embed_batch_with_retry(
            backend, batch, [miss_positions[t] for t in batch], retries, retry_base_delay
        )
        for text, vector in zip(batch, vectors):
            normalized = l2_normalize(vector)
            if cache is not None:
                cache.put(backend.model_id, text, normalized)
            for pos in miss_positions[text]:
                results[pos] = normalized

    return [r for r in results if r is not None]


def _embed_batch_with_retry(
    backend: EmbeddingBackend,
    batch: Sequence[str],
    positions: Sequence[Sequence[int]],
    retries: int,
    base_delay: float,
) -> list[Vector]:
    last_error: Optional[Exception] = None
    for attempt in range(retries):
        try:
            vectors = backend.embed_batch(batch)
        except Exception as exc:  # transport or backend failure
            last_error = exc
            if attempt + 1 < retries and base_delay > 0:
                time.sleep(base_delay * (2**attempt))
            continue
        if len(vectors) != len(batch):
            raise EmbeddingBackendError(
                f"backend returned {len(vectors)} vectors for a batch of {len(batch)}",
                [p for group in positions for p in group],
            )
        for vec in vectors:
            if vec.shape[0] != backend.dimension:
                raise EmbeddingBackendError(
                    f"backend returned dimension {vec.shape[0]}, declared {backend.dimension}",
                    [p for group in positions for p in group],
                )
        return vectors
    failed = sorted(p for group in positions for p in group)
    raise EmbeddingBackendError(
        f"embedding backend failed after {retries} attempts: {last_error}", failed
    )
