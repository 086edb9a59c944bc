"""Application operations shared by the CLI and the HTTP service.

Ingestion is the expensive phase, so it is resumable: every completed
conversation is appended to a partial index file and its id to a progress
ledger before the next one starts. A rerun skips completed conversations and
the final index file is rewritten deterministically from scratch, so two
clean runs over the same input are byte-identical.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .config import AppConfig
from .core import ComponentKind, ContractViolation, Vector
from .embedding import EmbeddingBackend, EmbeddingCache, embed_texts
from .evaluation import load_corpus
from .index import (
    ConversationEntry,
    IndexManifest,
    SemanticIndexStore,
    _conversation_region_records,
    _dump,
    _entry_from_region,
    ingest_conversation,
    persist,
)
from .retrieval import ScoreBreakdown, ScoringConfig, rank_conversations, resolve_combination


@dataclass
class IngestReport:
    conversations: int
    skipped: int
    instance_counts: dict[str, int]
    warning_count: int
    mean_seconds_per_conversation: float
    index_path: str

    def to_dict(self) -> dict:
        return {
            "conversations": self.conversations,
            "skipped": self.skipped,
            "instance_counts": self.instance_counts,
            "warning_count": self.warning_count,
            "mean_seconds_per_conversation": self.mean_seconds_per_conversation,
            "index_path": self.index_path,
        }


def _progress_path(out_path: Path) -> Path:
    return out_path.with_name(out_path.name + ".progress")


def _partial_path(out_path: Path) -> Path:
    return out_path.with_name(out_path.name + ".partial")


def _load_partial_entries(
    partial: Path, completed: set[str], dimension: int
) -> dict[str, ConversationEntry]:
    """Recover committed entries from a partial file, ignoring a torn tail."""
    entries: dict[str, ConversationEntry] = {}
    try:
        lines = partial.read_text(encoding="utf-8").splitlines()
    except OSError:
        return entries
    header: Optional[dict] = None
    instance_records: list[dict] = []

    def flush() -> None:
        nonlocal header, instance_records
        if header is None:
            return
        conv_id = header.get("conv_id")
        if conv_id in completed:
            try:
                entry = _entry_from_region(header, instance_records)
                entry.validate(dimension)
                entries[conv_id] = entry
            except Exception:
                pass  # torn or inconsistent region: re-ingest it
        header = None
        instance_records = []

    for line in lines[1:]:  # first line is the manifest
        try:
            record = json.loads(line)
        except json.JSONDecodeError:
            break  # torn tail; nothing after it is trustworthy
        if not isinstance(record, dict):
            break
        if "messages" in record:
            flush()
            header = record
            instance_records = []
        elif "kind" in record:
            instance_records.append(record)
        else:
            break
    flush()
    return entries


def run_ingest(
    corpus_path: str | Path,
    out_path: str | Path,
    config: AppConfig,
    resume: bool = True,
) -> IngestReport:
    corpus = load_corpus(corpus_path)
    out = Path(out_path)
    progress_file = _progress_path(out)
    partial_file = _partial_path(out)

    chat_backend = config.build_chat_backend()
    embed_backend = config.build_embedding_backend()
    cache = EmbeddingCache(config.paths.cache) if config.paths.cache else None
    extraction_cfg = config.build_extraction_config()

    manifest = IndexManifest(
        model_id=embed_backend.model_id,
        dimension=embed_backend.dimension,
        extraction_mode=extraction_cfg.mode.value,
        created_at=time.time(),
    )

    completed: set[str] = set()
    recovered: dict[str, ConversationEntry] = {}
    if resume and progress_file.exists():
        completed = {
            line.strip()
            for line in progress_file.read_text(encoding="utf-8").splitlines()
            if line.strip()
        }
        recovered = _load_partial_entries(partial_file, completed, manifest.dimension)
        completed &= set(recovered)  # only regions that survived recovery count

    store = SemanticIndexStore(manifest)
    elapsed = 0.0
    ingested = 0

    # Rewrite the partial file from the recovered regions so a torn tail from
    # an interrupted run cannot shadow records appended after it.
    with partial_file.open("w", encoding="utf-8") as partial:
        partial.write(_dump(manifest.persisted_fields()) + "\n")
        for entry in recovered.values():
            for record in _conversation_region_records(entry):
                partial.write(_dump(record) + "\n")
        partial.flush()
        with progress_file.open("a", encoding="utf-8") as progress:
            for conv in corpus:
                if conv.conv_id in completed:
                    store.add_entry(recovered[conv.conv_id])
                    continue
                started = time.perf_counter()
                entry = ingest_conversation(
                    conv,
                    extraction_cfg,
                    chat_backend,
                    embed_backend,
                    cache,
                    config.embedding.batch_size,
                )
                elapsed += time.perf_counter() - started
                ingested += 1
                store.add_entry(entry)
                for record in _conversation_region_records(entry):
                    partial.write(_dump(record) + "\n")
                partial.flush()
                progress.write(conv.conv_id + "\n")
                progress.flush()

    persist(store, out)
    progress_file.unlink(missing_ok=True)
    partial_file.unlink(missing_ok=True)

    stats = store.stats()
    return IngestReport(
        conversations=len(store),
        skipped=len(completed),
        instance_counts=stats.instance_counts,
        warning_count=stats.warning_count,
        mean_seconds_per_conversation=elapsed / ingested if ingested else 0.0,
        index_path=str(out),
    )


def build_scoring_config(
    combination: Optional[str] = None,
    weights: Optional[dict[str, float]] = None,
    bm25_weight: float = 0.0,
) -> ScoringConfig:
    active = resolve_combination(combination) if combination else None
    kind_weights = None
    if weights is not None:
        kind_weights = {ComponentKind(k): float(v) for k, v in weights.items()}
    kwargs: dict = {"weights": kind_weights, "bm25_weight": bm25_weight}
    if active is not None:
        kwargs["active_components"] = active
    return ScoringConfig(**kwargs)


def execute_query(
    store: SemanticIndexStore,
    backend: EmbeddingBackend,
    text: str,
    top_k: int,
    cfg: ScoringConfig,
    cache: Optional[EmbeddingCache] = None,
) -> list[ScoreBreakdown]:
    """The single scoring path behind both the CLI and the HTTP endpoint."""
    if not text.strip():
        raise ContractViolation("query text must be non-empty")
    query_vec: Vector = embed_texts([text], backend, cache)[0]
    return rank_conversations(query_vec, store, cfg, top_k, query_text=text)


def breakdown_to_dict(breakdown: ScoreBreakdown) -> dict:
    svoa_text = breakdown.best_texts.get(ComponentKind.SVOA)
    return {
        "conv_id": breakdown.conv_id,
        "total": breakdown.total,
        "component_scores": {
            kind.value: score for kind, score in sorted(
                breakdown.component_scores.items(), key=lambda kv: kv[0].value
            )
        },
        "bm25_score": breakdown.bm25_score,
        "best_texts": {
            kind.value: text for kind, text in sorted(
                breakdown.best_texts.items(), key=lambda kv: kv[0].value
            )
        },
        "best_svoa": svoa_text,
    }
