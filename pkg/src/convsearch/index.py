"""Per-conversation semantic index: embedded component instances plus persistence.

Each conversation contributes exactly one conversation-level instance, one
instance per message, and SV/SVO/SVOA instances per extracted quadruplet,
deduplicated by rendered text within each kind. The store persists to a
line-delimited JSON file whose first line is the manifest; the write is
deterministic so identical inputs produce byte-identical files.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .core import (
    ComponentInstance,
    ComponentKind,
    ContractViolation,
    ConversationRecord,
    Message,
    QUADRUPLET_KINDS,
    SvoaQuadruplet,
    Vector,
    as_vector,
    render_component_text,
    render_conversation_text,
    render_message_text,
)
from .embedding import EmbeddingBackend, EmbeddingCache, embed_texts
from .extraction import (
    ChatBackend,
    ExtractionConfig,
    ExtractionWarning,
    extract_conversation,
)

FORMAT_VERSION = 1

KIND_ORDER = (
    ComponentKind.CONVERSATION,
    ComponentKind.MESSAGE,
    ComponentKind.SV,
    ComponentKind.SVO,
    ComponentKind.SVOA,
)


class IndexFileError(ValueError):
    """Malformed, truncated, or incompatible index file."""


@dataclass
class IndexManifest:
    model_id: str
    dimension: int
    extraction_mode: str
    format_version: int = FORMAT_VERSION
    # In-memory bookkeeping only. Excluded from the persisted file so that
    # repeated ingestion runs stay byte-identical, and from equality checks.
    created_at: Optional[float] = None

    def persisted_fields(self) -> dict:
        return {
            "format_version": self.format_version,
            "model_id": self.model_id,
            "dimension": self.dimension,
            "extraction_mode": self.extraction_mode,
        }


@dataclass
class ConversationEntry:
    record: ConversationRecord
    quadruplets: dict[str, SvoaQuadruplet]
    instances: dict[ComponentKind, list[ComponentInstance]]
    warnings: list[ExtractionWarning] = field(default_factory=list)

    def validate(self, dimension: int) -> None:
        conv_instances = self.instances.get(ComponentKind.CONVERSATION, [])
        if len(conv_instances) != 1:
            raise ContractViolation(
                f"conversation {self.record.conv_id!r} must have exactly one "
                f"conversation instance, found {len(conv_instances)}"
            )
        for kind in KIND_ORDER:
            for inst in self.instances.get(kind, []):
                if inst.embedding.shape[0] != dimension:
                    raise ContractViolation(
                        f"instance dimension {inst.embedding.shape[0]} != manifest {dimension}"
                    )
                if inst.quadruplet_ref is not None and inst.quadruplet_ref not in self.quadruplets:
                    raise ContractViolation(
                        f"unresolved quadruplet ref {inst.quadruplet_ref!r} "
                        f"in conversation {self.record.conv_id!r}"
                    )


@dataclass
class StoreStats:
    conversation_count: int
    instance_counts: dict[str, int]
    per_conversation: dict[str, dict[str, int]]
    warning_count: int


@dataclass
class KindBlock:
    """Contiguous per-kind matrix layout for one-matmul scoring."""

    matrix: np.ndarray  # (rows, dim)
    norms: np.ndarray  # (rows,)
    counts: np.ndarray  # (n_convs,)
    starts: np.ndarray  # (n_convs,) row offset of each conversation
    texts: list[str]
    refs: list[Optional[str]]


@dataclass
class ScoringView:
    conv_ids: list[str]
    blocks: dict[ComponentKind, KindBlock]


class SemanticIndexStore:
    def __init__(self, manifest: IndexManifest) -> None:
        self.manifest = manifest
        self.entries: dict[str, ConversationEntry] = {}
        self._view: Optional[ScoringView] = None

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, conv_id: str) -> bool:
        return conv_id in self.entries

    def conv_ids(self) -> list[str]:
        return list(self.entries)

    def get(self, conv_id: str) -> ConversationEntry:
        try:
            return self.entries[conv_id]
        except KeyError:
            raise KeyError(f"unknown conversation {conv_id!r}") from None

    def add_entry(self, entry: ConversationEntry) -> None:
        conv_id = entry.record.conv_id
        if conv_id in self.entries:
            raise ContractViolation(f"duplicate conversation {conv_id!r}")
        entry.validate(self.manifest.dimension)
        self.entries[conv_id] = entry
        self._view = None

    def remove_index(self, quadruplet_ref: str) -> "SemanticIndexStore":
        """Drop one quadruplet and every SV/SVO/SVOA instance referencing it.

        Conversation and message instances are untouched.
        """
        for entry in self.entries.values():
            if quadruplet_ref in entry.quadruplets:
                del entry.quadruplets[quadruplet_ref]
                for kind in QUADRUPLET_KINDS:
                    entry.instances[kind] = [
                        inst
                        for inst in entry.instances.get(kind, [])
                        if inst.quadruplet_ref != quadruplet_ref
                    ]
                self._view = None
                return self
        raise KeyError(f"unknown quadruplet ref {quadruplet_ref!r}")

    def stats(self) -> StoreStats:
        totals = {kind.value: 0 for kind in KIND_ORDER}
        per_conv: dict[str, dict[str, int]] = {}
        warning_count = 0
        for conv_id, entry in self.entries.items():
            counts = {
                kind.value: len(entry.instances.get(kind, [])) for kind in KIND_ORDER
            }
            per_conv[conv_id] = counts
            for kind, n in counts.items():
                totals[kind] += n
            warning_count += len(entry.warnings)
        return StoreStats(len(self.entries), totals, per_conv, warning_count)

    def scoring_view(self) -> ScoringView:
        if self._view is None:
            self._view = _build_view(self)
        return self._view


def _build_view(store: SemanticIndexStore) -> ScoringView:
    conv_ids = store.conv_ids()
    blocks: dict[ComponentKind, KindBlock] = {}
    dim = store.manifest.dimension
    for kind in KIND_ORDER:
        rows: list[Vector] = []
        texts: list[str] = []
        refs: list[Optional[str]] = []
        counts = np.zeros(len(conv_ids), dtype=np.int64)
        for i, conv_id in enumerate(conv_ids):
            instances = store.entries[conv_id].instances.get(kind, [])
            counts[i] = len(instances)
            for inst in instances:
                rows.append(inst.embedding)
                texts.append(inst.text)
                refs.append(inst.quadruplet_ref)
        matrix = np.vstack(rows) if rows else np.zeros((0, dim), dtype=np.float64)
        norms = np.linalg.norm(matrix, axis=1) if rows else np.zeros(0, dtype=np.float64)
        starts = np.zeros(len(conv_ids), dtype=np.int64)
        if len(conv_ids) > 1:
            starts[1:] = np.cumsum(counts)[:-1]
        blocks[kind] = KindBlock(matrix, norms, counts, starts, texts, refs)
    return ScoringView(conv_ids, blocks)


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def ingest_conversation(
    conv: ConversationRecord,
    extraction_cfg: ExtractionConfig,
    chat_backend: ChatBackend,
    embedding_backend: EmbeddingBackend,
    cache: Optional[EmbeddingCache] = None,
    batch_size: int = 64,
    max_workers: Optional[int] = None,
) -> ConversationEntry:
    """Extract, render, and embed one conversation into an index entry.

    Atomic: an embedding failure raises before any entry is produced.
    Extraction warnings ride along as entry metadata.
    """
    warnings: list[ExtractionWarning] = []
    quadruplets = extract_conversation(conv, extraction_cfg, chat_backend, warnings, max_workers)
    refs = {f"{conv.conv_id}#q{j}": quad for j, quad in enumerate(quadruplets)}

    pending: list[tuple[ComponentKind, str, Optional[int], Optional[str]]] = []
    pending.append((ComponentKind.CONVERSATION, render_conversation_text(conv), None, None))
    for msg in conv.messages:
        pending.append((ComponentKind.MESSAGE, render_message_text(msg), msg.index, None))
    for ref, quad in refs.items():
        for kind in QUADRUPLET_KINDS:
            text = render_component_text(quad, kind)
            pending.append((kind, text, quad.source_message_index, ref))

    vectors = embed_texts(
        [text for _, text, _, _ in pending], embedding_backend, cache, batch_size
    )

    instances: dict[ComponentKind, list[ComponentInstance]] = {k: [] for k in KIND_ORDER}
    seen: set[tuple[ComponentKind, str]] = set()
    for (kind, text, msg_index, ref), vector in zip(pending, vectors):
        if (kind, text) in seen:
            continue
        seen.add((kind, text))
        instances[kind].append(
            ComponentInstance(
                kind=kind,
                text=text,
                embedding=vector,
                source_message_index=msg_index,
                quadruplet_ref=ref,
            )
        )

    return ConversationEntry(conv, refs, instances, warnings)


def ingest_corpus(
    conversations: Iterable[ConversationRecord],
    extraction_cfg: ExtractionConfig,
    chat_backend: ChatBackend,
    embedding_backend: EmbeddingBackend,
    cache: Optional[EmbeddingCache] = None,
    batch_size: int = 64,
) -> SemanticIndexStore:
    manifest = IndexManifest(
        model_id=embedding_backend.model_id,
        dimension=embedding_backend.dimension,
        extraction_mode=extraction_cfg.mode.value,
        created_at=time.time(),
    )
    store = SemanticIndexStore(manifest)
    for conv in conversations:
        store.add_entry(
            ingest_conversation(
                conv, extraction_cfg, chat_backend, embedding_backend, cache, batch_size
            )
        )
    return store


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _dump(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def _conversation_region_records(entry: ConversationEntry) -> Iterable[dict]:
    conv_id = entry.record.conv_id
    yield {
        "conv_id": conv_id,
        "messages": [{"role": m.role, "text": m.text} for m in entry.record.messages],
        "quadruplets": [
            {
                "ref": ref,
                "subject": q.subject,
                "verb": q.verb,
                "object": q.object,
                "adjunct": q.adjunct,
                "source_message_index": q.source_message_index,
            }
            for ref, q in entry.quadruplets.items()
        ],
        "warnings": [
            {
                "msg_index": w.msg_index,
                "stage": w.stage,
                "attempts": w.attempts,
                "raw_text": w.raw_text,
            }
            for w in entry.warnings
        ],
    }
    for kind in KIND_ORDER:
        for inst in entry.instances.get(kind, []):
            record: dict = {"conv_id": conv_id, "kind": kind.value, "text": inst.text}
            if inst.source_message_index is not None:
                record["source_message_index"] = inst.source_message_index
            if inst.quadruplet_ref is not None:
                record["quadruplet_ref"] = inst.quadruplet_ref
            record["vector"] = [float(x) for x in inst.embedding]
            yield record


def persist(store: SemanticIndexStore, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        handle.write(_dump(store.manifest.persisted_fields()) + "\n")
        for entry in store.entries.values():
            for record in _conversation_region_records(entry):
                handle.write(_dump(record) + "\n")


def _entry_from_region(header: dict, instance_records: list[dict]) -> ConversationEntry:
    messages = tuple(
        Message(i, m["role"], m["text"]) for i, m in enumerate(header["messages"])
    )
    record = ConversationRecord(header["conv_id"], messages)
    quadruplets = {
        q["ref"]: SvoaQuadruplet(
            q["subject"], q["verb"], q["object"], q.get("adjunct"), q["source_message_index"]
        )
        for q in header.get("quadruplets", [])
    }
    warnings = [
        ExtractionWarning(
            header["conv_id"], w["msg_index"], w["stage"], w["attempts"], w["raw_text"]
        )
        for w in header.get("warnings", [])
    ]
    instances: dict[ComponentKind, list[ComponentInstance]] = {k: [] for k in KIND_ORDER}
    for rec in instance_records:
        kind = ComponentKind(rec["kind"])
        instances[kind].append(
            ComponentInstance(
                kind=kind,
                text=rec["text"],
                embedding=as_vector(rec["vector"]),
                source_message_index=rec.get("source_message_index"),
                quadruplet_ref=rec.get("quadruplet_ref"),
            )
        )
    return ConversationEntry(record, quadruplets, instances, warnings)


def load(path: str | Path) -> SemanticIndexStore:
    """Rebuild a store from a persisted file.

    Fails with a record-numbered :class:`IndexFileError` on the first
    malformed line, dimension mismatch, or out-of-order record.
    """
    path = Path(path)
    with path.open("r", encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    if not lines:
        raise IndexFileError(f"{path}: empty index file")

    try:
        manifest_obj = json.loads(lines[0])
        manifest = IndexManifest(
            model_id=manifest_obj["model_id"],
            dimension=int(manifest_obj["dimension"]),
            extraction_mode=manifest_obj["extraction_mode"],
            format_version=int(manifest_obj["format_version"]),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise IndexFileError(f"record 1: bad manifest ({exc})") from exc
    if manifest.format_version != FORMAT_VERSION:
        raise IndexFileError(
            f"record 1: unsupported format_version {manifest.format_version}, "
            f"expected {FORMAT_VERSION}"
        )

    store = SemanticIndexStore(manifest)
    header: Optional[dict] = None
    header_no = 0
    instance_records: list[dict] = []

    def flush() -> None:
        nonlocal header, instance_records
        if header is None:
            return
        try:
            entry = _entry_from_region(header, instance_records)
            entry.validate(manifest.dimension)
            store.add_entry(entry)
        except (ContractViolation, KeyError, TypeError) as exc:
            raise IndexFileError(f"record {header_no}: {exc}") from exc
        header = None
        instance_records = []

    for record_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise IndexFileError(f"record {record_no}: invalid JSON ({exc})") from exc
        if not isinstance(record, dict):
            raise IndexFileError(f"record {record_no}: expected an object")
        if "messages" in record:
            flush()
            header = record
            header_no = record_no
        elif "kind" in record:
            if header is None or record.get("conv_id") != header.get("conv_id"):
                raise IndexFileError(
                    f"record {record_no}: instance record without its conversation header"
                )
            vector = record.get("vector")
            if not isinstance(vector, list) or len(vector) != manifest.dimension:
                raise IndexFileError(
                    f"record {record_no}: vector length "
                    f"{len(vector) if isinstance(vector, list) else 'missing'} "
                    f"does not match manifest dimension {manifest.dimension}"
                )
            instance_records.append(record)
        else:
            raise IndexFileError(f"record {record_no}: unrecognized record shape")
    flush()
    return store


def structurally_equal(a: SemanticIndexStore, b: SemanticIndexStore) -> bool:
    """Entry-by-entry equality with bit-exact vectors; creation time ignored."""
    if a.manifest.persisted_fields() != b.manifest.persisted_fields():
        return False
    if a.conv_ids() != b.conv_ids():
        return False
    for conv_id in a.conv_ids():
        ea, eb = a.entries[conv_id], b.entries[conv_id]
        if ea.record != eb.record or ea.quadruplets != eb.quadruplets:
            return False
        if ea.warnings != eb.warnings:
            return False
        for kind in KIND_ORDER:
            ia, ib = ea.instances.get(kind, []), eb.instances.get(kind, [])
            if len(ia) != len(ib):
                return False
            for x, y in zip(ia, ib):
                if (
                    x.text != y.text
                    or x.source_message_index != y.source_message_index
                    or x.quadruplet_ref != y.quadruplet_ref
                    or not np.array_equal(x.embedding, y.embedding)
                ):
                    return False
    return True
