from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from convsearch.core import (
    ComponentInstance,
    ComponentKind,
    ConversationRecord,
    SvoaQuadruplet,
    as_vector,
)
from convsearch.index import ConversationEntry, IndexManifest, SemanticIndexStore


def make_entry(
    conv_id: str,
    dim: int,
    instances_by_kind: dict[ComponentKind, list],
) -> ConversationEntry:
    """Build an entry directly from raw vectors, bypassing extraction.

    ``instances_by_kind`` maps kinds to vector lists; the conversation kind
    gets exactly one vector (a zero default when omitted). Texts and
    quadruplets are synthesized to satisfy the type invariants.
    """
    record = ConversationRecord.from_texts(conv_id, [("user", f"hello from {conv_id}")])
    conv_vecs = instances_by_kind.get(ComponentKind.CONVERSATION, [np.zeros(dim)])
    assert len(conv_vecs) == 1
    quadruplets: dict[str, SvoaQuadruplet] = {}
    instances: dict[ComponentKind, list[ComponentInstance]] = {k: [] for k in ComponentKind}
    instances[ComponentKind.CONVERSATION].append(
        ComponentInstance(
            kind=ComponentKind.CONVERSATION,
            text=f"user: hello from {conv_id}",
            embedding=as_vector(conv_vecs[0]),
        )
    )
    counter = 0
    for kind in (ComponentKind.MESSAGE, ComponentKind.SV, ComponentKind.SVO, ComponentKind.SVOA):
        for vec in instances_by_kind.get(kind, []):
            ref = None
            if kind is not ComponentKind.MESSAGE:
                ref = f"{conv_id}#q{counter}"
                quadruplets[ref] = SvoaQuadruplet("user", "mentions", f"thing{counter}", None, 0)
            instances[kind].append(
                ComponentInstance(
                    kind=kind,
                    text=f"{conv_id} {kind.value} {counter}",
                    embedding=as_vector(vec),
                    source_message_index=0,
                    quadruplet_ref=ref,
                )
            )
            counter += 1
    return ConversationEntry(record, quadruplets, instances, [])


def make_store(
    dim: int, entries: dict[str, dict[ComponentKind, list]]
) -> SemanticIndexStore:
    store = SemanticIndexStore(
        IndexManifest(model_id="test", dimension=dim, extraction_mode="two-step")
    )
    for conv_id, by_kind in entries.items():
        store.add_entry(make_entry(conv_id, dim, by_kind))
    return store


def random_store(
    rng: np.random.Generator,
    dim: int,
    max_convs: int = 50,
    max_instances: int = 20,
) -> SemanticIndexStore:
    n_convs = int(rng.integers(1, max_convs + 1))
    entries = {}
    for i in range(n_convs):
        by_kind: dict[ComponentKind, list] = {
            ComponentKind.CONVERSATION: [rng.normal(size=dim)]
        }
        for kind in (
            ComponentKind.MESSAGE,
            ComponentKind.SV,
            ComponentKind.SVO,
            ComponentKind.SVOA,
        ):
            count = int(rng.integers(0, max_instances + 1))
            by_kind[kind] = [rng.normal(size=dim) for _ in range(count)]
        entries[f"conv-{i:03d}"] = by_kind
    return make_store(dim, entries)


@pytest.fixture
def tiny_conversation() -> ConversationRecord:
    return ConversationRecord.from_texts(
        "tiny",
        [
            ("user", "Tell me about solar panels please."),
            ("assistant", "Solar panels convert sunlight."),
            ("user", "What movies do you like?"),
        ],
    )
