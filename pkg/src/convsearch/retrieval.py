"""Retrieval-phase scoring: query similarity against five conversational components.

A conversation's score is the conversation-level cosine similarity plus, for
each active component kind, the aggregated (max by default) similarity over
that kind's instances: the most salient instance decides, so irrelevant
messages add no noise. A weighted variant, an Okapi BM25 hybrid term, and
cross-backend score ensembles are supported.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import (
    ComponentKind,
    ContractViolation,
    Vector,
    cosine_similarity,
    render_conversation_text,
    tokenize,
)
from .index import ConversationEntry, ScoringView, SemanticIndexStore

ALL_COMPONENTS = frozenset(ComponentKind)

COMBINATIONS: dict[str, frozenset[ComponentKind]] = {
    "sv": frozenset({ComponentKind.SV}),
    "sv_svo": frozenset({ComponentKind.SV, ComponentKind.SVO}),
    "sv_svo_svoa": frozenset({ComponentKind.SV, ComponentKind.SVO, ComponentKind.SVOA}),
    "svoa_conv_msg": frozenset(
        {ComponentKind.SVOA, ComponentKind.CONVERSATION, ComponentKind.MESSAGE}
    ),
    "svo_svoa_conv_msg": frozenset(
        {ComponentKind.SVO, ComponentKind.SVOA, ComponentKind.CONVERSATION, ComponentKind.MESSAGE}
    ),
    "sv_svo_svoa_conv_msg": ALL_COMPONENTS,
}


class UnknownCombinationError(ValueError):
    def __init__(self, name: str) -> None:
        valid = ", ".join(sorted(COMBINATIONS))
        super().__init__(f"unknown combination {name!r}; valid names: {valid}")


def resolve_combination(name: str) -> frozenset[ComponentKind]:
    try:
        return COMBINATIONS[name]
    except KeyError:
        raise UnknownCombinationError(name) from None


class Aggregation(str, Enum):
    MAX = "max"
    SUM = "sum"
    AVG = "avg"


@dataclass(frozen=True)
class ScoringConfig:
    active_components: frozenset[ComponentKind] = ALL_COMPONENTS
    weights: Optional[Mapping[ComponentKind, float]] = None
    aggregation: Aggregation = Aggregation.MAX
    bm25_weight: float = 0.0
    missing_component_score: float = 0.0

    def __post_init__(self) -> None:
        if not self.active_components:
            raise ContractViolation("active_components must be non-empty")
        if self.bm25_weight < 0:
            raise ContractViolation("bm25_weight must be >= 0")
        if self.weights is not None:
            for kind, w in self.weights.items():
                if w < 0:
                    raise ContractViolation(f"weight for {kind.value} must be >= 0, got {w}")

    @staticmethod
    def from_combination(name: str, **overrides) -> "ScoringConfig":
        return ScoringConfig(active_components=resolve_combination(name), **overrides)

    def weight(self, kind: ComponentKind) -> float:
        if self.weights is None:
            return 1.0
        return float(self.weights.get(kind, 1.0))


@dataclass
class ScoreBreakdown:
    conv_id: str
    component_scores: dict[ComponentKind, float]
    total: float
    bm25_score: Optional[float] = None
    best_texts: dict[ComponentKind, Optional[str]] = field(default_factory=dict)


def _aggregate(sims: Sequence[float], aggregation: Aggregation) -> float:
    if aggregation is Aggregation.MAX:
        return max(sims)
    if aggregation is Aggregation.SUM:
        return float(sum(sims))
    return float(sum(sims)) / len(sims)


def score_conversation(
    query_vec: Vector, entry: ConversationEntry, cfg: ScoringConfig
) -> ScoreBreakdown:
    """Score a single conversation entry against an embedded query."""
    component_scores: dict[ComponentKind, float] = {}
    best_texts: dict[ComponentKind, Optional[str]] = {}
    for kind in cfg.active_components:
        instances = entry.instances.get(kind, [])
        if not instances:
            component_scores[kind] = cfg.missing_component_score
            best_texts[kind] = None
            continue
        sims = [cosine_similarity(query_vec, inst.embedding) for inst in instances]
        component_scores[kind] = _aggregate(sims, cfg.aggregation)
        best_texts[kind] = instances[int(np.argmax(sims))].text
    total = sum(cfg.weight(kind) * component_scores[kind] for kind in cfg.active_components)
    return ScoreBreakdown(entry.record.conv_id, component_scores, total, None, best_texts)


# ---------------------------------------------------------------------------
# Corpus-level ranking (vectorized over the store's scoring view)
# ---------------------------------------------------------------------------

def _kind_similarities(view: ScoringView, kind: ComponentKind, query_vec: Vector) -> np.ndarray:
    block = view.blocks[kind]
    if block.matrix.shape[0] == 0:
        return np.zeros(0, dtype=np.float64)
    q_norm = float(np.linalg.norm(query_vec))
    if q_norm == 0.0:
        return np.zeros(block.matrix.shape[0], dtype=np.float64)
    dots = block.matrix @ query_vec
    denom = block.norms * q_norm
    return np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)


def _segment_aggregate(
    sims: np.ndarray, block, aggregation: Aggregation, missing: float
) -> np.ndarray:
    n_convs = block.counts.shape[0]
    out = np.full(n_convs, missing, dtype=np.float64)
    nonempty = block.counts > 0
    if sims.shape[0] == 0 or not nonempty.any():
        return out
    starts = block.starts[nonempty]
    if aggregation is Aggregation.MAX:
        out[nonempty] = np.maximum.reduceat(sims, starts)
    elif aggregation is Aggregation.SUM:
        out[nonempty] = np.add.reduceat(sims, starts)
    else:
        out[nonempty] = np.add.reduceat(sims, starts) / block.counts[nonempty]
    return out


def _component_score_table(
    view: ScoringView, query_vec: Vector, cfg: ScoringConfig
) -> tuple[dict[ComponentKind, np.ndarray], dict[ComponentKind, np.ndarray]]:
    scores: dict[ComponentKind, np.ndarray] = {}
    sims_by_kind: dict[ComponentKind, np.ndarray] = {}
    for kind in cfg.active_components:
        sims = _kind_similarities(view, kind, query_vec)
        sims_by_kind[kind] = sims
        scores[kind] = _segment_aggregate(
            sims, view.blocks[kind], cfg.aggregation, cfg.missing_component_score
        )
    return scores, sims_by_kind


def _totals(
    scores: dict[ComponentKind, np.ndarray], cfg: ScoringConfig, n_convs: int
) -> np.ndarray:
    totals = np.zeros(n_convs, dtype=np.float64)
    for kind, arr in scores.items():
        totals += cfg.weight(kind) * arr
    return totals


def rank_conversations(
    query_vec: Vector,
    store: SemanticIndexStore,
    cfg: ScoringConfig,
    top_k: int,
    query_text: Optional[str] = None,
) -> list[ScoreBreakdown]:
    """Rank the whole store against one query.

    Descending total; ties broken by ascending conv_id so evaluation runs are
    reproducible. When ``bm25_weight`` is non-zero the raw query text must be
    supplied for the lexical term.
    """
    if top_k < 1:
        raise ContractViolation(f"top_k must be >= 1, got {top_k}")
    if len(store) == 0:
        return []
    if query_vec.shape[0] != store.manifest.dimension:
        raise ContractViolation(
            f"query dimension {query_vec.shape[0]} != index dimension {store.manifest.dimension}"
        )
    view = store.scoring_view()
    scores, sims_by_kind = _component_score_table(view, query_vec, cfg)
    totals = _totals(scores, cfg, len(view.conv_ids))

    bm25_by_conv: Optional[dict[str, float]] = None
    if cfg.bm25_weight > 0:
        if query_text is None:
            raise ContractViolation("query_text is required when bm25_weight > 0")
        bm25_by_conv = bm25_scores(query_text, store)
        totals = totals + cfg.bm25_weight * np.array(
            [bm25_by_conv[c] for c in view.conv_ids], dtype=np.float64
        )

    order = sorted(range(len(view.conv_ids)), key=lambda i: (-totals[i], view.conv_ids[i]))
    results = []
    for i in order[: min(top_k, len(order))]:
        conv_id = view.conv_ids[i]
        component_scores = {kind: float(scores[kind][i]) for kind in cfg.active_components}
        best_texts: dict[ComponentKind, Optional[str]] = {}
        for kind in cfg.active_components:
            block = view.blocks[kind]
            count = int(block.counts[i])
            if count == 0:
                best_texts[kind] = None
                continue
            start = int(block.starts[i])
            segment = sims_by_kind[kind][start : start + count]
            best_texts[kind] = block.texts[start + int(np.argmax(segment))]
        results.append(
            ScoreBreakdown(
                conv_id,
                component_scores,
                float(totals[i]),
                None if bm25_by_conv is None else bm25_by_conv[conv_id],
                best_texts,
            )
        )
    return results


# ---------------------------------------------------------------------------
# Okapi BM25 hybrid term
# ---------------------------------------------------------------------------

def bm25_scores(
    query_text: str, store: SemanticIndexStore, k1: float = 1.2, b: float = 0.75
) -> dict[str, float]:
    """Okapi BM25 over tokenized conversation renderings, max-normalized.

    IDF uses the +0.5-smoothed log ratio floored at zero. Scores are divided
    by the per-query maximum so the hybrid term shares the cosine scale.
    """
    if len(store) == 0:
        raise ContractViolation("bm25_scores requires a non-empty store")
    conv_ids = store.conv_ids()
    docs = [tokenize(render_conversation_text(store.entries[c].record)) for c in conv_ids]
    doc_lens = [len(d) for d in docs]
    avgdl = sum(doc_lens) / len(docs)
    term_freqs = [Counter(d) for d in docs]

    df: Counter[str] = Counter()
    for tf in term_freqs:
        df.update(tf.keys())

    n_docs = len(docs)
    query_tokens = tokenize(query_text)
    raw = []
    for tf, dl in zip(term_freqs, doc_lens):
        score = 0.0
        for token in query_tokens:
            freq = tf.get(token, 0)
            if freq == 0:
                continue
            idf = max(0.0, math.log((n_docs - df[token] + 0.5) / (df[token] + 0.5)))
            norm = k1 * (1.0 - b + b * dl / avgdl) if avgdl > 0 else k1
            score += idf * freq * (k1 + 1.0) / (freq + norm)
        raw.append(score)

    peak = max(raw)
    if peak <= 0.0:
        return {conv_id: 0.0 for conv_id in conv_ids}
    return {conv_id: score / peak for conv_id, score in zip(conv_ids, raw)}


# ---------------------------------------------------------------------------
# Cross-backend ensembles
# ---------------------------------------------------------------------------

def ensemble_score(
    query_vectors: Mapping[str, Vector],
    stores: Mapping[str, SemanticIndexStore],
    cfg: ScoringConfig,
    query_text: Optional[str] = None,
) -> dict[str, float]:
    """Per-conversation totals summed across embedding backends.

    All stores must cover the identical conversation set.
    """
    if set(query_vectors) != set(stores):
        raise ContractViolation(
            f"query vectors and stores must share backend ids: "
            f"{sorted(set(query_vectors) ^ set(stores))}"
        )
    if not stores:
        raise ContractViolation("ensemble_score requires at least one backend")
    backend_ids = list(stores)
    reference = set(stores[backend_ids[0]].conv_ids())
    for backend_id in backend_ids[1:]:
        other = set(stores[backend_id].conv_ids())
        if other != reference:
            diff = sorted(reference ^ other)
            raise ContractViolation(
                f"stores disagree on conversations (backend {backend_id!r}): {diff}"
            )

    combined: dict[str, float] = {conv_id: 0.0 for conv_id in sorted(reference)}
    for backend_id in backend_ids:
        store = stores[backend_id]
        view = store.scoring_view()
        scores, _ = _component_score_table(view, query_vectors[backend_id], cfg)
        totals = _totals(scores, cfg, len(view.conv_ids))
        if cfg.bm25_weight > 0:
            if query_text is None:
                raise ContractViolation("query_text is required when bm25_weight > 0")
            bm25 = bm25_scores(query_text, store)
            totals = totals + cfg.bm25_weight * np.array(
                [bm25[c] for c in view.conv_ids], dtype=np.float64
            )
        for conv_id, total in zip(view.conv_ids, totals):
            combined[conv_id] += float(total)
    return combined


def ensemble_rank(
    query_vectors: Mapping[str, Vector],
    stores: Mapping[str, SemanticIndexStore],
    cfg: ScoringConfig,
    top_k: int,
    query_text: Optional[str] = None,
) -> list[tuple[str, float]]:
    totals = ensemble_score(query_vectors, stores, cfg, query_text)
    ranked = sorted(totals.items(), key=lambda item: (-item[1], item[0]))
    return ranked[: min(top_k, len(ranked))]
