"""Benchmark harness: loaders, ranking metrics, end-to-end runs, weight search,
and a deterministic synthetic corpus generator with planted relevance.

All metrics use binary relevance and are reported at cutoffs 1/5/10/20. The
aligned text report shows the standard column set (acc@1 through map@20) and
echoes the published external reference figures for eyeball comparison; they
are never asserted.
"""

from __future__ import annotations

import json
import math
import random
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import ComponentKind, ContractViolation, ConversationRecord, Message
from .embedding import EmbeddingBackend, EmbeddingCache, embed_texts
from .index import KIND_ORDER, SemanticIndexStore
from .retrieval import (
    ScoringConfig,
    _component_score_table,
    _totals,
    bm25_scores,
    ensemble_rank,
    rank_conversations,
)

METRIC_KS = (1, 5, 10, 20)
METRIC_FAMILIES = ("acc", "p", "r", "ndcg", "mrr", "map")

REPORT_COLUMNS = (
    "acc@1", "acc@5", "p@5", "p@10", "r@5", "r@10",
    "ndcg@10", "ndcg@20", "mrr@10", "mrr@20", "map@10", "map@20",
)

# Best published external system (proprietary chat + embedding backends);
# echoed in reports for comparison, never asserted.
REFERENCE_BASELINE = {"acc@1": 0.4085, "ndcg@20": 0.3198}


class CorpusFormatError(ValueError):
    """A corpus or query file violated the line-delimited JSON schema."""


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    text: str
    relevant_conv_ids: frozenset[str]

    def __post_init__(self) -> None:
        if not self.query_id:
            raise ContractViolation("query_id must be non-empty")
        if not self.text.strip():
            raise ContractViolation(f"query {self.query_id!r} has empty text")
        if not self.relevant_conv_ids:
            raise ContractViolation(f"query {self.query_id!r} has no relevant conversations")


# ---------------------------------------------------------------------------
# File loading / writing
# ---------------------------------------------------------------------------

def _read_lines(path: Path) -> Iterable[tuple[int, dict]]:
    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}:{line_no}: invalid JSON ({exc})") from exc
            if not isinstance(record, dict):
                raise CorpusFormatError(f"{path}:{line_no}: expected a JSON object")
            yield line_no, record


def load_corpus(path: str | Path) -> list[ConversationRecord]:
    path = Path(path)
    records: list[ConversationRecord] = []
    seen: set[str] = set()
    for line_no, obj in _read_lines(path):
        try:
            conv_id = obj["conv_id"]
            raw_messages = obj["messages"]
            messages = tuple(
                Message(i, m["role"], m["text"]) for i, m in enumerate(raw_messages)
            )
            record = ConversationRecord(conv_id, messages)
        except (KeyError, TypeError, ContractViolation) as exc:
            raise CorpusFormatError(f"{path}:{line_no}: {exc}") from exc
        if record.conv_id in seen:
            raise CorpusFormatError(f"{path}:{line_no}: duplicate conv_id {record.conv_id!r}")
        seen.add(record.conv_id)
        records.append(record)
    return records


def load_queries(
    path: str | Path, known_conv_ids: Optional[set[str]] = None
) -> list[QueryRecord]:
    path = Path(path)
    queries: list[QueryRecord] = []
    seen: set[str] = set()
    for line_no, obj in _read_lines(path):
        try:
            query = QueryRecord(
                obj["query_id"], obj["text"], frozenset(obj["relevant_conv_ids"])
            )
        except (KeyError, TypeError, ContractViolation) as exc:
            raise CorpusFormatError(f"{path}:{line_no}: {exc}") from exc
        if query.query_id in seen:
            raise CorpusFormatError(f"{path}:{line_no}: duplicate query_id {query.query_id!r}")
        seen.add(query.query_id)
        if known_conv_ids is not None:
            unknown = sorted(query.relevant_conv_ids - known_conv_ids)
            if unknown:
                raise CorpusFormatError(
                    f"{path}:{line_no}: query {query.query_id!r} references "
                    f"unknown conversations {unknown}"
                )
        queries.append(query)
    return queries


def write_corpus(conversations: Sequence[ConversationRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for conv in conversations:
            record = {
                "conv_id": conv.conv_id,
                "messages": [{"role": m.role, "text": m.text} for m in conv.messages],
            }
            handle.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")) + "\n")


def write_queries(queries: Sequence[QueryRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for query in queries:
            record = {
                "query_id": query.query_id,
                "text": query.text,
                "relevant_conv_ids": sorted(query.relevant_conv_ids),
            }
            handle.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# Ranking metrics (binary relevance)
# ---------------------------------------------------------------------------

def _hits(ranked: Sequence[str], relevant: frozenset[str] | set[str], k: int) -> int:
    return sum(1 for conv_id in ranked[:k] if conv_id in relevant)


def acc_at_k(ranked: Sequence[str], relevant: frozenset[str] | set[str], k: int) -> float:
    return 1.0 if _hits(ranked, relevant, k) > 0 else 0.0


def p_at_k(ranked: Sequence[str], relevant: frozenset[str] | set[str], k: int) -> float:
    return _hits(ranked, relevant, k) / k


def r_at_k(ranked: Sequence[str], relevant: frozenset[str] | set[str], k: int) -> float:
    if not relevant:
        return 0.0
    return _hits(ranked, relevant, k) / len(relevant)


def mrr_at_k(ranked: Sequence[str], relevant: frozenset[str] | set[str], k: int) -> float:
    for rank, conv_id in enumerate(ranked[:k], start=1):
        if conv_id in relevant:
            return 1.0 / rank
    return 0.0


def ndcg_at_k(ranked: Sequence[str], relevant: frozenset[str] | set[str], k: int) -> float:
    """Binary-gain DCG at 1-based ranks, normalized by the ideal front-loaded
    placement of min(|relevant|, k) items."""
    if not relevant:
        return 0.0
    dcg = sum(
        1.0 / math.log2(rank + 1)
        for rank, conv_id in enumerate(ranked[:k], start=1)
        if conv_id in relevant
    )
    ideal = min(len(relevant), k)
    idcg = sum(1.0 / math.log2(rank + 1) for rank in range(1, ideal + 1))
    return dcg / idcg if idcg > 0 else 0.0


def map_at_k(ranked: Sequence[str], relevant: frozenset[str] | set[str], k: int) -> float:
    if not relevant:
        return 0.0
    hits = 0
    precision_sum = 0.0
    for rank, conv_id in enumerate(ranked[:k], start=1):
        if conv_id in relevant:
            hits += 1
            precision_sum += hits / rank
    return precision_sum / min(len(relevant), k)


_METRIC_FUNCS = {
    "acc": acc_at_k,
    "p": p_at_k,
    "r": r_at_k,
    "ndcg": ndcg_at_k,
    "mrr": mrr_at_k,
    "map": map_at_k,
}


def query_metrics(
    ranked: Sequence[str], relevant: frozenset[str] | set[str], ks: Sequence[int] = METRIC_KS
) -> dict[str, float]:
    return {
        f"{family}@{k}": _METRIC_FUNCS[family](ranked, relevant, k)
        for family in METRIC_FAMILIES
        for k in ks
    }


@dataclass
class MetricsReport:
    metrics: dict[str, float]
    query_count: int
    mean_scoring_seconds: float

    def to_dict(self) -> dict:
        return {
            "metrics": self.metrics,
            "query_count": self.query_count,
            "mean_scoring_seconds": self.mean_scoring_seconds,
            "reference_baseline": dict(REFERENCE_BASELINE),
        }

    def table(self) -> str:
        width = 8
        header = " ".join(f"{c:>{width}}" for c in REPORT_COLUMNS)
        values = " ".join(f"{self.metrics[c]:>{width}.4f}" for c in REPORT_COLUMNS)
        footer = (
            f"queries: {self.query_count}  "
            f"mean scoring time: {self.mean_scoring_seconds * 1000:.3f} ms/query\n"
            f"external reference baseline (not asserted): "
            + " ".join(f"{k} {v:.4f}" for k, v in REFERENCE_BASELINE.items())
        )
        return f"{header}\n{values}\n{footer}"


def _validate_queries_against(conv_ids: set[str], queries: Sequence[QueryRecord]) -> None:
    for query in queries:
        unknown = sorted(query.relevant_conv_ids - conv_ids)
        if unknown:
            raise ContractViolation(
                f"query {query.query_id!r} references conversations missing "
                f"from the index: {unknown}"
            )


def run_benchmark(
    store: SemanticIndexStore | Mapping[str, SemanticIndexStore],
    queries: Sequence[QueryRecord],
    cfg: ScoringConfig,
    backend: EmbeddingBackend | Mapping[str, EmbeddingBackend],
    cache: Optional[EmbeddingCache] = None,
    ks: Sequence[int] = METRIC_KS,
) -> MetricsReport:
    """Embed each query once, rank, and average the full metric suite.

    Wall-clock is measured around the scoring step only (query embedding is
    excluded), mirroring the two-phase cost split. Passing mappings of stores
    and backends evaluates their score ensemble instead of a single index.
    """
    if not queries:
        raise ContractViolation("run_benchmark requires at least one query")
    top_k = max(ks)
    texts = [q.text for q in queries]

    if isinstance(store, Mapping):
        if not isinstance(backend, Mapping) or set(backend) != set(store):
            raise ContractViolation("ensemble benchmark needs one backend per store")
        first = next(iter(store.values()))
        _validate_queries_against(set(first.conv_ids()), queries)
        vectors = {
            backend_id: embed_texts(texts, b, cache) for backend_id, b in backend.items()
        }
        per_query_vectors = [
            {backend_id: vectors[backend_id][i] for backend_id in vectors}
            for i in range(len(queries))
        ]

        def rank(i: int) -> list[str]:
            ranked = ensemble_rank(per_query_vectors[i], store, cfg, top_k, texts[i])
            return [conv_id for conv_id, _ in ranked]
    else:
        if isinstance(backend, Mapping):
            raise ContractViolation("a single store takes a single embedding backend")
        _validate_queries_against(set(store.conv_ids()), queries)
        query_vectors = embed_texts(texts, backend, cache)

        def rank(i: int) -> list[str]:
            ranked = rank_conversations(query_vectors[i], store, cfg, top_k, texts[i])
            return [b.conv_id for b in ranked]

    sums = {f"{family}@{k}": 0.0 for family in METRIC_FAMILIES for k in ks}
    elapsed = 0.0
    for i, query in enumerate(queries):
        started = time.perf_counter()
        ranked_ids = rank(i)
        elapsed += time.perf_counter() - started
        for name, value in query_metrics(ranked_ids, query.relevant_conv_ids, ks).items():
            sums[name] += value

    n = len(queries)
    return MetricsReport(
        metrics={name: value / n for name, value in sums.items()},
        query_count=n,
        mean_scoring_seconds=elapsed / n,
    )


# ---------------------------------------------------------------------------
# Weight optimization (random search)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WeightSearchConfig:
    sample_count: int = 1000
    weight_range: tuple[float, float] = (0.0, 2.0)
    objective: str = "ndcg@20"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.sample_count < 0:
            raise ContractViolation("sample_count must be >= 0")
        low, high = self.weight_range
        if not (0 <= low <= high):
            raise ContractViolation(f"invalid weight range {self.weight_range}")


@dataclass
class WeightSearchResult:
    weights: dict[ComponentKind, float]
    objective_value: float
    evaluated: int


def optimize_weights(
    store: SemanticIndexStore,
    queries: Sequence[QueryRecord],
    search_cfg: WeightSearchConfig,
    scoring_cfg: Optional[ScoringConfig] = None,
    backend: Optional[EmbeddingBackend] = None,
    cache: Optional[EmbeddingCache] = None,
) -> WeightSearchResult:
    """Random search over component weights, maximizing the objective metric.

    The uniform all-ones vector is always candidate 0 and wins ties, so the
    returned objective can never fall below the uniform baseline. Component
    similarity tables are computed once per query; candidates only recombine
    them, which keeps large sample counts cheap.
    """
    if not queries:
        raise ContractViolation("optimize_weights requires a non-empty validation set")
    if backend is None:
        raise ContractViolation("optimize_weights requires an embedding backend")
    cfg = scoring_cfg or ScoringConfig()
    _validate_queries_against(set(store.conv_ids()), queries)

    family, _, k_str = search_cfg.objective.partition("@")
    if family not in _METRIC_FUNCS or not k_str.isdigit():
        raise ContractViolation(f"unknown objective metric {search_cfg.objective!r}")
    metric = _METRIC_FUNCS[family]
    k = int(k_str)

    view = store.scoring_view()
    conv_ids = view.conv_ids
    query_vectors = embed_texts([q.text for q in queries], backend, cache)
    active = [kind for kind in KIND_ORDER if kind in cfg.active_components]

    per_query_scores = []
    per_query_bm25 = []
    for query, vec in zip(queries, query_vectors):
        scores, _ = _component_score_table(view, vec, cfg)
        per_query_scores.append(np.vstack([scores[kind] for kind in active]))
        if cfg.bm25_weight > 0:
            bm25 = bm25_scores(query.text, store)
            per_query_bm25.append(
                cfg.bm25_weight * np.array([bm25[c] for c in conv_ids], dtype=np.float64)
            )
        else:
            per_query_bm25.append(None)

    order_keys = np.array(conv_ids)

    def evaluate(weight_vec: np.ndarray) -> float:
        total_metric = 0.0
        for query, table, bm25_term in zip(queries, per_query_scores, per_query_bm25):
            totals = weight_vec @ table
            if bm25_term is not None:
                totals = totals + bm25_term
            order = np.lexsort((order_keys, -totals))[:k]
            ranked = [conv_ids[i] for i in order]
            total_metric += metric(ranked, query.relevant_conv_ids, k)
        return total_metric / len(queries)

    rng = np.random.default_rng(search_cfg.seed)
    uniform = np.ones(len(active), dtype=np.float64)
    best_weights = uniform
    best_value = evaluate(uniform)
    low, high = search_cfg.weight_range
    for _ in range(search_cfg.sample_count):
        candidate = rng.uniform(low, high, size=len(active))
        value = evaluate(candidate)
        if value > best_value:
            best_value = value
            best_weights = candidate

    weights = {kind: float(w) for kind, w in zip(active, best_weights)}
    return WeightSearchResult(weights, best_value, search_cfg.sample_count + 1)


# ---------------------------------------------------------------------------
# Synthetic corpus with planted relevance
# ---------------------------------------------------------------------------

_SYLLABLES = (
    "bra", "cro", "dri", "fla", "gle", "kra", "lom", "mer", "nex", "pli",
    "quo", "ril", "sto", "tru", "vex", "wib", "yor", "zan", "dor", "fen",
)

# Topic utterances are deliberately long and filler-heavy: the utterance
# embedding dilutes while the rule-extracted quadruplet (repeated topic token
# as object, prepositional tail as adjunct) stays topic-dense. That is the
# asymmetry component scoring exploits.
_TOPIC_USER_TEMPLATES = (
    "I know the {f1} {f2} {f3} and {f4} but {a} helps so tell me about {a} and {b}.",
    "You know {f1} {f2} {f3} and {f4} but what about {a} {b} and {a}?",
    "Thanks for the {b} {a} and {b}.",
)

_TOPIC_ASSISTANT_TEMPLATES = (
    "Yes the {f1} {f2} and {f3} are okay but {a} matters and here is more about {a} and {c}.",
    "The {f1} {f2} {f3} and {f4} are here but you can have {b} with {b} and {c}.",
    "Okay the {f1} and {f2} are done but {c} is {c} with {a} here.",
)

# Off-topic small talk drawn from a vocabulary shared by every conversation;
# it dilutes the conversation-level embedding without discriminating topics.
_CHATTER_TEMPLATES = (
    "What about {x} and {y} today?",
    "I want {x} with {y} and {z}.",
    "{x} is okay for {y} and {z}.",
    "Tell me more about {x} and {z}.",
    "You can have {y} with {x} and {z}.",
    "Thanks for the {x} and the {z}.",
)

# Query templates deliberately share no vocabulary with the conversation
# templates: the planted topic token is the only lexical bridge between a
# query and its relevant conversations.
_QUERY_TEMPLATES = (
    "find conversations mentioning {t1} {t2}",
    "which chats discuss {t1} {t2}",
    "search dialogue covering {t1} {t2}",
)

_CHATTER_VOCAB_SIZE = 120


def _fresh_token(rng: random.Random, used: set[str]) -> str:
    while True:
        token = "".join(rng.choice(_SYLLABLES) for _ in range(rng.randint(2, 3)))
        if token not in used:
            used.add(token)
            return token


def generate_synthetic(
    seed: int,
    n_convs: int,
    n_queries: int,
    utterances_per_conv: int = 12,
    relevants_per_query: int = 15,
) -> tuple[list[ConversationRecord], list[QueryRecord]]:
    """Topic-templated corpus whose queries have planted relevant sets.

    Every topic owns a unique trio of synthetic vocabulary tokens that appear
    in exactly two utterances per relevant conversation and nowhere else; the
    remaining utterances are small talk over a shared vocabulary. A query
    targets two tokens of its topic's trio, and its relevant conversations are
    exactly the conversations of that topic, so the guarantee "relevant
    conversations contain the topic tokens, non-relevant ones do not" holds
    by construction.
    """
    if n_convs <= 0 or n_queries <= 0:
        raise ContractViolation("n_convs and n_queries must be positive")
    rng = random.Random(seed)
    n_topics = max(1, round(n_convs / relevants_per_query))

    used: set[str] = set()
    chatter_vocab = [_fresh_token(rng, used) for _ in range(_CHATTER_VOCAB_SIZE)]
    topics = [tuple(_fresh_token(rng, used) for _ in range(3)) for _ in range(n_topics)]

    topic_convs: dict[int, list[str]] = {t: [] for t in range(n_topics)}
    conversations: list[ConversationRecord] = []
    for i in range(n_convs):
        topic = i % n_topics
        a, b, c = topics[topic]
        conv_id = f"conv-{i:05d}"
        topic_convs[topic].append(conv_id)
        n_messages = max(2, utterances_per_conv + rng.choice((-1, 0, 1)))
        # one user and one assistant topic utterance per conversation; the
        # template pools jointly guarantee all three topic tokens appear
        on_topic = {
            rng.choice(range(0, n_messages, 2)),
            rng.choice(range(1, n_messages, 2)),
        }
        turns = []
        for m in range(n_messages):
            role = "user" if m % 2 == 0 else "assistant"
            if m in on_topic:
                pool = _TOPIC_USER_TEMPLATES if role == "user" else _TOPIC_ASSISTANT_TEMPLATES
                text = rng.choice(pool).format(
                    a=a, b=b, c=c,
                    f1=rng.choice(chatter_vocab),
                    f2=rng.choice(chatter_vocab),
                    f3=rng.choice(chatter_vocab),
                    f4=rng.choice(chatter_vocab),
                )
            else:
                text = rng.choice(_CHATTER_TEMPLATES).format(
                    x=rng.choice(chatter_vocab),
                    y=rng.choice(chatter_vocab),
                    z=rng.choice(chatter_vocab),
                )
            turns.append((role, text))
        conversations.append(ConversationRecord.from_texts(conv_id, turns))

    queries: list[QueryRecord] = []
    for j in range(n_queries):
        topic = j % n_topics
        template = rng.choice(_QUERY_TEMPLATES)
        trio = topics[topic]
        first = (j // n_topics) % 3
        queries.append(
            QueryRecord(
                f"q-{j:05d}",
                template.format(t1=trio[first], t2=trio[(first + 1) % 3]),
                frozenset(topic_convs[topic]),
            )
        )
    return conversations, queries
