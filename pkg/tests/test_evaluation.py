from __future__ import annotations

import math

import numpy as np
import pytest

from convsearch.core import ComponentKind, ContractViolation
from convsearch.embedding import HashedEmbeddingBackend
from convsearch.evaluation import (
    REPORT_COLUMNS,
    CorpusFormatError,
    MetricsReport,
    QueryRecord,
    REFERENCE_BASELINE,
    WeightSearchConfig,
    acc_at_k,
    generate_synthetic,
    load_corpus,
    load_queries,
    map_at_k,
    mrr_at_k,
    ndcg_at_k,
    optimize_weights,
    p_at_k,
    query_metrics,
    r_at_k,
    run_benchmark,
    write_corpus,
    write_queries,
)
from convsearch.extraction import ExtractionConfig, MockChatBackend
from convsearch.index import ingest_corpus
from convsearch.retrieval import ScoringConfig

from conftest import make_store
from oracles import oracle_metrics

K = ComponentKind


# ---------------------------------------------------------------------------
# metric pins
# ---------------------------------------------------------------------------

def test_ndcg_perfect_single_relevant() -> None:
    assert ndcg_at_k(["a", "b", "c"], {"a"}, 5) == 1.0


def test_ndcg_rank2_single_relevant() -> None:
    expected = 1.0 / math.log2(3)  # ~0.6309
    assert ndcg_at_k(["x", "a", "y"], {"a"}, 5) == pytest.approx(expected, abs=1e-12)
    assert ndcg_at_k(["x", "a", "y"], {"a"}, 5) == pytest.approx(0.6309, abs=1e-4)


def test_ndcg_no_relevant_in_top_k() -> None:
    assert ndcg_at_k(["x", "y", "z"], {"a"}, 3) == 0.0


def test_acc_at_5_over_three_queries() -> None:
    # first-relevant ranks 1, 3, 11 => hits within 5: two of three
    rankings = [
        ["a"] + [f"x{i}" for i in range(10)],
        ["x0", "x1", "a"] + [f"y{i}" for i in range(8)],
        [f"z{i}" for i in range(10)] + ["a"],
    ]
    values = [acc_at_k(r, {"a"}, 5) for r in rankings]
    assert sum(values) / 3 == pytest.approx(2 / 3, abs=1e-12)


def test_p_and_r_at_5() -> None:
    ranked = ["r1", "x", "r2", "y", "z"]
    relevant = {"r1", "r2", "r3", "r4"}
    assert p_at_k(ranked, relevant, 5) == pytest.approx(0.4, abs=1e-12)
    assert r_at_k(ranked, relevant, 5) == pytest.approx(0.5, abs=1e-12)


def test_mrr_at_k() -> None:
    assert mrr_at_k(["x", "a"], {"a"}, 5) == 0.5
    assert mrr_at_k(["x", "y"], {"a"}, 2) == 0.0
    assert mrr_at_k(["x", "y", "a"], {"a"}, 2) == 0.0  # outside the cutoff


def test_map_perfect_ranking_is_one() -> None:
    assert map_at_k(["a", "b", "c"], {"a", "b", "c"}, 5) == pytest.approx(1.0, abs=1e-12)
    assert map_at_k(["a", "b", "c", "x"], {"a", "b", "c"}, 3) == pytest.approx(1.0, abs=1e-12)


def test_acc1_equals_p1() -> None:
    for ranked, relevant in [(["a", "b"], {"a"}), (["b", "a"], {"a"}), (["b"], {"a"})]:
        assert acc_at_k(ranked, relevant, 1) == p_at_k(ranked, relevant, 1)


def test_metrics_randomized_against_oracle() -> None:
    rng = np.random.default_rng(77)
    for _ in range(100):
        n = int(rng.integers(1, 30))
        universe = [f"d{i}" for i in range(n)]
        ranked = list(rng.permutation(universe))
        n_rel = int(rng.integers(1, n + 1))
        relevant = set(rng.choice(universe, size=n_rel, replace=False))
        k = int(rng.integers(1, 25))
        expected = oracle_metrics(ranked, relevant, k)
        assert acc_at_k(ranked, relevant, k) == pytest.approx(expected["acc"], abs=1e-9)
        assert p_at_k(ranked, relevant, k) == pytest.approx(expected["p"], abs=1e-9)
        assert r_at_k(ranked, relevant, k) == pytest.approx(expected["r"], abs=1e-9)
        assert mrr_at_k(ranked, relevant, k) == pytest.approx(expected["mrr"], abs=1e-9)
        assert ndcg_at_k(ranked, relevant, k) == pytest.approx(expected["ndcg"], abs=1e-9)
        assert map_at_k(ranked, relevant, k) == pytest.approx(expected["map"], abs=1e-9)


def test_all_metrics_in_unit_interval() -> None:
    rng = np.random.default_rng(5)
    for _ in range(50):
        n = int(rng.integers(1, 15))
        ranked = [f"d{i}" for i in range(n)]
        relevant = {f"d{i}" for i in rng.choice(n, size=max(1, n // 2), replace=False)}
        for name, value in query_metrics(ranked, relevant).items():
            assert 0.0 <= value <= 1.0, name


# ---------------------------------------------------------------------------
# loaders
# ---------------------------------------------------------------------------

def test_load_corpus_single_line(tmp_path) -> None:
    path = tmp_path / "corpus.jsonl"
    path.write_text('{"conv_id":"c1","messages":[{"role":"user","text":"hi"}]}\n')
    records = load_corpus(path)
    assert len(records) == 1
    assert records[0].conv_id == "c1"


def test_load_corpus_rejects_duplicates(tmp_path) -> None:
    path = tmp_path / "corpus.jsonl"
    line = '{"conv_id":"c1","messages":[{"role":"user","text":"hi"}]}\n'
    path.write_text(line + line)
    with pytest.raises(CorpusFormatError, match=":2:"):
        load_corpus(path)


def test_load_corpus_schema_error_names_line(tmp_path) -> None:
    path = tmp_path / "corpus.jsonl"
    path.write_text(
        '{"conv_id":"c1","messages":[{"role":"user","text":"hi"}]}\n'
        '{"conv_id":"c2","messages":[]}\n'
    )
    with pytest.raises(CorpusFormatError, match=":2:"):
        load_corpus(path)


def test_load_queries_referential_check(tmp_path) -> None:
    path = tmp_path / "queries.jsonl"
    path.write_text('{"query_id":"q1","text":"hi","relevant_conv_ids":["ghost"]}\n')
    with pytest.raises(CorpusFormatError, match="ghost"):
        load_queries(path, known_conv_ids={"c1"})
    # without a known set the reference is accepted
    assert len(load_queries(path)) == 1


def test_load_queries_rejects_duplicates(tmp_path) -> None:
    path = tmp_path / "queries.jsonl"
    line = '{"query_id":"q1","text":"hi","relevant_conv_ids":["c1"]}\n'
    path.write_text(line + line)
    with pytest.raises(CorpusFormatError, match="duplicate"):
        load_queries(path)


def test_table_scale_synthetic_files_load(tmp_path) -> None:
    convs, queries = generate_synthetic(seed=3, n_convs=4035, n_queries=3501)
    corpus_path, query_path = tmp_path / "c.jsonl", tmp_path / "q.jsonl"
    write_corpus(convs, corpus_path)
    write_queries(queries, query_path)
    loaded_convs = load_corpus(corpus_path)
    loaded_queries = load_queries(query_path, {c.conv_id for c in loaded_convs})
    assert len(loaded_convs) == 4035
    assert len(loaded_queries) == 3501


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

def small_benchmark_setup():
    convs, queries = generate_synthetic(seed=13, n_convs=60, n_queries=12)
    backend = HashedEmbeddingBackend(128)
    store = ingest_corpus(convs, ExtractionConfig(), MockChatBackend(), backend)
    return store, queries, backend


def test_single_conversation_corpus_all_metrics_one() -> None:
    convs, _ = generate_synthetic(seed=1, n_convs=1, n_queries=1, relevants_per_query=1)
    backend = HashedEmbeddingBackend(64)
    store = ingest_corpus(convs, ExtractionConfig(), MockChatBackend(), backend)
    queries = [QueryRecord("q1", "anything at all", frozenset({convs[0].conv_id}))]
    report = run_benchmark(store, queries, ScoringConfig(), backend)
    for k in (1,):
        assert report.metrics[f"acc@{k}"] == 1.0
        assert report.metrics[f"ndcg@{k}"] == 1.0
        assert report.metrics[f"mrr@{k}"] == 1.0


def test_benchmark_deterministic() -> None:
    store, queries, backend = small_benchmark_setup()
    r1 = run_benchmark(store, queries, ScoringConfig(), backend)
    r2 = run_benchmark(store, queries, ScoringConfig(), backend)
    assert r1.metrics == r2.metrics
    assert r1.query_count == len(queries)


def test_benchmark_validates_queries_against_store() -> None:
    store, queries, backend = small_benchmark_setup()
    bad = [QueryRecord("qx", "text", frozenset({"missing-conv"}))]
    with pytest.raises(ContractViolation, match="missing-conv"):
        run_benchmark(store, bad, ScoringConfig(), backend)


def test_benchmark_report_surface() -> None:
    store, queries, backend = small_benchmark_setup()
    report = run_benchmark(store, queries, ScoringConfig(), backend)
    assert report.metrics["acc@1"] == report.metrics["p@1"]
    assert report.mean_scoring_seconds >= 0.0
    table = report.table()
    for column in REPORT_COLUMNS:
        assert column in table
    assert "0.4085" in table and "0.3198" in table  # reference footer, not asserted
    payload = report.to_dict()
    assert payload["reference_baseline"] == REFERENCE_BASELINE


def test_benchmark_ensemble_of_identical_stores_matches_single() -> None:
    store, queries, backend = small_benchmark_setup()
    single = run_benchmark(store, queries, ScoringConfig(), backend)
    paired = run_benchmark(
        {"a": store, "b": store}, queries, ScoringConfig(), {"a": backend, "b": backend}
    )
    assert single.metrics == paired.metrics


# ---------------------------------------------------------------------------
# weight search
# ---------------------------------------------------------------------------

def test_optimize_zero_samples_returns_uniform() -> None:
    store, queries, backend = small_benchmark_setup()
    result = optimize_weights(
        store, queries, WeightSearchConfig(sample_count=0), backend=backend
    )
    assert set(result.weights.values()) == {1.0}
    assert result.evaluated == 1


def test_optimize_objective_never_below_uniform() -> None:
    store, queries, backend = small_benchmark_setup()
    uniform = optimize_weights(
        store, queries, WeightSearchConfig(sample_count=0), backend=backend
    )
    for seed in (0, 1, 2):
        searched = optimize_weights(
            store, queries, WeightSearchConfig(sample_count=24, seed=seed), backend=backend
        )
        assert searched.objective_value >= uniform.objective_value


def test_optimize_deterministic_per_seed() -> None:
    store, queries, backend = small_benchmark_setup()
    cfg = WeightSearchConfig(sample_count=16, seed=99)
    a = optimize_weights(store, queries, cfg, backend=backend)
    b = optimize_weights(store, queries, cfg, backend=backend)
    assert a.weights == b.weights
    assert a.objective_value == b.objective_value


def test_optimize_rejects_empty_validation_set() -> None:
    store, _, backend = small_benchmark_setup()
    with pytest.raises(ContractViolation):
        optimize_weights(store, [], WeightSearchConfig(), backend=backend)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

def test_generator_deterministic_files(tmp_path) -> None:
    for name in ("a", "b"):
        convs, queries = generate_synthetic(seed=21, n_convs=40, n_queries=10)
        write_corpus(convs, tmp_path / f"{name}_corpus.jsonl")
        write_queries(queries, tmp_path / f"{name}_queries.jsonl")
    assert (tmp_path / "a_corpus.jsonl").read_bytes() == (tmp_path / "b_corpus.jsonl").read_bytes()
    assert (tmp_path / "a_queries.jsonl").read_bytes() == (tmp_path / "b_queries.jsonl").read_bytes()


def test_generator_stats_match_requested_means() -> None:
    convs, queries = generate_synthetic(
        seed=8, n_convs=300, n_queries=60, utterances_per_conv=12, relevants_per_query=15
    )
    mean_utts = sum(len(c.messages) for c in convs) / len(convs)
    mean_mapped = sum(len(q.relevant_conv_ids) for q in queries) / len(queries)
    assert round(mean_utts) == 12
    assert round(mean_mapped) == 15


_QUERY_TEMPLATE_WORDS = {
    "find", "conversations", "mentioning", "which", "chats", "discuss",
    "search", "dialogue", "covering",
}


def test_generator_topic_token_guarantee() -> None:
    from convsearch.core import tokenize

    convs, queries = generate_synthetic(seed=4, n_convs=90, n_queries=18)
    tokens_by_conv = {
        c.conv_id: {t for m in c.messages for t in tokenize(m.text)} for c in convs
    }
    for query in queries:
        topic_tokens = set(tokenize(query.text)) - _QUERY_TEMPLATE_WORDS
        assert topic_tokens, query.text
        for conv_id, tokens in tokens_by_conv.items():
            if conv_id in query.relevant_conv_ids:
                assert topic_tokens <= tokens, (query.query_id, conv_id)
            else:
                assert not (topic_tokens & tokens), (query.query_id, conv_id)


def test_generator_relevant_set_beats_disjoint_conversations() -> None:
    # wide hashed dimension keeps feature-hash bucket collisions from
    # bridging the query to topic-disjoint conversations
    convs, queries = generate_synthetic(seed=6, n_convs=45, n_queries=9)
    backend = HashedEmbeddingBackend(1024)
    store = ingest_corpus(convs, ExtractionConfig(), MockChatBackend(), backend)
    from convsearch.embedding import embed_texts
    from convsearch.retrieval import rank_conversations

    query = queries[0]
    qvec = embed_texts([query.text], backend)[0]
    ranked = rank_conversations(qvec, store, ScoringConfig(), top_k=len(store))
    totals = {b.conv_id: b.total for b in ranked}
    worst_relevant = min(totals[c] for c in query.relevant_conv_ids)
    best_disjoint = max(
        total for conv_id, total in totals.items() if conv_id not in query.relevant_conv_ids
    )
    assert worst_relevant > best_disjoint


def test_generator_rejects_bad_sizes() -> None:
    with pytest.raises(ContractViolation):
        generate_synthetic(seed=0, n_convs=0, n_queries=1)
