from __future__ import annotations

import pytest
from fastapi.testclient import TestClient

from convsearch.config import AppConfig, EmbeddingSettings
from convsearch.embedding import HashedEmbeddingBackend, embed_texts
from convsearch.extraction import ExtractionConfig, MockChatBackend
from convsearch.index import ingest_corpus, persist
from convsearch.core import ConversationRecord
from convsearch.retrieval import ScoringConfig, rank_conversations
from convsearch.server import create_app
from convsearch.service import breakdown_to_dict, execute_query


DIM = 64


def small_store():
    convs = [
        ConversationRecord.from_texts("c-solar", [("user", "Tell me about solar panels please.")]),
        ConversationRecord.from_texts("c-movie", [("user", "What movies do you like?")]),
        ConversationRecord.from_texts("c-thanks", [("user", "Thanks!")]),
    ]
    return ingest_corpus(convs, ExtractionConfig(), MockChatBackend(), HashedEmbeddingBackend(DIM))


def make_client(store=None) -> TestClient:
    config = AppConfig(embedding=EmbeddingSettings(kind="hashed", dimension=DIM))
    app = create_app(store=store if store is not None else small_store(), config=config)
    return TestClient(app)


def test_healthz() -> None:
    client = make_client()
    response = client.get("/healthz")
    assert response.status_code == 200
    assert response.json() == {"status": "ok"}


def test_query_round_trip_matches_cli_path() -> None:
    store = small_store()
    client = make_client(store)
    response = client.post("/query", json={"text": "solar panels", "top_k": 3})
    assert response.status_code == 200
    results = response.json()["results"]
    assert results[0]["conv_id"] == "c-solar"

    backend = HashedEmbeddingBackend(DIM)
    direct = execute_query(store, backend, "solar panels", 3, ScoringConfig())
    assert [breakdown_to_dict(b) for b in direct] == results


def test_query_returns_best_svoa_text() -> None:
    client = make_client()
    response = client.post("/query", json={"text": "solar panels", "top_k": 1})
    hit = response.json()["results"][0]
    assert hit["best_svoa"] == "user mentions solar about solar panels please"


def test_query_unknown_combination_is_400_listing_names() -> None:
    client = make_client()
    response = client.post("/query", json={"text": "x", "combination": "bogus"})
    assert response.status_code == 400
    assert "sv_svo_svoa_conv_msg" in response.json()["detail"]


def test_query_malformed_body_is_400() -> None:
    client = make_client()
    response = client.post("/query", json={"top_k": "not-a-number"})
    assert response.status_code == 400


def test_query_with_weights_and_bm25() -> None:
    client = make_client()
    response = client.post(
        "/query",
        json={
            "text": "solar panels",
            "top_k": 2,
            "weights": {"svoa": 2.0, "conversation": 0.5},
            "bm25_weight": 0.3,
        },
    )
    assert response.status_code == 200
    assert response.json()["results"][0]["bm25_score"] is not None


def test_get_conversation_and_404() -> None:
    client = make_client()
    ok = client.get("/conversations/c-solar")
    assert ok.status_code == 200
    body = ok.json()
    assert body["messages"][0]["text"] == "Tell me about solar panels please."
    assert body["quadruplets"][0]["ref"].startswith("c-solar#")
    missing = client.get("/conversations/ghost")
    assert missing.status_code == 404


def test_stats_endpoint() -> None:
    client = make_client()
    response = client.get("/stats")
    assert response.status_code == 200
    body = response.json()
    assert body["conversation_count"] == 3
    assert body["instance_counts"]["conversation"] == 3


def test_stats_empty_store() -> None:
    from convsearch.index import IndexManifest, SemanticIndexStore

    client = make_client(SemanticIndexStore(IndexManifest("m", DIM, "two-step")))
    body = client.get("/stats").json()
    assert body["conversation_count"] == 0
    assert all(v == 0 for v in body["instance_counts"].values())


def test_remove_index_then_query_drops_best_text() -> None:
    store = small_store()
    client = make_client(store)
    ref = next(iter(store.entries["c-solar"].quadruplets))

    before = client.post("/query", json={"text": "solar panels", "top_k": 1}).json()
    assert before["results"][0]["best_svoa"] is not None

    removed = client.post("/indices/remove", json={"quadruplet_ref": ref})
    assert removed.status_code == 200

    after = client.post("/query", json={"text": "solar panels", "top_k": 3}).json()
    for hit in after["results"]:
        for text in hit["best_texts"].values():
            if text is not None:
                assert "solar about solar panels" not in text


def test_remove_unknown_ref_is_404() -> None:
    client = make_client()
    response = client.post("/indices/remove", json={"quadruplet_ref": "ghost#q9"})
    assert response.status_code == 404


def test_503_while_reloading() -> None:
    config = AppConfig(embedding=EmbeddingSettings(kind="hashed", dimension=DIM))
    app = create_app(store=None, config=config)  # no index loaded yet
    client = TestClient(app)
    assert client.post("/query", json={"text": "x"}).status_code == 503
    assert client.get("/stats").status_code == 503


def test_create_app_from_index_file(tmp_path) -> None:
    store = small_store()
    path = tmp_path / "idx.ldj"
    persist(store, path)
    config = AppConfig(embedding=EmbeddingSettings(kind="hashed", dimension=DIM))
    client = TestClient(create_app(index_path=path, config=config))
    assert client.get("/stats").json()["conversation_count"] == 3
