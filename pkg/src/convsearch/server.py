"""Read-mostly HTTP retrieval service over a loaded index.

Queries run concurrently against an immutable scoring view; index removal is
the one write path and serializes behind a lock. While an index (re)load is
in flight the service answers 503.
"""

from __future__ import annotations

import threading
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .config import AppConfig
from .core import ContractViolation
from .embedding import EmbeddingCache
from .index import SemanticIndexStore, load as load_index
from .retrieval import UnknownCombinationError
from .service import breakdown_to_dict, build_scoring_config, execute_query


class QueryRequest(BaseModel):
    text: str
    top_k: int = Field(default=10, ge=1)
    combination: str = "sv_svo_svoa_conv_msg"
    weights: Optional[dict[str, float]] = None
    bm25_weight: float = Field(default=0.0, ge=0.0)


class RemoveRequest(BaseModel):
    quadruplet_ref: str


class ServiceState:
    def __init__(self, config: AppConfig) -> None:
        self.config = config
        self.backend = config.build_embedding_backend()
        self.cache = EmbeddingCache(config.paths.cache) if config.paths.cache else None
        self.store: Optional[SemanticIndexStore] = None
        self.write_lock = threading.Lock()

    def reload(self, index_path: str | Path) -> None:
        self.store = None
        self.store = load_index(index_path)

    def require_store(self) -> SemanticIndexStore:
        store = self.store
        if store is None:
            raise HTTPException(status_code=503, detail="index is reloading")
        return store


def create_app(
    index_path: Optional[str | Path] = None,
    config: Optional[AppConfig] = None,
    store: Optional[SemanticIndexStore] = None,
) -> FastAPI:
    state = ServiceState(config or AppConfig())
    if store is not None:
        state.store = store
    elif index_path is not None:
        state.reload(index_path)

    app = FastAPI(title="convsearch")
    app.state.service = state

    @app.exception_handler(RequestValidationError)
    async def malformed_request(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": exc.errors()})

    @app.get("/healthz")
    def healthz() -> dict:
        return {"status": "ok"}

    @app.post("/query")
    def query(body: QueryRequest) -> dict:
        current = state.require_store()
        try:
            cfg = build_scoring_config(body.combination, body.weights, body.bm25_weight)
            results = execute_query(
                current, state.backend, body.text, body.top_k, cfg, state.cache
            )
        except (UnknownCombinationError, ContractViolation, ValueError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        return {"results": [breakdown_to_dict(b) for b in results]}

    @app.get("/conversations/{conv_id}")
    def conversation(conv_id: str) -> dict:
        current = state.require_store()
        try:
            entry = current.get(conv_id)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown conversation {conv_id!r}")
        return {
            "conv_id": conv_id,
            "messages": [
                {"index": m.index, "role": m.role, "text": m.text}
                for m in entry.record.messages
            ],
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
        }

    @app.get("/stats")
    def stats() -> dict:
        current = state.require_store()
        s = current.stats()
        return {
            "conversation_count": s.conversation_count,
            "instance_counts": s.instance_counts,
            "warning_count": s.warning_count,
        }

    @app.post("/indices/remove")
    def remove(body: RemoveRequest) -> dict:
        current = state.require_store()
        with state.write_lock:
            try:
                current.remove_index(body.quadruplet_ref)
            except KeyError as exc:
                raise HTTPException(status_code=404, detail=str(exc)) from exc
        return {"removed": body.quadruplet_ref}

    return app
