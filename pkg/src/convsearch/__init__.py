"""convsearch: conversational-data retrieval with semantic component indexing."""

from .core import (
    ComponentInstance,
    ComponentKind,
    ContractViolation,
    ConversationRecord,
    Message,
    SvoaQuadruplet,
    cosine_similarity,
    l2_normalize,
    render_component_text,
    render_conversation_text,
)
from .embedding import (
    EmbeddingBackendError,
    EmbeddingCache,
    HashedEmbeddingBackend,
    HttpEmbeddingBackend,
    embed_texts,
    hashed_embed,
)
from .extraction import (
    ExtractionConfig,
    ExtractionMode,
    ExtractionWarning,
    HttpChatBackend,
    MockChatBackend,
    ScriptedChatBackend,
    augment_adjuncts,
    build_context_window,
    extract_conversation,
    extract_single_step,
    extract_triplets,
    mock_extract,
)
from .index import (
    ConversationEntry,
    IndexFileError,
    IndexManifest,
    SemanticIndexStore,
    ingest_conversation,
    ingest_corpus,
    load,
    persist,
    structurally_equal,
)
from .retrieval import (
    Aggregation,
    COMBINATIONS,
    ScoreBreakdown,
    ScoringConfig,
    UnknownCombinationError,
    bm25_scores,
    ensemble_rank,
    ensemble_score,
    rank_conversations,
    resolve_combination,
    score_conversation,
)
from .evaluation import (
    MetricsReport,
    QueryRecord,
    WeightSearchConfig,
    WeightSearchResult,
    acc_at_k,
    generate_synthetic,
    load_corpus,
    load_queries,
    map_at_k,
    mrr_at_k,
    ndcg_at_k,
    optimize_weights,
    p_at_k,
    r_at_k,
    run_benchmark,
    write_corpus,
    write_queries,
)
from .analysis import ClusterReport, cluster_components, representatives
from .config import AppConfig

__version__ = "0.1.0"
