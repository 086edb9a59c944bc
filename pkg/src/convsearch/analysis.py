"""Intent and topic clustering over semantic-index embeddings.

SV instances group by speaker intent ("asks", "declines", ...), SVO/SVOA
instances by conversation topic. Vectors are unit-normalized and clustered
with plain k-means under Euclidean distance, which on the unit sphere orders
pairs exactly like cosine distance (``|u-v|^2 = 2 - 2*cos``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ComponentKind, ContractViolation, QUADRUPLET_KINDS
from .index import SemanticIndexStore

DEFAULT_INTENT_CLUSTERS = 15
MAX_ITERATIONS = 100


@dataclass
class ClusterReport:
    kind: ComponentKind
    k: int
    centroids: np.ndarray  # (k, dim)
    labels: np.ndarray  # (n,)
    texts: list[str]
    distances: np.ndarray  # (n,) squared distance to own centroid
    wcss_history: list[float]
    iterations: int

    @property
    def member_counts(self) -> list[int]:
        return [int(np.sum(self.labels == c)) for c in range(self.k)]

    def to_dict(self, representative_count: int = 5) -> dict:
        return {
            "kind": self.kind.value,
            "k": self.k,
            "iterations": self.iterations,
            "clusters": [
                {
                    "cluster_id": c,
                    "member_count": self.member_counts[c],
                    "representatives": representatives(self, c, representative_count),
                }
                for c in range(self.k)
            ],
        }

    def table(self) -> str:
        lines = [f"{'cluster':>8}  {'members':>8}  representatives"]
        for c in range(self.k):
            reps = ", ".join(representatives(self, c, 5))
            lines.append(f"{c:>8}  {self.member_counts[c]:>8}  {reps}")
        return "\n".join(lines)


def _normalize_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return matrix / safe


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    first = int(rng.integers(n))
    centers = [points[first]]
    d2 = np.sum((points - points[first]) ** 2, axis=1)
    for _ in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(points[idx])
        d2 = np.minimum(d2, np.sum((points - points[idx]) ** 2, axis=1))
    return np.stack(centers)


def _squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # (n, k) matrix of |x - c|^2 via direct subtraction; exact enough that the
    # per-iteration objective stays monotonically non-increasing.
    diffs = points[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diffs, diffs)


def kmeans(
    points: np.ndarray, k: int, seed: int, max_iterations: int = MAX_ITERATIONS
) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[float], int]:
    """Seeded k-means++ with Lloyd iterations on already-normalized points.

    Returns (centroids, labels, squared distances to own centroid, per
    iteration within-cluster sum of squares, iteration count). Converges when
    assignments stop changing or the iteration cap is hit. Empty clusters are
    re-seeded at the point currently farthest from its centroid.
    """
    n = points.shape[0]
    if k < 1 or k > n:
        raise ContractViolation(f"k must be in 1..{n}, got {k}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(points, k, rng)

    labels = np.full(n, -1, dtype=np.int64)
    wcss_history: list[float] = []
    iterations = 0
    for _ in range(max_iterations):
        iterations += 1
        d2 = _squared_distances(points, centers)
        new_labels = np.argmin(d2, axis=1)
        own = d2[np.arange(n), new_labels]

        for cluster in range(k):
            if not np.any(new_labels == cluster):
                farthest = int(np.argmax(own))
                centers[cluster] = points[farthest]
                d2[:, cluster] = np.sum((points - points[farthest]) ** 2, axis=1)
                new_labels = np.argmin(d2, axis=1)
                own = d2[np.arange(n), new_labels]

        wcss_history.append(float(own.sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for cluster in range(k):
            members = points[labels == cluster]
            if members.shape[0] > 0:
                centers[cluster] = members.mean(axis=0)

    d2 = _squared_distances(points, centers)
    distances = d2[np.arange(n), labels]
    return centers, labels, distances, wcss_history, iterations


def cluster_components(
    store: SemanticIndexStore,
    kind: ComponentKind,
    k: int = DEFAULT_INTENT_CLUSTERS,
    seed: int = 0,
    max_iterations: int = MAX_ITERATIONS,
) -> ClusterReport:
    """Cluster every instance of one quadruplet-derived kind across the store."""
    if kind not in QUADRUPLET_KINDS:
        raise ContractViolation(f"clustering expects sv/svo/svoa, got {kind.value}")
    texts: list[str] = []
    rows = []
    for entry in store.entries.values():
        for inst in entry.instances.get(kind, []):
            texts.append(inst.text)
            rows.append(inst.embedding)
    distinct = len(set(texts))
    if distinct < k:
        raise ContractViolation(
            f"need at least k={k} distinct {kind.value} instances, found {distinct}"
        )
    points = _normalize_rows(np.vstack(rows))
    centers, labels, distances, wcss_history, iterations = kmeans(
        points, k, seed, max_iterations
    )
    return ClusterReport(kind, k, centers, labels, texts, distances, wcss_history, iterations)


def representatives(report: ClusterReport, cluster_id: int, count: int = 5) -> list[str]:
    """The member texts nearest the centroid, deduplicated, at most ``count``."""
    if not 0 <= cluster_id < report.k:
        raise ContractViolation(f"cluster_id must be in 0..{report.k - 1}")
    member_indices = np.flatnonzero(report.labels == cluster_id)
    ordered = member_indices[np.argsort(report.distances[member_indices], kind="stable")]
    seen: set[str] = set()
    result: list[str] = []
    for idx in ordered:
        text = report.texts[int(idx)]
        if text in seen:
            continue
        seen.add(text)
        result.append(text)
        if len(result) >= count:
            break
    return result
