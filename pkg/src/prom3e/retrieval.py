"""Hybrid cross-modal retrieval and recall@k."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams, VisibleSet, forward
from .synthdata import Dataset

DELTA_GRID = tuple(round(0.05 * i, 2) for i in range(21))


@dataclass
class RetrievalConfig:
    query_modality: int
    target_modality: int
    delta: float = 0.0
    k_list: tuple[int, ...] = (1, 5, 10)

    def __post_init__(self):
        if self.query_modality == self.target_modality:
            raise ValueError("query and target modality must differ")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")


@dataclass
class RetrievalResult:
    recall: dict[int, float]
    ranks: np.ndarray  # 1-based rank of the true target per query
    delta: float
    gallery_size: int
    extra: dict = field(default_factory=dict)


def hybrid_query(f_q: np.ndarray, f_hat_t: np.ndarray, delta: float) -> np.ndarray:
    """Convex mix ``(1 - delta) * f_q + delta * f_hat_t`` (rows or single vectors)."""
    f_q, f_hat_t = np.asarray(f_q, dtype=np.float64), np.asarray(f_hat_t, dtype=np.float64)
    if f_q.shape != f_hat_t.shape:
        raise ValueError(f"hybrid_query: dims differ {f_q.shape} vs {f_hat_t.shape}")
    if delta == 0.0:
        return f_q.copy()
    if delta == 1.0:
        return f_hat_t.copy()
    return (1.0 - delta) * f_q + delta * f_hat_t


def _cosine_scores(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(queries, axis=-1, keepdims=True)
    # a zero query scores 0 everywhere, so ties fall back to index order
    return (queries / np.where(norms > 0, norms, 1.0)) @ gallery.T


def rank_gallery(query_vec: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Gallery indices by descending cosine similarity, ties by ascending index."""
    gallery = np.asarray(gallery, dtype=np.float64)
    if gallery.shape[0] == 0:
        raise ValueError("empty gallery")
    scores = _cosine_scores(np.asarray(query_vec, dtype=np.float64)[None, :], gallery)[0]
    return np.lexsort((np.arange(len(scores)), -scores))


def true_ranks(queries: np.ndarray, gallery: np.ndarray, truth: np.ndarray | None = None) -> np.ndarray:
    """1-based rank of ``gallery[truth[i]]`` for each query row (default truth = i).

    Equivalent to sorting each row with :func:`rank_gallery`: the rank is one
    plus the number of items scoring strictly higher, plus tied items with a
    lower index.
    """
    if len(gallery) == 0:
        raise ValueError("empty gallery")
    truth = np.arange(len(queries)) if truth is None else np.asarray(truth)
    scores = _cosine_scores(np.asarray(queries, dtype=np.float64), np.asarray(gallery, dtype=np.float64))
    own = scores[np.arange(len(queries)), truth][:, None]
    idx = np.arange(scores.shape[1])[None, :]
    better = (scores > own) | ((scores == own) & (idx < truth[:, None]))
    return 1 + better.sum(axis=1)


def recall_at_k(ranks: np.ndarray, k: int) -> float:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ranks = np.asarray(ranks)
    return float(np.mean(ranks <= k))


def reconstruct(params: ModelParams, ds: Dataset, query: int, target: int, batch_size: int = 512) -> np.ndarray:
    """Mean (epsilon = 0) reconstruction of ``target`` from ``query`` alone."""
    vs = VisibleSet((query,), (target,))
    out = []
    for s in range(0, len(ds), batch_size):
        embs = [e[s : s + batch_size] for e in ds.embeddings]
        out.append(forward(params, embs, vs, rng=None).reconstructions[target].data)
    return np.concatenate(out, axis=0)


def evaluate_retrieval(params: ModelParams, ds: Dataset, config: RetrievalConfig) -> RetrievalResult:
    """Queries are ``ds``'s query-modality rows; the gallery is its target-modality rows."""
    f_q = ds.embeddings[config.query_modality]
    gallery = ds.embeddings[config.target_modality]
    f_hat = reconstruct(params, ds, config.query_modality, config.target_modality) if config.delta > 0 else f_q
    queries = hybrid_query(f_q, f_hat, config.delta) if config.delta > 0 else f_q
    ranks = true_ranks(queries, gallery)
    return RetrievalResult({k: recall_at_k(ranks, k) for k in config.k_list}, ranks, config.delta, len(gallery))


def tune_delta(params: ModelParams, val: Dataset, config: RetrievalConfig, grid=DELTA_GRID) -> tuple[float, dict[float, tuple[float, float]]]:
    """Grid-search delta on ``val``: best R@1, then R@5, then the smaller delta."""
    if len(val) == 0:
        raise ValueError("empty validation set")
    f_q = val.embeddings[config.query_modality]
    gallery = val.embeddings[config.target_modality]
    f_hat = reconstruct(params, val, config.query_modality, config.target_modality)
    table = {}
    for delta in grid:
        ranks = true_ranks(hybrid_query(f_q, f_hat, delta), gallery)
        table[delta] = (recall_at_k(ranks, 1), recall_at_k(ranks, 5))
    best = min(grid, key=lambda d: (-table[d][0], -table[d][1], d))
    return best, table
