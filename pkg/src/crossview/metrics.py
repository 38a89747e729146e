"""Retrieval metrics: recall@K and (mean) average precision.

Ranking is by descending similarity with ties broken toward the lower gallery
index, which keeps every metric reproducible and lets tests compare against a
brute-force oracle exactly.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError


def rank_gallery(scores: np.ndarray) -> np.ndarray:
    """Gallery indices sorted by descending score, ties to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.argsort(-scores, axis=-1, kind="stable")


def _as_bool_matrix(relevant, num_queries: int, num_gallery: int) -> np.ndarray:
    rel = np.asarray(relevant)
    if rel.shape != (num_queries, num_gallery):
        raise ShapeError(
            f"relevance must be [{num_queries},{num_gallery}], got {rel.shape}"
        )
    return rel.astype(bool)


def recall_at_k(scores: np.ndarray, relevant, k: int) -> float:
    """Fraction of queries with >=1 relevant gallery item in the top k."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ShapeError(f"scores must be [Q,G], got {scores.shape}")
    q, g = scores.shape
    if k < 1 or k > g:
        raise ConfigError(f"k must be in [1, {g}], got {k}")
    rel = _as_bool_matrix(relevant, q, g)
    if not rel.any(axis=1).all():
        raise ConfigError("every query needs at least one relevant gallery item")
    order = rank_gallery(scores)
    top = np.take_along_axis(rel, order[:, :k], axis=1)
    return float(top.any(axis=1).mean())


def average_precision(flags) -> float:
    """AP of one ranked relevance list: mean of precision@rank over relevant ranks."""
    flags = np.asarray(flags, dtype=bool)
    if flags.ndim != 1:
        raise ShapeError(f"flags must be 1-d, got shape {flags.shape}")
    n_rel = int(flags.sum())
    if n_rel == 0:
        raise ConfigError("average precision is undefined without a relevant item")
    ranks = np.nonzero(flags)[0] + 1
    hits = np.arange(1, n_rel + 1)
    return float((hits / ranks).mean())


def mean_average_precision(scores: np.ndarray, relevant) -> float:
    """AP averaged over queries, ranking each row of a [Q,G] score matrix."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ShapeError(f"scores must be [Q,G], got {scores.shape}")
    q, g = scores.shape
    rel = _as_bool_matrix(relevant, q, g)
    order = rank_gallery(scores)
    ranked = np.take_along_axis(rel, order, axis=1)
    return float(np.mean([average_precision(row) for row in ranked]))


def relevance_from_ids(query_ids, gallery_ids) -> np.ndarray:
    """Boolean [Q,G] matrix: gallery item relevant iff it shares the query's id."""
    q = np.asarray(query_ids).reshape(-1, 1)
    g = np.asarray(gallery_ids).reshape(1, -1)
    return q == g
