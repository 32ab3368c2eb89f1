"""Refine query predictions by propagating confident scores over a k-NN
RBF graph.

Pipeline: keep only the top fraction of scores per class column, build a
k-nearest-neighbour graph on squared Euclidean feature distances with RBF
edge weights, symmetrically normalize it, and solve
(I - alpha * L) Y* = Y0 — the closed form of the propagation fixed point —
with the pivoted solver instead of forming an inverse. All tie-breaks
(neighbour distance, per-column score, argmax) go to the lower index so
results are deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DegenerateGraphError, IsolatedNodeError
from .linalg import solve

__all__ = [
    "LPConfig",
    "AffinityGraph",
    "confidence_filter",
    "knn_graph",
    "normalized_laplacian",
    "propagate",
    "lp_refine",
    "lp_predict",
]


@dataclass(frozen=True)
class LPConfig:
    """k-NN size, confident fraction per class, propagation trade-off, and
    the RBF radius (None means mean squared distance over graph edges)."""

    k: int = 10
    conf_fraction: float = 0.2
    alpha: float = 0.5
    gamma_sq: float | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ContractError(f"k must be >= 1, got {self.k}")
        if not 0.0 < self.conf_fraction <= 1.0:
            raise ContractError(
                f"confident fraction must be in (0, 1], got {self.conf_fraction}"
            )
        if not 0.0 <= self.alpha < 1.0:
            raise ContractError(f"alpha must be in [0, 1), got {self.alpha}")
        if self.gamma_sq is not None and self.gamma_sq <= 0.0:
            raise ContractError(f"fixed gamma_sq must be positive, got {self.gamma_sq}")


@dataclass
class AffinityGraph:
    """Symmetric non-negative affinity matrix with zero diagonal, the RBF
    radius actually used, and the undirected edge list (i < j)."""

    weights: np.ndarray
    gamma_sq: float
    edges: list[tuple[int, int]]


def confidence_filter(scores: np.ndarray, conf_fraction: float) -> np.ndarray:
    """Keep the top ceil(fraction * n) entries of each class column, zero the
    rest; ties keep the lower row index."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] < 1:
        raise ContractError(f"expected an n x K score matrix, got {scores.shape}")
    if not 0.0 < conf_fraction <= 1.0:
        raise ContractError(f"fraction must be in (0, 1], got {conf_fraction}")
    n = scores.shape[0]
    keep = math.ceil(conf_fraction * n)
    out = np.zeros_like(scores)
    for col in range(scores.shape[1]):
        order = np.argsort(-scores[:, col], kind="stable")[:keep]
        out[order, col] = scores[order, col]
    return out


def _pairwise_sq_dists(features: np.ndarray) -> np.ndarray:
    n, d = features.shape
    if n * n * d <= 32_000_000:
        diff = features[:, None, :] - features[None, :, :]
        return np.einsum("ijk,ijk->ij", diff, diff)
    sq = (features * features).sum(axis=1)
    dist = sq[:, None] + sq[None, :] - 2.0 * (features @ features.T)
    dist = np.maximum((dist + dist.T) / 2.0, 0.0)
    np.fill_diagonal(dist, 0.0)
    return dist


def knn_graph(features: np.ndarray, cfg: LPConfig) -> AffinityGraph:
    """k-NN graph on squared Euclidean distances with RBF weights.

    Edge rule is the union "i in KNN(j) or j in KNN(i)"; the RBF radius
    defaults to the mean squared distance over the edge set. All points
    coinciding (radius zero) is an error unless a fixed radius was given.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ContractError(f"need at least two points, got shape {features.shape}")
    n = features.shape[0]
    if cfg.k >= n:
        raise ContractError(f"k={cfg.k} must be smaller than n={n}")
    dist = _pairwise_sq_dists(features)
    edges: set[tuple[int, int]] = set()
    for i in range(n):
        order = np.argsort(dist[i], kind="stable")
        picked = 0
        for j in order:
            j = int(j)
            if j == i:
                continue
            edges.add((i, j) if i < j else (j, i))
            picked += 1
            if picked == cfg.k:
                break
    edge_list = sorted(edges)
    if cfg.gamma_sq is not None:
        gamma_sq = cfg.gamma_sq
    else:
        gamma_sq = float(np.mean([dist[i, j] for i, j in edge_list]))
        if gamma_sq <= 0.0:
            raise DegenerateGraphError(
                "all points coincide (zero mean edge distance); "
                "provide a fixed RBF radius to proceed"
            )
    w = np.zeros((n, n))
    for i, j in edge_list:
        w[i, j] = w[j, i] = math.exp(-dist[i, j] / (2.0 * gamma_sq))
    return AffinityGraph(w, gamma_sq, edge_list)


def normalized_laplacian(graph: AffinityGraph) -> np.ndarray:
    """Symmetric normalization W_ij / sqrt(Q_ii Q_jj) with Q the degree
    matrix; the spectrum lies in [-1, 1]."""
    w = graph.weights
    degrees = w.sum(axis=1)
    dead = np.flatnonzero(degrees <= 0.0)
    if dead.size:
        raise IsolatedNodeError(int(dead[0]))
    scale = 1.0 / np.sqrt(degrees)
    return w * scale[:, None] * scale[None, :]


def propagate(laplacian: np.ndarray, scores: np.ndarray, alpha: float) -> np.ndarray:
    """Refined scores Y* solving (I - alpha L) Y* = Y0.

    alpha in [0, 1) keeps the system nonsingular (spectral radius of L is at
    most 1); alpha = 0 returns the input exactly.
    """
    if not 0.0 <= alpha < 1.0:
        raise ContractError(f"alpha must be in [0, 1), got {alpha}")
    laplacian = np.asarray(laplacian, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    n = laplacian.shape[0]
    if scores.shape[0] != n:
        raise ContractError(
            f"score rows ({scores.shape[0]}) do not match graph size ({n})"
        )
    system = np.eye(n) - alpha * laplacian
    return solve(system, scores)


def _dump_csv(dump_dir, tag: str, name: str, matrix: np.ndarray) -> None:
    path = Path(dump_dir)
    path.mkdir(parents=True, exist_ok=True)
    np.savetxt(path / f"{tag}{name}.csv", matrix, delimiter=",")


def lp_refine(
    features: np.ndarray,
    scores: np.ndarray,
    cfg: LPConfig,
    dump_dir=None,
    dump_tag: str = "",
) -> tuple[np.ndarray, bool]:
    """Full refinement chain; on a degenerate graph falls back to the
    unrefined scores and reports it via the returned flag.

    With ``dump_dir`` set, writes W, L, the filtered Y0 and Y* as CSV.
    """
    scores = np.asarray(scores, dtype=np.float64)
    try:
        y0 = confidence_filter(scores, cfg.conf_fraction)
        graph = knn_graph(features, cfg)
        laplacian = normalized_laplacian(graph)
        refined = propagate(laplacian, y0, cfg.alpha)
    except DegenerateGraphError:
        return scores.copy(), True
    if dump_dir is not None:
        _dump_csv(dump_dir, dump_tag, "W", graph.weights)
        _dump_csv(dump_dir, dump_tag, "L", laplacian)
        _dump_csv(dump_dir, dump_tag, "Y0", y0)
        _dump_csv(dump_dir, dump_tag, "Ystar", refined)
    return refined, False


def lp_predict(
    features: np.ndarray, scores: np.ndarray, cfg: LPConfig, dump_dir=None
) -> tuple[np.ndarray, bool]:
    """Refined class prediction per row (argmax, lower index wins ties)."""
    refined, fell_back = lp_refine(features, scores, cfg, dump_dir=dump_dir)
    return np.argmax(refined, axis=1), fell_back
