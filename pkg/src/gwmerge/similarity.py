"""Pairwise GW distances across tasks and their rescaling into similarity scores."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateRange, InvariantViolation, PairFailure
from .gw import GwConfig, GwResult, MetricSpace, gw_entropic
from .tensor_io import SquareMatrix


@dataclass(frozen=True)
class PairwiseGW:
    distances: np.ndarray
    converged: np.ndarray  # bool, diagonal True
    iterations: np.ndarray
    results: dict  # (i, j) with i < j -> GwResult

    @property
    def all_converged(self) -> bool:
        return bool(self.converged.all())

    def flags(self) -> list[dict]:
        return [
            {"pair": [i + 1, j + 1], "distance": r.distance, "converged": r.converged, "iterations": r.iterations}
            for (i, j), r in sorted(self.results.items())
        ]


def pairwise_gw(spaces: Sequence[MetricSpace], cfg: GwConfig = GwConfig(), workers: int = 1) -> PairwiseGW:
    """GW distance for every unordered pair of ``spaces``.

    Pairs are independent; ``workers > 1`` solves them on a thread pool.
    Output does not depend on the number of workers.
    """
    T = len(spaces)
    if T < 2:
        raise InvariantViolation(f"need at least 2 spaces, got {T}")
    pairs = [(i, j) for i in range(T) for j in range(i + 1, T)]

    def solve(pair) -> GwResult:
        i, j = pair
        return gw_entropic(spaces[i], spaces[j], cfg)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            solved = list(pool.map(solve, pairs))
    else:
        solved = [solve(pair) for pair in pairs]

    d = np.zeros((T, T))
    conv = np.ones((T, T), dtype=bool)
    iters = np.zeros((T, T), dtype=int)
    for (i, j), res in zip(pairs, solved):
        if math.isnan(res.distance):
            raise PairFailure(f"GW distance for pair ({i + 1}, {j + 1}) is NaN")
        d[i, j] = d[j, i] = res.distance
        conv[i, j] = conv[j, i] = res.converged
        iters[i, j] = iters[j, i] = res.iterations
    return PairwiseGW(d, conv, iters, dict(zip(pairs, solved)))


@dataclass(frozen=True)
class SimilarityMatrix:
    scores: np.ndarray
    source_distances: np.ndarray
    d_min: float
    d_max: float
    degenerate: bool = False
    labels: tuple[str, ...] = ()

    @property
    def n_tasks(self) -> int:
        return self.scores.shape[0]

    def as_square(self) -> SquareMatrix:
        return SquareMatrix(self.scores, self.labels)


def _check_distance_matrix(d: np.ndarray) -> None:
    if d.ndim != 2 or d.shape[0] != d.shape[1] or d.shape[0] < 2:
        raise InvariantViolation(f"need a square distance matrix with T >= 2, got shape {d.shape}")
    if not np.all(np.isfinite(d)):
        raise InvariantViolation("distance matrix has non-finite entries")
    if not np.array_equal(d, d.T):
        raise InvariantViolation("distance matrix must be symmetric")
    if np.any(np.diag(d) != 0):
        raise InvariantViolation("distance matrix must have a zero diagonal")


def to_similarity(d, labels: Sequence[str] = ()) -> SimilarityMatrix:
    """Min-max rescale off-diagonal distances into scores in [0, 1].

    The closest pair scores 1 and the farthest 0; the diagonal is set to 1.
    If all off-diagonal distances coincide every score is 1 and a
    DegenerateRange warning is emitted.
    """
    if isinstance(d, SquareMatrix):
        labels = labels or d.labels
        d = d.data
    d = np.array(d, dtype=np.float64)
    _check_distance_matrix(d)
    off = ~np.eye(d.shape[0], dtype=bool)
    d_min, d_max = float(d[off].min()), float(d[off].max())
    if d_max == d_min:
        warnings.warn("all pairwise distances are equal; similarity set to 1", DegenerateRange, stacklevel=2)
        scores = np.ones_like(d)
        degenerate = True
    else:
        scores = 1.0 - (d - d_min) / (d_max - d_min)
        np.fill_diagonal(scores, 1.0)
        degenerate = False
    scores.flags.writeable = False
    d.flags.writeable = False
    labels = tuple(labels) or tuple(str(i + 1) for i in range(d.shape[0]))
    return SimilarityMatrix(scores, d, d_min, d_max, degenerate, labels)


def similarity_from_square(matrix: SquareMatrix) -> SimilarityMatrix:
    """Wrap a similarity CSV read from disk (scores used as-is)."""
    scores = np.array(matrix.data)
    if not np.array_equal(scores, scores.T):
        raise InvariantViolation("similarity matrix must be symmetric")
    off = ~np.eye(scores.shape[0], dtype=bool)
    nan = np.full_like(scores, np.nan)
    return SimilarityMatrix(
        scores=scores,
        source_distances=nan,
        d_min=float("nan"),
        d_max=float("nan"),
        degenerate=bool(scores.shape[0] > 1 and np.all(scores[off] == 1.0)),
        labels=matrix.labels,
    )
