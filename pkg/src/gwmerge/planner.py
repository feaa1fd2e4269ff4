"""Merge-plan search: choose a partition of tasks into a fixed number of clusters.

Task indices are 1-based throughout, matching the plan file format. The loss
of a partition is

    sum over within-cluster pairs (i, j) of (1 - S[i, j])  +  lam * sum |C_k|

where by default the size penalty only counts clusters holding two or more
tasks (``count_singletons=True`` restores the penalty on every cluster).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import InvalidPartition, TargetOutOfRange, TooManyTasks

MAX_EXACT_TASKS = 12
_TIE_TOL = 1e-12


@dataclass
class MergePlan:
    clusters: list[list[int]]
    target_clusters: int
    loss: float | None = None
    provenance: str | None = None  # "greedy" | "exact" | "manual"
    evaluated: int | None = field(default=None, compare=False)

    def __post_init__(self):
        self.clusters = canonical_clusters(self.clusters)
        if self.target_clusters != len(self.clusters):
            raise InvalidPartition(
                f"plan has {len(self.clusters)} clusters but target_clusters={self.target_clusters}"
            )

    @property
    def n_tasks(self) -> int:
        return sum(len(c) for c in self.clusters)

    def cluster_of(self, task: int) -> int:
        for k, c in enumerate(self.clusters):
            if task in c:
                return k
        raise KeyError(task)

    def encoding(self) -> tuple[int, ...]:
        return partition_encoding(self.clusters)


def canonical_clusters(clusters: Sequence[Sequence[int]]) -> list[list[int]]:
    """Sort members within clusters and clusters by their smallest member.

    Raises InvalidPartition unless the clusters partition ``1..T``.
    """
    out = []
    for c in clusters:
        c = [int(i) for i in c]
        if not c:
            raise InvalidPartition("empty cluster")
        out.append(sorted(c))
    members = [i for c in out for i in c]
    if sorted(members) != list(range(1, len(members) + 1)):
        raise InvalidPartition(f"clusters must cover 1..{len(members)} exactly once, got {sorted(members)}")
    out.sort(key=lambda c: c[0])
    return out


def partition_encoding(clusters: Sequence[Sequence[int]]) -> tuple[int, ...]:
    """Restricted-growth string: entry t-1 is the block number of task t."""
    clusters = canonical_clusters(clusters)
    code = [0] * sum(len(c) for c in clusters)
    for k, c in enumerate(clusters):
        for i in c:
            code[i - 1] = k
    return tuple(code)


def _scores(S) -> np.ndarray:
    scores = getattr(S, "scores", S)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise InvalidPartition(f"similarity must be square, got shape {scores.shape}")
    return scores


def _cluster_cost(cluster: Sequence[int], scores: np.ndarray, lam: float, count_singletons: bool) -> float:
    idx = np.asarray(cluster) - 1
    pair_cost = 0.0
    if len(idx) > 1:
        sub = 1.0 - scores[np.ix_(idx, idx)]
        pair_cost = float(np.triu(sub, k=1).sum())
    if len(idx) >= 2 or count_singletons:
        pair_cost += lam * len(idx)
    return pair_cost


def plan_loss(clusters, S, lam: float = 0.0, count_singletons: bool = False) -> float:
    """Loss of a partition under similarity matrix ``S`` (see module docstring)."""
    clusters = canonical_clusters(clusters)
    scores = _scores(S)
    if sum(len(c) for c in clusters) != scores.shape[0]:
        raise InvalidPartition(f"partition covers {sum(len(c) for c in clusters)} tasks, S has {scores.shape[0]}")
    return float(sum(_cluster_cost(c, scores, lam, count_singletons) for c in clusters))


def _check_target(T: int, target: int) -> None:
    if not 1 <= target <= T:
        raise TargetOutOfRange(f"target_clusters={target} must lie in [1, {T}]")


def plan_greedy(S, target: int, lam: float = 0.0, count_singletons: bool = False) -> MergePlan:
    """Agglomerative merging: repeatedly fuse the cluster pair with the smallest loss increase.

    Ties go to the pair whose (smallest member, smallest member of partner)
    is lexicographically lowest.
    """
    scores = _scores(S)
    T = scores.shape[0]
    _check_target(T, target)
    clusters = [[i] for i in range(1, T + 1)]
    costs = [_cluster_cost(c, scores, lam, count_singletons) for c in clusters]
    for _ in range(T - target):
        best = None
        for a, b in itertools.combinations(range(len(clusters)), 2):
            merged = clusters[a] + clusters[b]
            delta = _cluster_cost(merged, scores, lam, count_singletons) - costs[a] - costs[b]
            if best is None or delta < best[0] - _TIE_TOL:
                best = (delta, a, b)
        _, a, b = best
        merged = sorted(clusters[a] + clusters[b])
        clusters[a] = merged
        costs[a] = _cluster_cost(merged, scores, lam, count_singletons)
        del clusters[b], costs[b]
    return MergePlan(
        clusters=clusters,
        target_clusters=target,
        loss=plan_loss(clusters, scores, lam, count_singletons),
        provenance="greedy",
    )


def stirling2(n: int, k: int) -> int:
    """Number of partitions of an n-set into exactly k nonempty blocks."""
    if n == k:
        return 1
    if k == 0 or k > n:
        return 0
    return sum((-1) ** i * math.comb(k, i) * (k - i) ** n for i in range(k + 1)) // math.factorial(k)


def iter_partitions(n: int, k: int) -> Iterator[tuple[int, ...]]:
    """Restricted-growth strings of length n using exactly k blocks, in lexicographic order."""
    if not 1 <= k <= n:
        return
    code = [0] * n

    def rec(pos: int, used: int):
        # Blocks still to open must fit in the remaining positions.
        if n - pos < k - used:
            return
        if pos == n:
            if used == k:
                yield tuple(code)
            return
        for b in range(min(used + 1, k)):
            code[pos] = b
            yield from rec(pos + 1, max(used, b + 1))

    code[0] = 0
    yield from rec(1, 1)


def _decode(code: Sequence[int]) -> list[list[int]]:
    blocks: dict[int, list[int]] = {}
    for t, b in enumerate(code, start=1):
        blocks.setdefault(b, []).append(t)
    return [blocks[b] for b in sorted(blocks)]


def plan_exact(S, target: int, lam: float = 0.0, count_singletons: bool = False) -> MergePlan:
    """Exhaustive search over all partitions into ``target`` blocks.

    Ties resolve to the lexicographically smallest restricted-growth encoding.
    Feasible up to 12 tasks.
    """
    scores = _scores(S)
    T = scores.shape[0]
    if T > MAX_EXACT_TASKS:
        raise TooManyTasks(f"exact search supports at most {MAX_EXACT_TASKS} tasks, got {T}")
    _check_target(T, target)
    dissim = np.triu(1.0 - scores, k=1)
    codes = np.array(list(iter_partitions(T, target)), dtype=np.int8).reshape(-1, T)
    losses = np.empty(len(codes))
    for start in range(0, len(codes), 8192):
        chunk = codes[start : start + 8192]
        same = chunk[:, :, None] == chunk[:, None, :]
        chunk_loss = (same * dissim).sum(axis=(1, 2))
        if lam:
            sizes = (chunk[:, :, None] == np.arange(target)).sum(axis=1)
            if not count_singletons:
                sizes = np.where(sizes >= 2, sizes, 0)
            chunk_loss += lam * sizes.sum(axis=1)
        losses[start : start + 8192] = chunk_loss
    # codes are in lexicographic order, so the first near-minimum is the tie winner
    best = int(np.flatnonzero(losses <= losses.min() + _TIE_TOL)[0])
    clusters = _decode(codes[best].tolist())
    return MergePlan(
        clusters=clusters,
        target_clusters=target,
        loss=plan_loss(clusters, scores, lam, count_singletons),
        provenance="exact",
        evaluated=len(codes),
    )


def make_plan(S, target: int, lam: float = 0.0, method: str = "greedy", count_singletons: bool = False) -> MergePlan:
    if method == "greedy":
        return plan_greedy(S, target, lam, count_singletons)
    if method == "exact":
        return plan_exact(S, target, lam, count_singletons)
    raise ValueError(f"unknown planner method {method!r}")
