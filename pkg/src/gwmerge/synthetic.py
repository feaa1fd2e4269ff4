"""Synthetic task fixtures: embeddings from latent geometry families plus matching snapshots.

Task ``t`` (1-based) belongs to family ``(t - 1) % n_families``, so with nine
tasks and three families the ground-truth grouping is {1,4,7}, {2,5,8}, {3,6,9}.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import DistanceConfig, MergerConfig, PipelineConfig, PlannerConfig, TaskSpec, write_config
from .gw import GwConfig
from .merger import FisherDiagonal
from .tensor_io import (
    EmbeddingMatrix,
    ModelSnapshot,
    PredictionFile,
    write_embeddings,
    write_predictions,
    write_snapshot,
)

FAMILIES = ("ring", "two_blobs", "square")


def family_points(family: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points in the plane with the family's characteristic shape."""
    if family == "ring":
        theta = rng.uniform(0, 2 * np.pi, n)
        return np.c_[np.cos(theta), np.sin(theta)]
    if family == "two_blobs":
        side = rng.integers(0, 2, n)
        pts = rng.normal(0.0, 0.25, (n, 2))
        pts[:, 0] += np.where(side, 1.2, -1.2)
        return pts
    if family == "square":
        return rng.uniform(-1, 1, (n, 2))
    raise ValueError(f"unknown family {family!r}")


def embed(points: np.ndarray, dim: int, rng: np.random.Generator, noise: float = 0.05) -> np.ndarray:
    """Random isometric lift into ``dim`` dimensions plus isotropic noise."""
    q, _ = np.linalg.qr(rng.standard_normal((dim, points.shape[1])))
    return points @ q.T + noise * rng.standard_normal((points.shape[0], dim))


def family_of(task: int, n_families: int = len(FAMILIES)) -> int:
    return (task - 1) % n_families


def ground_truth(n_tasks: int, n_families: int = len(FAMILIES)) -> list[list[int]]:
    groups: dict[int, list[int]] = {}
    for t in range(1, n_tasks + 1):
        groups.setdefault(family_of(t, n_families), []).append(t)
    return [groups[k] for k in sorted(groups)]


def embedding_sets(n_tasks: int, n_points: int, dim: int, rng: np.random.Generator) -> list[np.ndarray]:
    return [embed(family_points(FAMILIES[family_of(t)], n_points, rng), dim, rng) for t in range(1, n_tasks + 1)]


def backbone_layout(hidden: int) -> dict[str, tuple[int, ...]]:
    return {
        "encoder.layer0.weight": (hidden, hidden),
        "encoder.layer0.bias": (hidden,),
        "encoder.layer1.weight": (hidden, hidden),
        "encoder.layer1.bias": (hidden,),
    }


def _f32(a: np.ndarray) -> np.ndarray:
    # keep every generated value exactly representable on disk
    return a.astype(np.float32).astype(np.float64)


def make_snapshots(n_tasks: int, rng: np.random.Generator, hidden: int = 16, n_labels: int = 5):
    """Base snapshot plus one fine-tuned snapshot per task.

    Task backbones are ``base + family shift + task noise``; heads are random.
    """
    layout = backbone_layout(hidden)
    base_bb = {n: _f32(rng.normal(0, 0.5, s)) for n, s in layout.items()}
    base_head = {"classifier.weight": _f32(rng.normal(0, 0.5, (n_labels, hidden))),
                 "classifier.bias": _f32(np.zeros(n_labels))}
    shifts = [{n: rng.normal(0, 0.1, s) for n, s in layout.items()} for _ in FAMILIES]
    base = ModelSnapshot.from_parts(base_bb, base_head)
    snaps = []
    for t in range(1, n_tasks + 1):
        shift = shifts[family_of(t)]
        bb = {n: _f32(base_bb[n] + shift[n] + rng.normal(0, 0.02, layout[n])) for n in layout}
        head = {"classifier.weight": _f32(rng.normal(0, 0.5, (n_labels, hidden))),
                "classifier.bias": _f32(rng.normal(0, 0.1, n_labels))}
        snaps.append(ModelSnapshot.from_parts(bb, head))
    return base, snaps


def make_fishers(snapshots, rng: np.random.Generator) -> list[FisherDiagonal]:
    return [FisherDiagonal({n: _f32(rng.gamma(2.0, 0.5, a.shape)) for n, a in s.backbone.items()}) for s in snapshots]


def make_predictions(task_id: str, n: int, n_labels: int, rng: np.random.Generator, flip: float = 0.1) -> PredictionFile:
    y_true = (rng.random((n, n_labels)) < 0.4).astype(np.int8)
    y_pred = np.where(rng.random((n, n_labels)) < flip, 1 - y_true, y_true).astype(np.int8)
    return PredictionFile(task_id, y_true, y_pred, tuple(f"E{c + 1}" for c in range(n_labels)))


@dataclass(frozen=True)
class FixtureSpec:
    n_tasks: int = 9
    n_points: int = 40
    dim: int = 16
    hidden: int = 16
    n_labels: int = 5
    n_eval: int = 60
    target_clusters: int = 3
    seed: int = 0


def write_fixture(out_dir, spec: FixtureSpec = FixtureSpec(), planner_method: str = "exact",
                  merge_method: str = "average") -> Path:
    """Write embeddings, snapshots, Fisher diagonals, predictions and ``config.toml``.

    Returns the config path.
    """
    out = Path(out_dir)
    for sub in ("embeddings", "snapshots", "fisher", "predictions"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    embs = embedding_sets(spec.n_tasks, spec.n_points, spec.dim, rng)
    base, snaps = make_snapshots(spec.n_tasks, rng, spec.hidden, spec.n_labels)
    fishers = make_fishers(snaps, rng)
    write_snapshot(base, out / "base.gwm")
    tasks = []
    for t in range(1, spec.n_tasks + 1):
        tid = f"task{t}"
        write_embeddings(EmbeddingMatrix(_f32(embs[t - 1])), out / "embeddings" / f"{tid}.gwe")
        write_snapshot(snaps[t - 1], out / "snapshots" / f"{tid}.gwm")
        fw = fishers[t - 1].weights
        write_snapshot(ModelSnapshot(fw, {n: "backbone" for n in fw}), out / "fisher" / f"{tid}.gwm")
        write_predictions(make_predictions(tid, spec.n_eval, spec.n_labels, rng), out / "predictions" / f"{tid}.csv")
        tasks.append(
            TaskSpec(
                id=tid,
                embeddings=out / "embeddings" / f"{tid}.gwe",
                snapshot=out / "snapshots" / f"{tid}.gwm",
                predictions=out / "predictions" / f"{tid}.csv",
                fisher=out / "fisher" / f"{tid}.gwm",
            )
        )
    cfg = PipelineConfig(
        tasks=tuple(tasks),
        output_dir=out / "run",
        base_snapshot=out / "base.gwm",
        distance=DistanceConfig(gw=GwConfig(seed=spec.seed), normalize_distances=True),
        planner=PlannerConfig(target_clusters=spec.target_clusters, method=planner_method),
        merger=MergerConfig(method=merge_method),
        seed=spec.seed,
    )
    path = out / "config.toml"
    write_config(cfg, path)
    return path
