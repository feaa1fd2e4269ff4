"""Parameter-space merging of backbone tensors and bundle assembly.

Every merge function takes and returns name -> float64 array maps covering
backbone tensors only; classification heads are never merged. Sums across
models are taken over values sorted per element, which makes the results
independent of the order in which models are passed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    EmptyInput,
    InvalidDensity,
    LambdaCountMismatch,
    MalformedManifest,
    MethodRequiresBase,
    MissingSnapshot,
    NegativeFisher,
    ShapeMismatch,
)
from .planner import MergePlan
from .tensor_io import ModelSnapshot, plan_from_json, plan_to_json, read_snapshot, write_snapshot

METHODS = ("average", "fisher", "task_arithmetic", "ties")
Tensors = Mapping[str, np.ndarray]


def _backbone(x) -> dict[str, np.ndarray]:
    return dict(x.backbone) if isinstance(x, ModelSnapshot) else dict(x)


def _check_aligned(maps: Sequence[Tensors], what: str = "backbone") -> list[str]:
    if not maps:
        raise EmptyInput(f"no {what} tensors to merge")
    names = list(maps[0])
    for k, m in enumerate(maps[1:], start=2):
        if list(m) != names:
            raise ShapeMismatch(f"{what} #{k} tensor names {list(m)} differ from {names}")
        for n in names:
            if m[n].shape != maps[0][n].shape:
                raise ShapeMismatch(f"{what} #{k} tensor {n!r}: shape {m[n].shape} vs {maps[0][n].shape}")
    return names


def _ordered_sum(stack: np.ndarray) -> np.ndarray:
    return np.sort(stack, axis=0).sum(axis=0)


def merge_average(snapshots: Sequence) -> dict[str, np.ndarray]:
    """Elementwise mean of the backbones."""
    maps = [_backbone(s) for s in snapshots]
    names = _check_aligned(maps)
    T = len(maps)
    return {n: _ordered_sum(np.stack([m[n] for m in maps])) / T for n in names}


@dataclass(frozen=True)
class FisherDiagonal:
    """Per-parameter importance weights aligned with the backbone tensors."""

    weights: Mapping[str, np.ndarray]

    def __post_init__(self):
        out = {}
        for n, w in self.weights.items():
            w = np.array(w, dtype=np.float64)
            if not np.all(np.isfinite(w)):
                raise NegativeFisher(f"Fisher weights for {n!r} are not finite")
            if np.any(w < 0):
                raise NegativeFisher(f"Fisher weights for {n!r} contain negative entries")
            out[n] = w
        object.__setattr__(self, "weights", out)

    @classmethod
    def from_snapshot(cls, snap: ModelSnapshot) -> "FisherDiagonal":
        return cls(snap.backbone)


def merge_fisher(snapshots: Sequence, fishers: Sequence, report: dict | None = None) -> dict[str, np.ndarray]:
    """Fisher-weighted elementwise mean.

    Where every model has zero Fisher weight the plain mean is used; the
    number of such positions is added to ``report["fisher_fallback"]``.
    """
    maps = [_backbone(s) for s in snapshots]
    names = _check_aligned(maps)
    fmaps = [f.weights if isinstance(f, FisherDiagonal) else FisherDiagonal(_backbone(f)).weights for f in fishers]
    if len(fmaps) != len(maps):
        raise ShapeMismatch(f"{len(fmaps)} Fisher diagonals for {len(maps)} snapshots")
    _check_aligned([maps[0], *fmaps], "fisher")
    out, fallback = {}, 0
    for n in names:
        theta = np.stack([m[n] for m in maps])
        F = np.stack([f[n] for f in fmaps])
        num = _ordered_sum(F * theta)
        den = _ordered_sum(F)
        zero = den == 0
        fallback += int(zero.sum())
        merged = np.empty_like(num)
        np.divide(num, den, out=merged, where=~zero)
        merged[zero] = (_ordered_sum(theta) / len(maps))[zero]
        out[n] = merged
    if report is not None:
        report["fisher_fallback"] = report.get("fisher_fallback", 0) + fallback
    return out


def make_task_vector(snapshot, base) -> dict[str, np.ndarray]:
    """Backbone delta ``theta_t - theta_0``."""
    tb, bb = _backbone(snapshot), _backbone(base)
    _check_aligned([bb, tb])
    return {n: tb[n] - bb[n] for n in bb}


def merge_task_arithmetic(base, task_vectors: Sequence[Tensors], lambdas: Sequence[float]) -> dict[str, np.ndarray]:
    """``theta_0 + sum_t lambda_t * tau_t``."""
    bb = _backbone(base)
    if not task_vectors:
        raise EmptyInput("no task vectors")
    if len(lambdas) != len(task_vectors):
        raise LambdaCountMismatch(f"{len(lambdas)} coefficients for {len(task_vectors)} task vectors")
    names = _check_aligned([bb, *task_vectors])
    return {
        n: bb[n] + _ordered_sum(np.stack([lam * tv[n] for lam, tv in zip(lambdas, task_vectors)]))
        for n in names
    }


def _flatten(maps: Sequence[Tensors], names: list[str]) -> np.ndarray:
    return np.stack([np.concatenate([m[n].ravel() for n in names]) if names else np.zeros(0) for m in maps])


def _unflatten(flat: np.ndarray, like: Tensors) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for n, arr in like.items():
        out[n] = flat[pos : pos + arr.size].reshape(arr.shape)
        pos += arr.size
    return out


def ties_trim(vector: np.ndarray, density: float) -> np.ndarray:
    """Keep the ceil(density * N) largest-magnitude entries; ties go to the lower index."""
    N = vector.size
    keep = math.ceil(round(density * N, 9))
    order = np.argsort(-np.abs(vector), kind="stable")
    out = np.zeros_like(vector)
    out[order[:keep]] = vector[order[:keep]]
    return out


def merge_ties(base, task_vectors: Sequence[Tensors], density: float = 0.2, lambda_scale: float = 1.0) -> dict[str, np.ndarray]:
    """Trim, elect sign, disjoint mean over the concatenated backbone.

    1. per task vector keep the top ``ceil(density * N)`` entries by magnitude;
    2. per position elect the sign of the summed trimmed values (0 elects +);
    3. average the nonzero trimmed values that agree with the elected sign.
    """
    if not 0 < density <= 1:
        raise InvalidDensity(f"density must lie in (0, 1], got {density}")
    bb = _backbone(base)
    if not task_vectors:
        raise EmptyInput("no task vectors")
    names = _check_aligned([bb, *task_vectors])
    flat = _flatten(task_vectors, names)
    trimmed = np.stack([ties_trim(v, density) for v in flat])
    elected = np.where(_ordered_sum(trimmed) >= 0, 1.0, -1.0)
    agree = (trimmed != 0) & (np.sign(trimmed) == elected)
    count = agree.sum(axis=0)
    total = _ordered_sum(np.where(agree, trimmed, 0.0))
    delta = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    merged = _flatten([bb], names)[0] + lambda_scale * delta
    return _unflatten(merged, bb)


# ---------------------------------------------------------------------------
# Bundles


@dataclass
class MergedBundle:
    """One merged backbone per plan cluster plus every task's original head."""

    backbones: dict[int, dict[str, np.ndarray]]  # cluster number (1-based) -> tensors
    heads: dict[int, dict[str, np.ndarray]]  # task index -> tensors
    plan: MergePlan
    method: str
    method_params: dict = field(default_factory=dict)
    report: dict = field(default_factory=dict)
    task_ids: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        tasks = sorted(t for c in self.plan.clusters for t in c)
        if sorted(self.heads) != tasks:
            raise MissingSnapshot(f"heads for tasks {sorted(self.heads)} do not match plan tasks {tasks}")
        if sorted(self.backbones) != list(range(1, len(self.plan.clusters) + 1)):
            raise MissingSnapshot("one backbone per plan cluster required")
        _check_aligned([self.backbones[k] for k in sorted(self.backbones)])

    def cluster_of(self, task: int) -> int:
        return self.plan.cluster_of(task) + 1

    def snapshot(self, task: int) -> ModelSnapshot:
        """The merged model serving ``task``: its cluster backbone plus its own head."""
        return ModelSnapshot.from_parts(self.backbones[self.cluster_of(task)], self.heads[task])

    def backbone_nbytes(self) -> int:
        return sum(4 * a.size for b in self.backbones.values() for a in b.values())

    def head_nbytes(self) -> int:
        return sum(4 * a.size for h in self.heads.values() for a in h.values())


def _merge_cluster(method, members, snaps, base, params, report):
    if method == "average":
        return merge_average([snaps[t] for t in members])
    if method == "fisher":
        fishers = params.get("fishers")
        if fishers is None:
            raise MissingSnapshot("method 'fisher' needs Fisher diagonals (params['fishers'])")
        missing = [t for t in members if t not in fishers]
        if missing:
            raise MissingSnapshot(f"no Fisher diagonal for tasks {missing}")
        return merge_fisher([snaps[t] for t in members], [fishers[t] for t in members], report)
    vectors = [make_task_vector(snaps[t], base) for t in members]
    if method == "task_arithmetic":
        given = params.get("lambdas") or {}
        lambdas = [given.get(t, 1.0 / len(members)) for t in members]
        return merge_task_arithmetic(base, vectors, lambdas)
    if method == "ties":
        return merge_ties(base, vectors, params.get("density", 0.2), params.get("lambda_scale", 1.0))
    raise ValueError(f"unknown merge method {method!r}; expected one of {METHODS}")


def assemble_bundle(
    plan: MergePlan,
    snapshots: Mapping[int, ModelSnapshot] | Sequence[ModelSnapshot],
    base: ModelSnapshot | None = None,
    method: str | None = None,
    params: dict | None = None,
    task_ids: Mapping[int, str] | None = None,
) -> MergedBundle:
    """Merge each plan cluster's backbones; singletons and heads are copied verbatim.

    ``snapshots`` maps 1-based task index to snapshot (a sequence is taken as
    tasks 1..T in order). ``method`` has no default and must be named.
    """
    if method is None:
        raise ValueError(f"merge method must be given explicitly; one of {METHODS}")
    if method not in METHODS:
        raise ValueError(f"unknown merge method {method!r}; expected one of {METHODS}")
    params = dict(params or {})
    snaps = dict(snapshots) if isinstance(snapshots, Mapping) else {i + 1: s for i, s in enumerate(snapshots)}
    missing = [t for c in plan.clusters for t in c if t not in snaps]
    if missing:
        raise MissingSnapshot(f"no snapshot for tasks {missing}")
    if method in ("task_arithmetic", "ties") and base is None:
        raise MethodRequiresBase(f"method {method!r} needs the base snapshot")

    report: dict = {}
    backbones = {}
    for k, members in enumerate(plan.clusters, start=1):
        if len(members) == 1:
            backbones[k] = {n: a.copy() for n, a in snaps[members[0]].backbone.items()}
        else:
            backbones[k] = _merge_cluster(method, members, snaps, base, params, report)
    heads = {t: {n: a.copy() for n, a in snaps[t].head.items()} for c in plan.clusters for t in c}
    stored = {k: v for k, v in params.items() if k not in ("fishers",)}
    return MergedBundle(backbones, heads, plan, method, stored, report, dict(task_ids or {}))


def write_bundle(bundle: MergedBundle, out_dir) -> Path:
    """Write ``backbone_<k>.gwm``, ``head_<t>.gwm`` and ``bundle.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "method": bundle.method,
        "method_params": bundle.method_params,
        "plan": json.loads(plan_to_json(bundle.plan)),
        "report": bundle.report,
        "backbones": {},
        "heads": {},
        "task_ids": {str(t): i for t, i in bundle.task_ids.items()},
    }
    for k, tensors in sorted(bundle.backbones.items()):
        fname = f"backbone_{k}.gwm"
        write_snapshot(ModelSnapshot(tensors, {n: "backbone" for n in tensors}), out / fname)
        manifest["backbones"][str(k)] = {"file": fname, "tasks": bundle.plan.clusters[k - 1]}
    for t, tensors in sorted(bundle.heads.items()):
        fname = f"head_{t}.gwm"
        write_snapshot(ModelSnapshot(tensors, {n: "head" for n in tensors}), out / fname)
        manifest["heads"][str(t)] = fname
    (out / "bundle.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def read_bundle(bundle_dir) -> MergedBundle:
    root = Path(bundle_dir)
    try:
        manifest = json.loads((root / "bundle.json").read_text())
        plan = plan_from_json(json.dumps(manifest["plan"]))
        backbones = {int(k): dict(read_snapshot(root / v["file"], None).tensors) for k, v in manifest["backbones"].items()}
        heads = {int(t): dict(read_snapshot(root / f, None).tensors) for t, f in manifest["heads"].items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedManifest(f"bad bundle manifest in {root}: {exc}") from exc
    return MergedBundle(
        backbones,
        heads,
        plan,
        manifest["method"],
        manifest.get("method_params", {}),
        manifest.get("report", {}),
        {int(t): i for t, i in manifest.get("task_ids", {}).items()},
    )
