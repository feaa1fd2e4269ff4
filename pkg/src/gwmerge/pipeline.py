"""End-to-end run: embeddings -> GW distances -> similarity -> plan -> merge -> eval.

Every stage writes its outputs into ``cfg.output_dir`` as soon as it
finishes. ``report.json`` is written whether the run succeeds or fails. On
failure its ``status`` is ``"FAILED"`` and it names the stage that raised.
"""

from __future__ import annotations

import hashlib
import json
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .errors import StageError
from .gw import build_metric_space
from .merger import FisherDiagonal, assemble_bundle, write_bundle
from .metrics import task_metrics, weighted_mean
from .planner import make_plan
from .similarity import pairwise_gw, to_similarity
from .tensor_io import (
    SquareMatrix,
    read_embeddings,
    read_predictions,
    read_snapshot,
    read_square_matrix,
    write_plan,
    write_square_matrix,
)

STAGES = ("embeddings", "distances", "similarity", "planner", "merge", "eval")


def task_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent per-task generators derived from one seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Run every stage in order and return the report (also written to ``report.json``)."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = cfg.task_ids
    report: dict = {
        "status": "running",
        "failed_stage": None,
        "error": None,
        "seed": cfg.seed,
        "n_tasks": len(ids),
        "task_ids": ids,
        "stages": [],
        "outputs": {},
    }

    @contextmanager
    def stage(name: str):
        t0 = time.perf_counter()
        entry = {"name": name, "status": "running", "seconds": None}
        report["stages"].append(entry)
        try:
            yield
        except Exception as exc:
            entry["status"] = "FAILED"
            entry["seconds"] = time.perf_counter() - t0
            report["status"] = "FAILED"
            report["failed_stage"] = name
            report["error"] = f"{type(exc).__name__}: {exc}"
            write_json(report, out / "report.json")
            if isinstance(exc, StageError):
                raise
            raise StageError(name, exc) from exc
        entry["status"] = "ok"
        entry["seconds"] = time.perf_counter() - t0

    dcfg = cfg.distance
    with stage("embeddings"):
        rngs = task_rngs(cfg.seed, len(ids))
        spaces, rows = [], []
        for task, rng in zip(cfg.tasks, rngs):
            emb = read_embeddings(task.embeddings)
            rows.append(emb.rows)
            spaces.append(build_metric_space(emb, dcfg.normalize_distances, dcfg.subsample, rng))
        report["embeddings"] = {"rows": rows, "used_rows": [s.n for s in spaces], "subsample": dcfg.subsample}

    with stage("distances"):
        pw = pairwise_gw(spaces, dcfg.gw, workers=dcfg.workers)
        write_square_matrix(SquareMatrix(pw.distances, tuple(ids)), out / "distances.csv")
        report["outputs"]["distances"] = "distances.csv"
        report["gw"] = {
            "epsilon_rel": dcfg.gw.epsilon_rel if dcfg.gw.epsilon is None else None,
            "epsilon": dcfg.gw.epsilon,
            "p": dcfg.gw.p,
            "normalize_distances": dcfg.normalize_distances,
            "all_converged": pw.all_converged,
            "pairs": pw.flags(),
        }

    with stage("similarity"):
        sim = to_similarity(pw.distances, ids)
        write_square_matrix(sim.as_square(), out / "similarity.csv")
        report["outputs"]["similarity"] = "similarity.csv"
        report["similarity"] = {"d_min": sim.d_min, "d_max": sim.d_max, "degenerate": sim.degenerate}

    pcfg = cfg.planner
    with stage("planner"):
        plan = make_plan(sim, pcfg.target_clusters, pcfg.lam, pcfg.method, pcfg.lambda_counts_singletons)
        write_plan(plan, out / "plan.json", ids)
        report["outputs"]["plan"] = "plan.json"
        report["plan"] = {
            "clusters": plan.clusters,
            "cluster_ids": [[ids[t - 1] for t in c] for c in plan.clusters],
            "target_clusters": plan.target_clusters,
            "loss": plan.loss,
            "method": pcfg.method,
            "lambda": pcfg.lam,
        }

    mcfg = cfg.merger
    with stage("merge"):
        snaps = {i + 1: read_snapshot(t.snapshot, cfg.head_prefixes) for i, t in enumerate(cfg.tasks)}
        base = read_snapshot(cfg.base_snapshot, cfg.head_prefixes) if cfg.base_snapshot else None
        params: dict = {}
        if mcfg.method == "ties":
            params = {"density": mcfg.density, "lambda_scale": mcfg.lambda_scale}
        if mcfg.method == "fisher":
            params["fishers"] = {
                i + 1: FisherDiagonal(dict(read_snapshot(t.fisher, None).tensors)) for i, t in enumerate(cfg.tasks)
            }
        bundle = assemble_bundle(plan, snaps, base, mcfg.method, params, {i + 1: tid for i, tid in enumerate(ids)})
        write_bundle(bundle, out / "bundle")
        report["outputs"]["bundle"] = "bundle"
        pre = sum(s.nbytes("backbone") for s in snaps.values())
        post = bundle.backbone_nbytes()
        report["merge"] = {
            "method": mcfg.method,
            "params": bundle.method_params,
            "pre_merge_backbone_bytes": pre,
            "post_merge_backbone_bytes": post,
            "storage_reduction_ratio": pre / post,
            "head_bytes": bundle.head_nbytes(),
            "fisher_fallback": bundle.report.get("fisher_fallback", 0),
        }

    with stage("eval"):
        if all(t.predictions is not None for t in cfg.tasks):
            per_task = {}
            pairs = []
            for t in cfg.tasks:
                m = task_metrics(read_predictions(t.predictions, t.id))
                per_task[t.id] = m.to_dict()
                pairs.append((m, m.n_samples))
            report["eval"] = {"per_task": per_task, "weighted": weighted_mean(pairs)}
            write_json(report["eval"], out / "metrics.json")
            report["outputs"]["metrics"] = "metrics.json"
        else:
            report["eval"] = None

    report["status"] = "ok"
    write_json(report, out / "report.json")
    return report


def run_digest(output_dir) -> dict:
    """Compact, comparable summary of a finished run directory.

    Holds the plan, loss, storage ratio, distance and similarity matrices,
    weighted metrics and a SHA-256 per plan/bundle file.
    """
    out = Path(output_dir)
    report = json.loads((out / "report.json").read_text())
    files = sorted(p for p in (out / "bundle").iterdir() if p.is_file())
    return {
        "plan": report["plan"]["clusters"],
        "loss": report["plan"]["loss"],
        "storage_reduction_ratio": report["merge"]["storage_reduction_ratio"],
        "distances": read_square_matrix(out / "distances.csv").data.tolist(),
        "similarity": read_square_matrix(out / "similarity.csv").data.tolist(),
        "weighted_metrics": (report.get("eval") or {}).get("weighted"),
        "sha256": {
            "plan.json": hashlib.sha256((out / "plan.json").read_bytes()).hexdigest(),
            **{f"bundle/{p.name}": hashlib.sha256(p.read_bytes()).hexdigest() for p in files},
        },
    }
