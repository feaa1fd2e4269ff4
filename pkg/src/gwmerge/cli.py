"""Command-line entry point: ``gwmerge <subcommand> ...``.

Every subcommand is a thin wrapper over a library call. Errors are printed as
``error: [stage] Type: message`` on stderr and give exit code 1 (2 for usage
errors, as argparse does).
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import replace
from pathlib import Path

from .config import DistanceConfig, apply_overrides, load_config
from .errors import ConfigError, GWMergeError, LengthMismatch, StageError
from .gw import GwConfig, build_metric_space
from .merger import METHODS, FisherDiagonal, assemble_bundle, write_bundle
from .metrics import METRIC_NAMES, paired_t_test, task_metrics, weighted_mean
from .pipeline import run_pipeline, task_rngs, write_json
from .planner import make_plan
from .similarity import pairwise_gw, similarity_from_square, to_similarity
from .synthetic import FixtureSpec, write_fixture
from .tensor_io import (
    SquareMatrix,
    iter_files,
    read_embeddings,
    read_plan,
    read_plan_task_ids,
    read_predictions,
    read_snapshot,
    read_square_matrix,
    write_plan,
    write_square_matrix,
)

EMBEDDING_SUFFIXES = (".gwe", ".csv")


def _add_gw_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("GW solver")
    g.add_argument("--epsilon", type=float, help="absolute entropic regularisation (overrides --epsilon-rel)")
    g.add_argument("--epsilon-rel", type=float, help="epsilon as a fraction of the mean distance")
    g.add_argument("--gw-p", type=float, help="distortion exponent p")
    g.add_argument("--max-iter", type=int, help="maximum outer GW iterations")
    g.add_argument("--subsample", type=int, help="max rows per embedding matrix (0 = all)")
    g.add_argument("--seed", type=int, help="seed for subsampling and random starts")
    g.add_argument("--normalize-distances", action=argparse.BooleanOptionalAction, default=None,
                   help="divide each distance matrix by its maximum")
    g.add_argument("--workers", type=int, help="threads for pairwise solves")


def _add_plan_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--target", type=int, help="number of clusters T'")
    p.add_argument("--lambda", dest="lam", type=float, help="cluster-size penalty")
    p.add_argument("--method", dest="planner_method", choices=("greedy", "exact"))
    p.add_argument("--lambda-counts-singletons", action="store_true", default=None,
                   help="let the penalty count singleton clusters too")


def _gw_overrides(a) -> dict:
    return dict(epsilon=a.epsilon, epsilon_rel=a.epsilon_rel, gw_p=a.gw_p, max_iter=a.max_iter,
                subsample=a.subsample, seed=a.seed, normalize_distances=a.normalize_distances, workers=a.workers)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gwmerge", description="GW-similarity guided model merging")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="write a synthetic fixture and a config that runs on it")
    p.add_argument("directory", type=Path)
    p.add_argument("--tasks", type=int, default=FixtureSpec.n_tasks)
    p.add_argument("--points", type=int, default=FixtureSpec.n_points)
    p.add_argument("--target", type=int, default=FixtureSpec.target_clusters)
    p.add_argument("--seed", type=int, default=FixtureSpec.seed)
    p.add_argument("--planner", choices=("greedy", "exact"), default="exact")
    p.add_argument("--merge-method", choices=METHODS, default="average")

    p = sub.add_parser("validate", help="parse and check a config file")
    p.add_argument("config", type=Path)

    p = sub.add_parser("run", help="run the full pipeline")
    p.add_argument("config", type=Path)
    p.add_argument("--out", dest="output_dir", type=Path)
    _add_gw_flags(p)
    _add_plan_flags(p)
    p.add_argument("--merge-method", choices=METHODS)
    p.add_argument("--density", type=float)
    p.add_argument("--lambda-scale", type=float)
    p.add_argument("--base", dest="base_snapshot", type=Path)

    p = sub.add_parser("gw-dist", help="pairwise GW distances between embedding sets")
    p.add_argument("embeddings", nargs="*", type=Path, help="embedding files or directories")
    p.add_argument("--config", type=Path, help="take tasks and solver settings from a config")
    p.add_argument("--out", type=Path, required=True)
    _add_gw_flags(p)

    p = sub.add_parser("similarity", help="rescale a distance CSV into similarity scores")
    p.add_argument("--distances", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("plan", help="partition tasks from a similarity CSV")
    p.add_argument("--similarity", type=Path, required=True)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--method", choices=("greedy", "exact"), default="greedy")
    p.add_argument("--lambda-counts-singletons", action="store_true")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("merge", help="merge snapshots according to a plan")
    p.add_argument("--plan", type=Path, required=True)
    p.add_argument("--snapshots", type=Path, required=True, help="directory of <task_id>.gwm files")
    p.add_argument("--base", type=Path)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--density", type=float, default=0.2)
    p.add_argument("--lambda", dest="lambda_scale", type=float, default=1.0)
    p.add_argument("--fishers", type=Path, help="directory of <task_id>.gwm Fisher diagonals")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="score prediction CSVs")
    p.add_argument("--pred", type=Path, required=True, help="directory of <task_id>.csv prediction files")
    p.add_argument("--report", type=Path, required=True)

    p = sub.add_parser("compare", help="paired t-tests between two eval reports")
    p.add_argument("--before", type=Path, required=True)
    p.add_argument("--after", type=Path, required=True)
    p.add_argument("--out", type=Path, help="write JSON here instead of stdout")
    return ap


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (GWMergeError, ValueError) as exc:
        raise StageError(name, exc) from exc


def _expand(paths: list[Path]) -> list[Path]:
    files = []
    for p in paths:
        files.extend(iter_files(p, EMBEDDING_SUFFIXES) if p.is_dir() else [p])
    return files


def cmd_init(a) -> int:
    spec = FixtureSpec(n_tasks=a.tasks, n_points=a.points, target_clusters=a.target, seed=a.seed)
    path = write_fixture(a.directory, spec, a.planner, a.merge_method)
    load_config(path)
    print(path)
    return 0


def cmd_validate(a) -> int:
    cfg = _stage("config", load_config, a.config)
    print(f"ok: {len(cfg.tasks)} tasks, target {cfg.planner.target_clusters}, output {cfg.output_dir}")
    return 0


def cmd_run(a) -> int:
    cfg = _stage("config", load_config, a.config)
    cfg = _stage("config", apply_overrides, cfg, **_gw_overrides(a), target=a.target, lam=a.lam,
                 planner_method=a.planner_method, merge_method=a.merge_method, density=a.density,
                 lambda_scale=a.lambda_scale, output_dir=a.output_dir, base_snapshot=a.base_snapshot)
    if a.lambda_counts_singletons:
        cfg = replace(cfg, planner=replace(cfg.planner, lambda_counts_singletons=True))
    report = run_pipeline(cfg)
    m = report["merge"]
    print(f"plan {report['plan']['cluster_ids']} loss {report['plan']['loss']:.6g}")
    print(f"storage ratio {m['storage_reduction_ratio']:.6g}; outputs in {cfg.output_dir}")
    return 0


def cmd_gw_dist(a) -> int:
    if a.config is not None:
        cfg = _stage("config", load_config, a.config)
        cfg = _stage("config", apply_overrides, cfg, **_gw_overrides(a))
        paths = [t.embeddings for t in cfg.tasks]
        ids = cfg.task_ids
        dcfg, seed = cfg.distance, cfg.seed
    else:
        paths = _expand(a.embeddings)
        if len(paths) < 2:
            raise StageError("distances", ConfigError("need at least two embedding files or a --config"))
        ids = [p.stem for p in paths]
        gw = GwConfig(
            **{k: v for k, v in (("epsilon", a.epsilon), ("epsilon_rel", a.epsilon_rel), ("p", a.gw_p),
                                 ("max_outer_iter", a.max_iter), ("seed", a.seed)) if v is not None}
        )
        dcfg = DistanceConfig(gw=gw, subsample=(a.subsample if a.subsample is not None else 2000) or None,
                              normalize_distances=bool(a.normalize_distances), workers=a.workers or 1)
        seed = gw.seed
    spaces = []
    for path, rng in zip(paths, task_rngs(seed, len(paths))):
        emb = _stage("embeddings", read_embeddings, path)
        spaces.append(_stage("embeddings", build_metric_space, emb, dcfg.normalize_distances, dcfg.subsample, rng))
    pw = _stage("distances", pairwise_gw, spaces, dcfg.gw, dcfg.workers)
    write_square_matrix(SquareMatrix(pw.distances, tuple(ids)), a.out)
    bad = [f"{ids[i]}-{ids[j]}" for (i, j), r in sorted(pw.results.items()) if not r.converged]
    print(f"wrote {a.out} ({len(ids)} tasks); non-converged pairs: {', '.join(bad) or 'none'}")
    return 0


def cmd_similarity(a) -> int:
    d = _stage("similarity", read_square_matrix, a.distances)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        sim = _stage("similarity", to_similarity, d)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    write_square_matrix(sim.as_square(), a.out)
    print(f"wrote {a.out}; d_min={sim.d_min:.6g} d_max={sim.d_max:.6g}")
    return 0


def cmd_plan(a) -> int:
    sq = _stage("planner", read_square_matrix, a.similarity)
    sim = _stage("planner", similarity_from_square, sq)
    plan = _stage("planner", make_plan, sim, a.target, a.lam, a.method, a.lambda_counts_singletons)
    write_plan(plan, a.out, sq.labels)
    print(f"wrote {a.out}: {plan.clusters} loss {plan.loss:.6g}")
    return 0


def _by_task(directory: Path, ids: list[str] | None, what: str, head_prefixes=("classifier.", "head.")):
    files = iter_files(directory, (".gwm",))
    if ids is None:
        ids = [f.stem for f in files]
        chosen = files
    else:
        lookup = {f.stem: f for f in files}
        missing = [i for i in ids if i not in lookup]
        if missing:
            raise ConfigError(f"{what} directory {directory} has no file for tasks {missing}")
        chosen = [lookup[i] for i in ids]
    return ids, {k + 1: read_snapshot(f, head_prefixes) for k, f in enumerate(chosen)}


def cmd_merge(a) -> int:
    plan = _stage("merge", read_plan, a.plan)
    ids = _stage("merge", read_plan_task_ids, a.plan)
    ids, snaps = _stage("merge", _by_task, a.snapshots, ids, "snapshot")
    base = _stage("merge", read_snapshot, a.base) if a.base else None
    params: dict = {}
    if a.method == "ties":
        params = {"density": a.density, "lambda_scale": a.lambda_scale}
    if a.method == "fisher":
        if a.fishers is None:
            raise StageError("merge", ConfigError("--method fisher needs --fishers DIR"))
        _, fs = _stage("merge", _by_task, a.fishers, ids, "fisher", None)
        params["fishers"] = {t: FisherDiagonal(dict(s.tensors)) for t, s in fs.items()}
    bundle = _stage("merge", assemble_bundle, plan, snaps, base, a.method, params,
                    {k + 1: i for k, i in enumerate(ids)})
    write_bundle(bundle, a.out)
    pre = sum(s.nbytes("backbone") for s in snaps.values())
    print(f"wrote {a.out}: {len(bundle.backbones)} backbones, storage ratio {pre / bundle.backbone_nbytes():.6g}")
    return 0


def evaluate_directory(pred_dir: Path) -> dict:
    files = iter_files(pred_dir, (".csv",))
    if not files:
        raise ConfigError(f"no prediction CSVs in {pred_dir}")
    per_task, pairs = {}, []
    for f in files:
        m = task_metrics(read_predictions(f))
        per_task[f.stem] = m.to_dict()
        pairs.append((m, m.n_samples))
    return {"per_task": per_task, "weighted": weighted_mean(pairs)}


def cmd_eval(a) -> int:
    doc = _stage("eval", evaluate_directory, a.pred)
    write_json(doc, a.report)
    w = doc["weighted"]
    print(" ".join(f"{k}={w[k]:.4f}" for k in METRIC_NAMES))
    return 0


def compare_reports(before: dict, after: dict) -> dict:
    """Paired t-test per metric, pairing tasks present in both reports (sorted by id)."""
    common = sorted(set(before["per_task"]) & set(after["per_task"]))
    if len(common) < 2:
        raise LengthMismatch(f"need at least two tasks present in both reports, got {common}")
    out = {"tasks": common, "tests": {}}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for name in METRIC_NAMES:
            b = [before["per_task"][t][name] for t in common]
            c = [after["per_task"][t][name] for t in common]
            out["tests"][name] = paired_t_test(b, c).to_dict()
    return out


def cmd_compare(a) -> int:
    def load(p):
        try:
            return json.loads(Path(p).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise StageError("compare", ConfigError(f"cannot read report {p}: {exc}")) from exc

    result = _stage("compare", compare_reports, load(a.before), load(a.after))
    if a.out:
        write_json(result, a.out)
    else:
        print(json.dumps(result, indent=2))
    return 0


COMMANDS = {
    "init": cmd_init,
    "validate": cmd_validate,
    "run": cmd_run,
    "gw-dist": cmd_gw_dist,
    "similarity": cmd_similarity,
    "plan": cmd_plan,
    "merge": cmd_merge,
    "eval": cmd_eval,
    "compare": cmd_compare,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except GWMergeError as exc:
        print(f"error: [{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
