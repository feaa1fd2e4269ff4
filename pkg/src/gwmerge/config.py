"""Pipeline configuration: a TOML file with a fixed schema.

Example::

    seed = 0
    output_dir = "out"
    base_snapshot = "base.gwm"

    [gw]
    epsilon_rel = 0.05
    p = 2.0
    subsample = 2000
    normalize_distances = false

    [planner]
    target_clusters = 5
    lambda = 0.0
    method = "greedy"

    [merger]
    method = "average"

    [[tasks]]
    id = "task1"
    embeddings = "emb/task1.gwe"
    snapshot = "snap/task1.gwm"
    predictions = "pred/task1.csv"

Relative paths are resolved against the directory holding the config file.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .errors import ConfigError, StageError, TargetOutOfRange
from .gw import GwConfig
from .merger import METHODS
from .tensor_io import DEFAULT_HEAD_PREFIXES

GW_KEYS = {f.name for f in fields(GwConfig)} - {"seed"}


@dataclass(frozen=True)
class TaskSpec:
    id: str
    embeddings: Path
    snapshot: Path
    predictions: Path | None = None
    fisher: Path | None = None


@dataclass(frozen=True)
class DistanceConfig:
    gw: GwConfig = GwConfig()
    subsample: int | None = 2000
    normalize_distances: bool = False
    workers: int = 1


@dataclass(frozen=True)
class PlannerConfig:
    target_clusters: int = 1
    lam: float = 0.0
    method: str = "greedy"
    lambda_counts_singletons: bool = False


@dataclass(frozen=True)
class MergerConfig:
    method: str = "average"
    density: float = 0.2
    lambda_scale: float = 1.0


@dataclass(frozen=True)
class PipelineConfig:
    tasks: tuple[TaskSpec, ...]
    output_dir: Path
    base_snapshot: Path | None = None
    distance: DistanceConfig = DistanceConfig()
    planner: PlannerConfig = PlannerConfig()
    merger: MergerConfig = MergerConfig()
    seed: int = 0
    head_prefixes: tuple[str, ...] = DEFAULT_HEAD_PREFIXES
    source: Path | None = field(default=None, compare=False)

    @property
    def task_ids(self) -> list[str]:
        return [t.id for t in self.tasks]


_TOP = {"seed", "output_dir", "base_snapshot", "head_prefixes", "gw", "planner", "merger", "tasks"}
_GW_SECTION = GW_KEYS | {"subsample", "normalize_distances", "workers"}
_PLANNER = {"target_clusters", "lambda", "method", "lambda_counts_singletons"}
_MERGER = {"method", "density", "lambda_scale"}
_TASK = {"id", "embeddings", "snapshot", "predictions", "fisher"}


def _line_of(text: str, key: str) -> int | None:
    pat = re.compile(rf"^\s*{re.escape(key)}\s*=", re.M)
    m = pat.search(text)
    return text.count("\n", 0, m.start()) + 1 if m else None


class _Reader:
    def __init__(self, text: str, origin: str):
        self.text = text
        self.origin = origin

    def fail(self, key: str, msg: str):
        leaf = key.rsplit(".", 1)[-1].split("[")[0]
        line = _line_of(self.text, leaf)
        where = f" (line {line})" if line else ""
        raise ConfigError(f"{self.origin}: key '{key}'{where}: {msg}")

    def check_keys(self, table: dict, allowed: set, prefix: str):
        for k in table:
            if k not in allowed:
                self.fail(f"{prefix}{k}", "unknown key")

    def get(self, table: dict, key: str, kind, default, prefix: str = ""):
        if key not in table:
            return default
        val = table[key]
        if kind is float and isinstance(val, int) and not isinstance(val, bool):
            val = float(val)
        if kind is int and isinstance(val, bool) or not isinstance(val, kind):
            self.fail(f"{prefix}{key}", f"expected {getattr(kind, '__name__', kind)}, got {type(val).__name__}")
        return val


def parse_config(text: str, base_dir: Path | str = ".", origin: str = "<config>", check_paths: bool = True) -> PipelineConfig:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{origin}: {exc}") from exc
    r = _Reader(text, origin)
    base_dir = Path(base_dir)

    def path(v):
        p = Path(v)
        return p if p.is_absolute() else base_dir / p

    r.check_keys(doc, _TOP, "")
    seed = r.get(doc, "seed", int, 0)
    output_dir = path(r.get(doc, "output_dir", str, "out"))
    base = doc.get("base_snapshot")
    base = path(r.get(doc, "base_snapshot", str, None)) if base is not None else None
    prefixes = tuple(r.get(doc, "head_prefixes", list, list(DEFAULT_HEAD_PREFIXES)))

    gw_t = r.get(doc, "gw", dict, {})
    r.check_keys(gw_t, _GW_SECTION, "gw.")
    gw_kwargs: dict[str, Any] = {}
    for f in fields(GwConfig):
        if f.name in gw_t:
            kind = {"epsilon": float, "epsilon_rel": float, "p": float, "outer_tol": float,
                    "sinkhorn_tol": float, "omega": float}.get(f.name, int)
            gw_kwargs[f.name] = r.get(gw_t, f.name, kind, None, "gw.")
    subsample = r.get(gw_t, "subsample", int, 2000, "gw.")
    try:
        gw = GwConfig(seed=seed, **gw_kwargs)
    except Exception as exc:
        r.fail("gw", str(exc))
    distance = DistanceConfig(
        gw=gw,
        subsample=subsample if subsample > 0 else None,
        normalize_distances=r.get(gw_t, "normalize_distances", bool, False, "gw."),
        workers=r.get(gw_t, "workers", int, 1, "gw."),
    )

    pl_t = r.get(doc, "planner", dict, {})
    r.check_keys(pl_t, _PLANNER, "planner.")
    planner = PlannerConfig(
        target_clusters=r.get(pl_t, "target_clusters", int, 1, "planner."),
        lam=r.get(pl_t, "lambda", float, 0.0, "planner."),
        method=r.get(pl_t, "method", str, "greedy", "planner."),
        lambda_counts_singletons=r.get(pl_t, "lambda_counts_singletons", bool, False, "planner."),
    )
    if planner.method not in ("greedy", "exact"):
        r.fail("planner.method", f"must be 'greedy' or 'exact', got {planner.method!r}")
    if planner.lam < 0:
        r.fail("planner.lambda", "must be >= 0")

    mg_t = r.get(doc, "merger", dict, {})
    r.check_keys(mg_t, _MERGER, "merger.")
    if "method" not in mg_t:
        r.fail("merger.method", f"required, one of {METHODS}")
    merger = MergerConfig(
        method=r.get(mg_t, "method", str, "average", "merger."),
        density=r.get(mg_t, "density", float, 0.2, "merger."),
        lambda_scale=r.get(mg_t, "lambda_scale", float, 1.0, "merger."),
    )
    if merger.method not in METHODS:
        r.fail("merger.method", f"must be one of {METHODS}, got {merger.method!r}")
    if not 0 < merger.density <= 1:
        r.fail("merger.density", "must lie in (0, 1]")

    tasks_t = r.get(doc, "tasks", list, [])
    tasks = []
    for k, t in enumerate(tasks_t):
        if not isinstance(t, dict):
            r.fail(f"tasks[{k}]", "each task must be a table")
        r.check_keys(t, _TASK, f"tasks[{k}].")
        for req in ("id", "embeddings", "snapshot"):
            if req not in t:
                r.fail(f"tasks[{k}].{req}", "missing required key")
        tasks.append(
            TaskSpec(
                id=r.get(t, "id", str, None, f"tasks[{k}]."),
                embeddings=path(r.get(t, "embeddings", str, None, f"tasks[{k}].")),
                snapshot=path(r.get(t, "snapshot", str, None, f"tasks[{k}].")),
                predictions=path(t["predictions"]) if "predictions" in t else None,
                fisher=path(t["fisher"]) if "fisher" in t else None,
            )
        )
    cfg = PipelineConfig(
        tasks=tuple(tasks),
        output_dir=output_dir,
        base_snapshot=base,
        distance=distance,
        planner=planner,
        merger=merger,
        seed=seed,
        head_prefixes=prefixes,
    )
    validate(cfg, origin, check_paths)
    return cfg


def validate(cfg: PipelineConfig, origin: str = "<config>", check_paths: bool = True) -> None:
    ids = cfg.task_ids
    if len(ids) < 2:
        raise ConfigError(f"{origin}: at least two [[tasks]] are required, got {len(ids)}")
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise ConfigError(f"{origin}: duplicate task ids {dupes}")
    T = len(ids)
    if not 1 <= cfg.planner.target_clusters <= T:
        raise StageError(
            "planner", TargetOutOfRange(f"target_clusters={cfg.planner.target_clusters} must lie in [1, {T}]")
        )
    if cfg.merger.method in ("task_arithmetic", "ties") and cfg.base_snapshot is None:
        raise ConfigError(f"{origin}: merger.method={cfg.merger.method!r} requires base_snapshot")
    if cfg.merger.method == "fisher":
        missing = [t.id for t in cfg.tasks if t.fisher is None]
        if missing:
            raise ConfigError(f"{origin}: merger.method='fisher' needs a fisher path for tasks {missing}")
    if not check_paths:
        return
    for t in cfg.tasks:
        for kind in ("embeddings", "snapshot", "predictions", "fisher"):
            p = getattr(t, kind)
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"{origin}: task '{t.id}': {kind} path does not exist: {p}")
    if cfg.base_snapshot is not None and not Path(cfg.base_snapshot).is_file():
        raise ConfigError(f"{origin}: base_snapshot path does not exist: {cfg.base_snapshot}")


def load_config(path, check_paths: bool = True) -> PipelineConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    cfg = parse_config(text, p.parent, str(p), check_paths)
    return replace(cfg, source=p)


def _rel(p: Path | None, base: Path) -> str | None:
    if p is None:
        return None
    try:
        return Path(p).resolve().relative_to(base.resolve()).as_posix()
    except ValueError:
        return str(Path(p).resolve())


def config_to_dict(cfg: PipelineConfig, base_dir: Path | str = ".") -> dict:
    base_dir = Path(base_dir)
    gw = {}
    defaults = GwConfig()
    for f in fields(GwConfig):
        v = getattr(cfg.distance.gw, f.name)
        if f.name == "seed" or v is None or v == getattr(defaults, f.name):
            continue
        gw[f.name] = v
    gw["subsample"] = cfg.distance.subsample or 0
    gw["normalize_distances"] = cfg.distance.normalize_distances
    gw["workers"] = cfg.distance.workers
    doc: dict[str, Any] = {
        "seed": cfg.seed,
        "output_dir": _rel(cfg.output_dir, base_dir),
        "head_prefixes": list(cfg.head_prefixes),
    }
    if cfg.base_snapshot is not None:
        doc["base_snapshot"] = _rel(cfg.base_snapshot, base_dir)
    doc["gw"] = gw
    doc["planner"] = {
        "target_clusters": cfg.planner.target_clusters,
        "lambda": cfg.planner.lam,
        "method": cfg.planner.method,
        "lambda_counts_singletons": cfg.planner.lambda_counts_singletons,
    }
    doc["merger"] = {"method": cfg.merger.method, "density": cfg.merger.density, "lambda_scale": cfg.merger.lambda_scale}
    tasks = []
    for t in cfg.tasks:
        entry = {"id": t.id, "embeddings": _rel(t.embeddings, base_dir), "snapshot": _rel(t.snapshot, base_dir)}
        if t.predictions is not None:
            entry["predictions"] = _rel(t.predictions, base_dir)
        if t.fisher is not None:
            entry["fisher"] = _rel(t.fisher, base_dir)
        tasks.append(entry)
    doc["tasks"] = tasks
    return doc


def write_config(cfg: PipelineConfig, path) -> None:
    p = Path(path)
    p.write_text(tomli_w.dumps(config_to_dict(cfg, p.parent)), encoding="utf-8")


def apply_overrides(cfg: PipelineConfig, **overrides) -> PipelineConfig:
    """Return ``cfg`` with CLI-style overrides applied; ``None`` values are ignored.

    Recognised keys: seed, epsilon, epsilon_rel, gw_p, max_iter, subsample,
    normalize_distances, workers, target, lam, planner_method, merge_method,
    density, lambda_scale, output_dir, base_snapshot.
    """
    o = {k: v for k, v in overrides.items() if v is not None}
    gw_map = {"epsilon": "epsilon", "epsilon_rel": "epsilon_rel", "gw_p": "p", "max_iter": "max_outer_iter"}
    gw = replace(cfg.distance.gw, **{gw_map[k]: o[k] for k in gw_map if k in o})
    if "seed" in o:
        gw = replace(gw, seed=o["seed"])
    distance = replace(
        cfg.distance,
        gw=gw,
        **{k: o[k] for k in ("normalize_distances", "workers") if k in o},
    )
    if "subsample" in o:
        distance = replace(distance, subsample=o["subsample"] or None)
    planner = replace(
        cfg.planner,
        **{dst: o[src] for src, dst in (("target", "target_clusters"), ("lam", "lam"), ("planner_method", "method")) if src in o},
    )
    merger = replace(
        cfg.merger,
        **{dst: o[src] for src, dst in (("merge_method", "method"), ("density", "density"), ("lambda_scale", "lambda_scale")) if src in o},
    )
    out = replace(cfg, distance=distance, planner=planner, merger=merger)
    if "seed" in o:
        out = replace(out, seed=o["seed"])
    if "output_dir" in o:
        out = replace(out, output_dir=Path(o["output_dir"]))
    if "base_snapshot" in o:
        out = replace(out, base_snapshot=Path(o["base_snapshot"]))
    validate(out, str(cfg.source or "<config>"), check_paths=False)
    return out
