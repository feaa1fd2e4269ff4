"""On-disk formats: embeddings, model snapshots, square matrices, plans, predictions.

Binary layouts are little-endian and store reals as float32. In memory every
array is float64 (predictions are small integer matrices).

GWE1 (embeddings)::

    b"GWE1" | u32 rows | u32 cols | rows*cols f32, row-major

GWM1 (model snapshot)::

    b"GWM1" | u64 manifest_length | manifest (UTF-8 JSON) | payload

The manifest is a JSON array of ``{"name", "shape", "role"?, "offset",
"length"}`` objects. ``offset`` and ``length`` are byte counts relative to
the start of the payload region.
"""

from __future__ import annotations

import csv
import io
import json
import re
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    DuplicateTensorName,
    InvariantViolation,
    IoFailure,
    MalformedHeader,
    MalformedManifest,
    NonFiniteValue,
    ShapeDataMismatch,
    UntaggedTensor,
)
from .planner import MergePlan

EMB_MAGIC = b"GWE1"
SNAP_MAGIC = b"GWM1"
ROLES = ("backbone", "head")
DEFAULT_HEAD_PREFIXES = ("classifier.", "head.")

_F32 = np.dtype("<f4")


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def _write_bytes(path, data: bytes) -> None:
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _write_text(path, text: str) -> None:
    try:
        Path(path).write_text(text, encoding="utf-8", newline="")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def format_float(x: float) -> str:
    """Shortest decimal string that round-trips to the same float64."""
    return repr(float(x))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


# ---------------------------------------------------------------------------
# Embeddings


@dataclass(frozen=True)
class EmbeddingMatrix:
    """One row per response, one column per feature."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise InvariantViolation(f"embedding matrix must be 2-D and nonempty, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise NonFiniteValue("embedding matrix contains NaN or Inf")
        object.__setattr__(self, "data", _frozen(a))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)


def decode_embeddings(raw: bytes) -> EmbeddingMatrix:
    if raw[:4] == EMB_MAGIC:
        return _decode_embeddings_binary(raw)
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedHeader("not a GWE1 file and not UTF-8 CSV") from exc
    return _decode_embeddings_csv(text)


def _decode_embeddings_binary(raw: bytes) -> EmbeddingMatrix:
    if len(raw) < 12:
        raise MalformedHeader(f"GWE1 header truncated ({len(raw)} bytes)")
    rows, cols = struct.unpack_from("<II", raw, 4)
    if rows < 1 or cols < 1:
        raise MalformedHeader(f"GWE1 declares empty matrix {rows}x{cols}")
    payload = raw[12:]
    if len(payload) != 4 * rows * cols:
        raise DimensionMismatch(
            f"GWE1 header declares {rows}x{cols} but payload holds {len(payload) / 4:g} floats"
        )
    data = np.frombuffer(payload, dtype=_F32).reshape(rows, cols)
    if not np.all(np.isfinite(data)):
        raise NonFiniteValue("GWE1 payload contains NaN or Inf")
    return EmbeddingMatrix(data.astype(np.float64))


def _decode_embeddings_csv(text: str) -> EmbeddingMatrix:
    rows = []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or all(not c.strip() for c in row):
            continue
        try:
            values = [float(c) for c in row]
        except ValueError as exc:
            raise MalformedHeader(f"line {lineno}: {exc}") from exc
        if rows and len(values) != len(rows[0]):
            raise DimensionMismatch(f"line {lineno}: expected {len(rows[0])} columns, got {len(values)}")
        rows.append(values)
    if not rows:
        raise MalformedHeader("empty embedding CSV")
    data = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NonFiniteValue("embedding CSV contains NaN or Inf")
    return EmbeddingMatrix(data)


def encode_embeddings(matrix: EmbeddingMatrix) -> bytes:
    head = EMB_MAGIC + struct.pack("<II", matrix.rows, matrix.cols)
    return head + np.ascontiguousarray(matrix.data, dtype=_F32).tobytes()


def read_embeddings(path) -> EmbeddingMatrix:
    """Read a GWE1 binary or headerless CSV embedding file (sniffed by magic)."""
    return decode_embeddings(_read_bytes(path))


def write_embeddings(matrix: EmbeddingMatrix, path) -> None:
    """Write ``matrix``; ``.csv`` paths get text, anything else GWE1."""
    if str(path).lower().endswith(".csv"):
        lines = [",".join(format_float(v) for v in row) for row in matrix.data]
        _write_text(path, "\n".join(lines) + "\n")
    else:
        _write_bytes(path, encode_embeddings(matrix))


# ---------------------------------------------------------------------------
# Model snapshots


@dataclass(frozen=True)
class ModelSnapshot:
    """Named float tensors, each tagged ``backbone`` or ``head``.

    Tensor order is preserved; it defines the flat layout used by TIES trimming.
    """

    tensors: Mapping[str, np.ndarray]
    roles: Mapping[str, str]

    def __post_init__(self):
        tensors = {}
        for name, arr in self.tensors.items():
            if not isinstance(name, str) or not name:
                raise InvariantViolation(f"tensor names must be nonempty strings, got {name!r}")
            tensors[name] = _frozen(arr)
        roles = dict(self.roles)
        for name in tensors:
            if roles.get(name) not in ROLES:
                raise UntaggedTensor(f"tensor {name!r} has no valid role tag")
        extra = set(roles) - set(tensors)
        if extra:
            raise InvariantViolation(f"role tags for unknown tensors: {sorted(extra)}")
        object.__setattr__(self, "tensors", tensors)
        object.__setattr__(self, "roles", {n: roles[n] for n in tensors})

    def names(self, role: str | None = None) -> list[str]:
        return [n for n in self.tensors if role is None or self.roles[n] == role]

    @property
    def backbone(self) -> dict[str, np.ndarray]:
        return {n: self.tensors[n] for n in self.names("backbone")}

    @property
    def head(self) -> dict[str, np.ndarray]:
        return {n: self.tensors[n] for n in self.names("head")}

    def nbytes(self, role: str | None = None) -> int:
        """On-disk payload size (float32) of the selected tensors."""
        return sum(4 * self.tensors[n].size for n in self.names(role))

    @classmethod
    def from_parts(cls, backbone: Mapping[str, np.ndarray], head: Mapping[str, np.ndarray]) -> "ModelSnapshot":
        tensors = {**backbone, **head}
        if len(tensors) != len(backbone) + len(head):
            raise DuplicateTensorName("backbone and head share a tensor name")
        roles = {n: "backbone" for n in backbone} | {n: "head" for n in head}
        return cls(tensors, roles)

    def __eq__(self, other):
        if not isinstance(other, ModelSnapshot):
            return NotImplemented
        if list(self.tensors) != list(other.tensors) or self.roles != other.roles:
            return False
        return all(
            a.shape == b.shape and np.array_equal(a, b)
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )


def _resolve_role(entry: dict, head_prefixes: Sequence[str] | None) -> str:
    role = entry.get("role")
    if role is not None:
        if role not in ROLES:
            raise MalformedManifest(f"tensor {entry['name']!r}: unknown role {role!r}")
        return role
    if not head_prefixes:
        raise UntaggedTensor(f"tensor {entry['name']!r} has no role tag and prefix rule is disabled")
    if any(entry["name"].startswith(p) for p in head_prefixes):
        return "head"
    return "backbone"


def decode_snapshot(raw: bytes, head_prefixes: Sequence[str] | None = DEFAULT_HEAD_PREFIXES) -> ModelSnapshot:
    """Parse GWM1 bytes.

    Untagged tensors whose names start with one of ``head_prefixes`` become
    heads and all other untagged tensors become backbone. Passing
    ``head_prefixes=None`` requires every tensor to carry an explicit tag.
    """
    if len(raw) < 12 or raw[:4] != SNAP_MAGIC:
        raise MalformedManifest("missing GWM1 magic or truncated header")
    (mlen,) = struct.unpack_from("<Q", raw, 4)
    if 12 + mlen > len(raw):
        raise MalformedManifest(f"manifest length {mlen} exceeds file size")
    try:
        manifest = json.loads(raw[12 : 12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedManifest(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, list):
        raise MalformedManifest("manifest must be a JSON array")
    payload = raw[12 + mlen :]

    tensors: dict[str, np.ndarray] = {}
    roles: dict[str, str] = {}
    spans = []
    for entry in manifest:
        if not isinstance(entry, dict):
            raise MalformedManifest("manifest entries must be objects")
        try:
            name, shape = entry["name"], entry["shape"]
            offset, length = entry["offset"], entry["length"]
        except KeyError as exc:
            raise MalformedManifest(f"manifest entry missing key {exc}") from exc
        if not isinstance(name, str) or not name:
            raise MalformedManifest(f"bad tensor name {name!r}")
        if not isinstance(shape, list) or not all(isinstance(d, int) and d >= 0 for d in shape):
            raise MalformedManifest(f"tensor {name!r}: bad shape {shape!r}")
        if not all(isinstance(v, int) and not isinstance(v, bool) and v >= 0 for v in (offset, length)):
            raise MalformedManifest(f"tensor {name!r}: bad offset/length")
        if name in tensors:
            raise DuplicateTensorName(name)
        count = math.prod(shape)
        if length != 4 * count:
            raise ShapeDataMismatch(f"tensor {name!r}: shape {shape} needs {count} floats, manifest declares {length / 4:g}")
        if offset + length > len(payload):
            raise ShapeDataMismatch(f"tensor {name!r}: payload truncated")
        spans.append((offset, offset + length, name))
        data = np.frombuffer(payload, dtype=_F32, count=count, offset=offset).reshape(shape)
        tensors[name] = data.astype(np.float64)
        roles[name] = _resolve_role(entry, head_prefixes)

    spans.sort()
    for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
        if start < end:
            raise MalformedManifest(f"tensors {a!r} and {b!r} overlap")
    end = spans[-1][1] if spans else 0
    if end != len(payload):
        raise ShapeDataMismatch(f"payload has {len(payload)} bytes, manifest covers {end}")
    return ModelSnapshot(tensors, roles)


def encode_snapshot(snapshot: ModelSnapshot) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, arr in snapshot.tensors.items():
        buf = np.ascontiguousarray(arr, dtype=_F32).tobytes()
        manifest.append(
            {"name": name, "shape": list(arr.shape), "role": snapshot.roles[name], "offset": offset, "length": len(buf)}
        )
        chunks.append(buf)
        offset += len(buf)
    mbytes = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    return SNAP_MAGIC + struct.pack("<Q", len(mbytes)) + mbytes + b"".join(chunks)


def read_snapshot(path, head_prefixes: Sequence[str] | None = DEFAULT_HEAD_PREFIXES) -> ModelSnapshot:
    return decode_snapshot(_read_bytes(path), head_prefixes)


def write_snapshot(snapshot: ModelSnapshot, path) -> None:
    _write_bytes(path, encode_snapshot(snapshot))


# ---------------------------------------------------------------------------
# Square matrices (distance / similarity CSV with task-id headers)


@dataclass(frozen=True)
class SquareMatrix:
    data: np.ndarray
    labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
            raise InvariantViolation(f"square matrix required, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise NonFiniteValue("square matrix contains NaN or Inf")
        labels = tuple(str(x) for x in self.labels) or tuple(str(i + 1) for i in range(a.shape[0]))
        if len(labels) != a.shape[0]:
            raise InvariantViolation(f"{len(labels)} labels for a {a.shape[0]}x{a.shape[0]} matrix")
        object.__setattr__(self, "data", _frozen(a))
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other):
        if not isinstance(other, SquareMatrix):
            return NotImplemented
        return self.labels == other.labels and np.array_equal(self.data, other.data)


def write_square_matrix(matrix: SquareMatrix, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["", *matrix.labels])
    for label, row in zip(matrix.labels, matrix.data):
        w.writerow([label, *(format_float(v) for v in row)])
    _write_text(path, buf.getvalue())


def read_square_matrix(path) -> SquareMatrix:
    rows = list(csv.reader(io.StringIO(_read_text(path))))
    rows = [r for r in rows if r]
    if not rows:
        raise MalformedHeader(f"{path}: empty matrix file")
    labels = rows[0][1:]
    body = rows[1:]
    if len(body) != len(labels):
        raise DimensionMismatch(f"{path}: {len(labels)} column labels but {len(body)} rows")
    data = []
    for i, row in enumerate(body):
        if len(row) != len(labels) + 1:
            raise DimensionMismatch(f"{path}: row {i + 1} has {len(row) - 1} values")
        if row[0] != labels[i]:
            raise MalformedHeader(f"{path}: row label {row[0]!r} does not match column label {labels[i]!r}")
        try:
            data.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise MalformedHeader(f"{path}: row {i + 1}: {exc}") from exc
    return SquareMatrix(np.array(data, dtype=np.float64).reshape(len(labels), len(labels)), tuple(labels))


# ---------------------------------------------------------------------------
# Merge plans


def plan_to_json(plan: MergePlan, task_ids: Sequence[str] | None = None) -> str:
    """Serialise a plan; ``task_ids`` (optional) names tasks 1..T in order."""
    doc = {"target_clusters": plan.target_clusters, "clusters": [list(c) for c in plan.clusters]}
    if task_ids is not None:
        doc["task_ids"] = list(task_ids)
    if plan.loss is not None:
        doc["loss"] = plan.loss
    if plan.provenance is not None:
        doc["provenance"] = plan.provenance
    return json.dumps(doc, indent=2) + "\n"


def plan_from_json(text: str) -> MergePlan:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedManifest(f"plan is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "clusters" not in doc:
        raise MalformedManifest("plan must be an object with a 'clusters' key")
    clusters = [list(c) for c in doc["clusters"]]
    # Accept the shorthand {"singletons": [3, 5, 9]} alongside multi-task clusters.
    clusters += [[s] for s in doc.get("singletons", [])]
    target = doc.get("target_clusters", len(clusters))
    return MergePlan(
        clusters=clusters,
        target_clusters=target,
        loss=doc.get("loss"),
        provenance=doc.get("provenance"),
    )


def write_plan(plan: MergePlan, path, task_ids: Sequence[str] | None = None) -> None:
    _write_text(path, plan_to_json(plan, task_ids))


def read_plan_task_ids(path) -> list[str] | None:
    """Task ids stored alongside a plan, or None when the plan has none."""
    try:
        doc = json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise MalformedManifest(f"plan is not valid JSON: {exc}") from exc
    ids = doc.get("task_ids") if isinstance(doc, dict) else None
    return [str(i) for i in ids] if ids is not None else None


def read_plan(path) -> MergePlan:
    return plan_from_json(_read_text(path))


# ---------------------------------------------------------------------------
# Prediction files


@dataclass(frozen=True)
class PredictionFile:
    """Binary multi-label ground truth and predictions for one task."""

    task_id: str
    y_true: np.ndarray
    y_pred: np.ndarray
    label_names: tuple[str, ...] = ()
    sample_ids: tuple[str, ...] = ()

    def __post_init__(self):
        yt = np.asarray(self.y_true)
        yp = np.asarray(self.y_pred)
        if yt.ndim != 2 or yt.shape != yp.shape:
            raise DimensionMismatch(f"y_true {yt.shape} and y_pred {yp.shape} must be equal 2-D shapes")
        for a in (yt, yp):
            if not np.all((a == 0) | (a == 1)):
                raise InvariantViolation("prediction entries must be 0 or 1")
        yt = yt.astype(np.int8)
        yp = yp.astype(np.int8)
        yt.flags.writeable = False
        yp.flags.writeable = False
        names = tuple(self.label_names) or tuple(f"L{c + 1}" for c in range(yt.shape[1]))
        ids = tuple(self.sample_ids) or tuple(str(i) for i in range(yt.shape[0]))
        if len(names) != yt.shape[1] or len(ids) != yt.shape[0]:
            raise DimensionMismatch("label_names/sample_ids do not match matrix dimensions")
        object.__setattr__(self, "y_true", yt)
        object.__setattr__(self, "y_pred", yp)
        object.__setattr__(self, "label_names", names)
        object.__setattr__(self, "sample_ids", ids)

    @property
    def n_samples(self) -> int:
        return self.y_true.shape[0]

    @property
    def n_labels(self) -> int:
        return self.y_true.shape[1]

    def __eq__(self, other):
        if not isinstance(other, PredictionFile):
            return NotImplemented
        return (
            self.task_id == other.task_id
            and self.label_names == other.label_names
            and self.sample_ids == other.sample_ids
            and np.array_equal(self.y_true, other.y_true)
            and np.array_equal(self.y_pred, other.y_pred)
        )


def write_predictions(pred: PredictionFile, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", *(f"true_{n}" for n in pred.label_names), *(f"pred_{n}" for n in pred.label_names)])
    for sid, t, p in zip(pred.sample_ids, pred.y_true, pred.y_pred):
        w.writerow([sid, *map(int, t), *map(int, p)])
    _write_text(path, buf.getvalue())


def _strip(name: str, prefix: str) -> str:
    return name[len(prefix) :] if name.startswith(prefix) else name


def read_predictions(path, task_id: str | None = None) -> PredictionFile:
    """Read a prediction CSV; the task id defaults to the file stem."""
    rows = [r for r in csv.reader(io.StringIO(_read_text(path))) if r]
    if not rows or rows[0][0] != "sample_id":
        raise MalformedHeader(f"{path}: header must start with 'sample_id'")
    cols = rows[0][1:]
    if not cols or len(cols) % 2:
        raise MalformedHeader(f"{path}: expected an even, nonzero number of label columns")
    n_labels = len(cols) // 2
    names = tuple(_strip(c, "true_") for c in cols[:n_labels])
    pred_names = tuple(_strip(c, "pred_") for c in cols[n_labels:])
    if names != pred_names:
        raise MalformedHeader(f"{path}: y_true columns {names} do not match y_pred columns {pred_names}")
    ids, values = [], []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(cols) + 1:
            raise DimensionMismatch(f"{path}: line {i} has {len(row)} fields, expected {len(cols) + 1}")
        if any(v not in ("0", "1") for v in row[1:]):
            raise InvariantViolation(f"{path}: line {i} has a non-binary value")
        ids.append(row[0])
        values.append([int(v) for v in row[1:]])
    arr = np.array(values, dtype=np.int8).reshape(len(values), len(cols))
    return PredictionFile(
        task_id=task_id if task_id is not None else Path(path).stem,
        y_true=arr[:, :n_labels],
        y_pred=arr[:, n_labels:],
        label_names=names,
        sample_ids=tuple(ids),
    )


def _natural_key(p: Path):
    # "task10" sorts after "task9"
    return [(0, int(tok), "") if tok.isdigit() else (1, 0, tok) for tok in re.split(r"(\d+)", p.name)]


def iter_files(directory, suffixes: Iterable[str]) -> list[Path]:
    """Files in ``directory`` with one of ``suffixes``, in natural name order."""
    suffixes = tuple(suffixes)
    return sorted((p for p in Path(directory).iterdir() if p.is_file() and p.name.endswith(suffixes)), key=_natural_key)
