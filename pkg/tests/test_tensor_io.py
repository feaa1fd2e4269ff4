import csv
import io
import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gwmerge.errors import (
    DimensionMismatch,
    DuplicateTensorName,
    FormatError,
    GWMergeError,
    MalformedHeader,
    MalformedManifest,
    NonFiniteValue,
    ShapeDataMismatch,
    UntaggedTensor,
)
from gwmerge.planner import MergePlan
from gwmerge.tensor_io import (
    EmbeddingMatrix,
    ModelSnapshot,
    PredictionFile,
    SquareMatrix,
    decode_embeddings,
    decode_snapshot,
    encode_embeddings,
    encode_snapshot,
    plan_from_json,
    plan_to_json,
    read_embeddings,
    read_plan,
    read_predictions,
    read_snapshot,
    read_square_matrix,
    write_embeddings,
    write_plan,
    write_predictions,
    write_snapshot,
    write_square_matrix,
)

f32s = st.floats(width=32, allow_nan=False, allow_infinity=False)


def gwm1(manifest, payload: bytes) -> bytes:
    m = json.dumps(manifest).encode()
    return b"GWM1" + struct.pack("<Q", len(m)) + m + payload


def small_snapshot():
    return ModelSnapshot.from_parts(
        {"encoder.w": np.array([[1.0, 2.0], [3.0, 4.0]]), "encoder.b": np.array([0.5, -0.25])},
        {"classifier.bias": np.array([1.0, -1.0, 0.0])},
    )


# ----------------------------------------------------------------- embeddings


def test_binary_identity_payload():
    raw = b"GWE1" + struct.pack("<II", 2, 2) + np.array([1, 0, 0, 1], "<f4").tobytes()
    m = decode_embeddings(raw)
    assert (m.rows, m.cols) == (2, 2)
    np.testing.assert_array_equal(m.data, [[1, 0], [0, 1]])


def test_header_payload_disagreement():
    raw = b"GWE1" + struct.pack("<II", 3, 4) + np.zeros(10, "<f4").tobytes()
    with pytest.raises(DimensionMismatch):
        decode_embeddings(raw)


def test_csv_embedding_matches_csv_module(tmp_path):
    text = "1.5,2.5\n3.5,4.5"
    p = tmp_path / "e.csv"
    p.write_text(text)
    ref = [[float(v) for v in row] for row in csv.reader(io.StringIO(text))]
    m = read_embeddings(p)
    np.testing.assert_array_equal(m.data, ref)
    np.testing.assert_array_equal(m.data, [[1.5, 2.5], [3.5, 4.5]])


@pytest.mark.parametrize("suffix", [".gwe", ".csv"])
def test_one_by_one_zero(tmp_path, suffix):
    p = tmp_path / f"z{suffix}"
    write_embeddings(EmbeddingMatrix(np.zeros((1, 1))), p)
    np.testing.assert_array_equal(read_embeddings(p).data, [[0.0]])


def test_non_finite_rejected():
    raw = b"GWE1" + struct.pack("<II", 1, 2) + np.array([1.0, np.nan], "<f4").tobytes()
    with pytest.raises(NonFiniteValue):
        decode_embeddings(raw)
    with pytest.raises(NonFiniteValue):
        decode_embeddings(b"1,inf\n")


def test_ragged_csv():
    with pytest.raises(DimensionMismatch):
        decode_embeddings(b"1,2\n3\n")


def test_little_endian_layout():
    raw = encode_embeddings(EmbeddingMatrix(np.array([[1.0, 2.0]])))
    assert raw[:4] == b"GWE1"
    assert struct.unpack("<II", raw[4:12]) == (1, 2)
    assert struct.unpack("<2f", raw[12:]) == (1.0, 2.0)


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6), elements=f32s))
def test_embedding_round_trip_binary(a):
    m = EmbeddingMatrix(a.astype(np.float64))
    assert decode_embeddings(encode_embeddings(m)) == m


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=5),
                  elements=st.floats(allow_nan=False, allow_infinity=False, min_value=-1e300, max_value=1e300)))
def test_embedding_round_trip_csv(tmp_path_factory, a):
    p = tmp_path_factory.mktemp("csv") / "m.csv"
    m = EmbeddingMatrix(a)
    write_embeddings(m, p)
    assert read_embeddings(p) == m


def test_embedding_truncation_at_every_byte():
    raw = encode_embeddings(EmbeddingMatrix(np.arange(6.0).reshape(2, 3)))
    for k in range(len(raw)):
        with pytest.raises(FormatError):
            decode_embeddings(raw[:k])


# ------------------------------------------------------------------ snapshots


def test_single_tagged_tensor():
    raw = gwm1([{"name": "encoder.w", "shape": [2, 2], "role": "backbone", "offset": 0, "length": 16}],
               np.array([1, 2, 3, 4], "<f4").tobytes())
    s = decode_snapshot(raw)
    assert s.names() == ["encoder.w"] and s.roles["encoder.w"] == "backbone"
    np.testing.assert_array_equal(s.backbone["encoder.w"], [[1, 2], [3, 4]])


def test_prefix_rule_assigns_head():
    raw = gwm1([{"name": "classifier.bias", "shape": [1], "offset": 0, "length": 4}], np.ones(1, "<f4").tobytes())
    assert decode_snapshot(raw, ("classifier.",)).roles["classifier.bias"] == "head"


def test_untagged_without_prefix_rule():
    raw = gwm1([{"name": "w", "shape": [1], "offset": 0, "length": 4}], np.ones(1, "<f4").tobytes())
    with pytest.raises(UntaggedTensor):
        decode_snapshot(raw, None)
    assert decode_snapshot(raw).roles["w"] == "backbone"


def test_shape_data_mismatch():
    raw = gwm1([{"name": "w", "shape": [3], "role": "backbone", "offset": 0, "length": 8}], np.ones(2, "<f4").tobytes())
    with pytest.raises(ShapeDataMismatch):
        decode_snapshot(raw)


def test_duplicate_name():
    entry = {"name": "w", "shape": [1], "role": "backbone", "offset": 0, "length": 4}
    raw = gwm1([entry, dict(entry, offset=4)], np.ones(2, "<f4").tobytes())
    with pytest.raises(DuplicateTensorName):
        decode_snapshot(raw)


def test_overlap_and_trailing_bytes():
    e = {"name": "a", "shape": [2], "role": "backbone", "offset": 0, "length": 8}
    with pytest.raises(MalformedManifest):
        decode_snapshot(gwm1([e, dict(e, name="b", offset=4)], np.ones(3, "<f4").tobytes()))
    with pytest.raises(ShapeDataMismatch):
        decode_snapshot(gwm1([e], np.ones(3, "<f4").tobytes()))


def test_bad_magic_and_json():
    with pytest.raises(MalformedManifest):
        decode_snapshot(b"XXXX" + bytes(20))
    with pytest.raises(MalformedManifest):
        decode_snapshot(b"GWM1" + struct.pack("<Q", 3) + b"{x]")


def test_snapshot_truncation_at_every_byte():
    raw = encode_snapshot(small_snapshot())
    for k in range(len(raw)):
        with pytest.raises(GWMergeError):
            decode_snapshot(raw[:k])


def test_snapshot_round_trip_file(tmp_path):
    s = small_snapshot()
    write_snapshot(s, tmp_path / "s.gwm")
    assert read_snapshot(tmp_path / "s.gwm", None) == s


@st.composite
def snapshots(draw):
    n = draw(st.integers(1, 5))
    names = draw(st.lists(st.text("abcxyz.", min_size=1, max_size=6), min_size=n, max_size=n, unique=True))
    tensors, roles = {}, {}
    for name in names:
        tensors[name] = draw(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=3),
                                        elements=f32s)).astype(np.float64)
        roles[name] = draw(st.sampled_from(["backbone", "head"]))
    return ModelSnapshot(tensors, roles)


@given(snapshots())
def test_snapshot_round_trip(s):
    assert decode_snapshot(encode_snapshot(s), None) == s


# --------------------------------------------------------------- plans / misc


def test_plan_round_trip_with_singletons(tmp_path):
    doc = {"clusters": [[1, 2, 8], [4, 6, 7]], "singletons": [3, 5, 9]}
    plan = plan_from_json(json.dumps(doc))
    assert plan.clusters == [[1, 2, 8], [3], [4, 6, 7], [5], [9]]
    assert plan.target_clusters == 5
    write_plan(plan, tmp_path / "p.json")
    assert read_plan(tmp_path / "p.json") == plan
    assert plan_from_json(plan_to_json(plan)) == plan


def test_plan_rejects_bad_partition():
    with pytest.raises(GWMergeError):
        plan_from_json('{"clusters": [[1, 2], [2, 3]]}')
    with pytest.raises(MalformedManifest):
        plan_from_json("[1, 2]")


def test_square_matrix_round_trip(tmp_path):
    m = SquareMatrix(np.array([[0.0, 0.1], [0.1, 0.0]]), ("a", "b"))
    write_square_matrix(m, tmp_path / "m.csv")
    back = read_square_matrix(tmp_path / "m.csv")
    assert back.labels == ("a", "b")
    np.testing.assert_array_equal(back.data, m.data)


@given(st.integers(1, 6), st.integers(1, 4), st.randoms(use_true_random=False))
def test_prediction_round_trip(tmp_path_factory, n, c, rnd):
    y_true = np.array([[rnd.randint(0, 1) for _ in range(c)] for _ in range(n)], np.int8)
    y_pred = np.array([[rnd.randint(0, 1) for _ in range(c)] for _ in range(n)], np.int8)
    pred = PredictionFile("t", y_true, y_pred, tuple(f"L{i}" for i in range(c)))
    p = tmp_path_factory.mktemp("pred") / "t.csv"
    write_predictions(pred, p)
    back = read_predictions(p)
    assert back.task_id == "t"
    np.testing.assert_array_equal(back.y_true, y_true)
    np.testing.assert_array_equal(back.y_pred, y_pred)
    assert back.label_names == pred.label_names


def test_prediction_rejects_non_binary(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("sample_id,true_a,pred_a\n0,2,1\n")
    with pytest.raises(GWMergeError):
        read_predictions(p)


def test_merge_plan_type_checks_target():
    with pytest.raises(GWMergeError):
        MergePlan([[1], [2]], target_clusters=1)
