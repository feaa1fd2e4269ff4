import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gwmerge.errors import DegenerateRange, InvariantViolation
from gwmerge.gw import GwConfig, MetricSpace
from gwmerge.similarity import pairwise_gw, similarity_from_square, to_similarity
from gwmerge.tensor_io import SquareMatrix
from oracles import two_point_family_min


def sym(T, values):
    d = np.zeros((T, T))
    iu = np.triu_indices(T, 1)
    d[iu] = values
    return d + d.T


@st.composite
def distance_matrices(draw, min_T=2, max_T=7, grid=False):
    T = draw(st.integers(min_T, max_T))
    n = T * (T - 1) // 2
    if grid:
        # values 0.01 apart, so strict order survives float rounding
        vals = [v / 100 for v in draw(st.lists(st.integers(0, 10_000), min_size=n, max_size=n))]
    else:
        vals = draw(st.lists(st.floats(0, 100, allow_nan=False), min_size=n, max_size=n))
    return sym(T, vals)


def test_two_four_six():
    s = to_similarity(sym(3, [2.0, 4.0, 6.0])).scores
    assert s[0, 1] == 1.0 and s[1, 0] == 1.0
    assert abs(s[0, 2] - 0.5) <= 1e-12
    assert s[1, 2] == 0.0
    np.testing.assert_array_equal(np.diag(s), 1.0)


def test_degenerate_range_warns():
    with pytest.warns(DegenerateRange):
        sim = to_similarity(sym(3, [2.0, 2.0, 2.0]))
    assert sim.degenerate
    np.testing.assert_array_equal(sim.scores, np.ones((3, 3)))


@given(distance_matrices())
def test_pinning_and_range(d):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateRange)
        sim = to_similarity(d)
    s = sim.scores
    off = ~np.eye(len(d), dtype=bool)
    assert np.all((s[off] >= 0) & (s[off] <= 1))
    np.testing.assert_array_equal(s, s.T)
    if sim.d_max > sim.d_min:
        assert np.all(s[off][d[off] == sim.d_min] == 1.0)
        assert np.all(s[off][d[off] == sim.d_max] == 0.0)


@given(distance_matrices(min_T=3, grid=True))
def test_monotone_order_reversal(d):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateRange)
        sim = to_similarity(d)
    if sim.degenerate:
        return
    iu = np.triu_indices(len(d), 1)
    dv, sv = d[iu], sim.scores[iu]
    for a in range(len(dv)):
        for b in range(len(dv)):
            if dv[a] < dv[b]:
                assert sv[a] > sv[b]


@given(distance_matrices(), st.floats(0.01, 100), st.floats(0, 50))
def test_affine_invariance(d, scale, shift):
    off = ~np.eye(len(d), dtype=bool)
    d2 = d * scale + shift * off
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateRange)
        a, b = to_similarity(d), to_similarity(d2)
    if a.degenerate:
        return
    # guard against the range collapsing to rounding noise after scaling
    if (a.d_max - a.d_min) < 1e-6 * max(1.0, a.d_max):
        return
    np.testing.assert_allclose(a.scores, b.scores, rtol=0, atol=1e-12 * max(1.0, a.d_max / (a.d_max - a.d_min)))


@pytest.mark.parametrize(
    "d",
    [
        np.zeros((1, 1)),
        np.array([[0.0, 1.0], [2.0, 0.0]]),
        np.array([[1.0, 1.0], [1.0, 0.0]]),
        np.array([[0.0, np.nan], [np.nan, 0.0]]),
    ],
)
def test_rejects_invalid_distances(d):
    with pytest.raises(InvariantViolation):
        to_similarity(d)


def test_labels_carried():
    sim = to_similarity(SquareMatrix(sym(3, [1.0, 2.0, 3.0]), ("a", "b", "c")))
    assert sim.labels == ("a", "b", "c")
    back = similarity_from_square(sim.as_square())
    assert back.labels == ("a", "b", "c")
    np.testing.assert_array_equal(back.scores, sim.scores)


# ------------------------------------------------------------------ pairwise


def test_pairwise_identical_spaces():
    s = MetricSpace.uniform([[0, 1, 2], [1, 0, 1.5], [2, 1.5, 0]])
    pw = pairwise_gw([s, s])
    assert pw.distances[0, 1] < 1e-3
    assert pw.distances[0, 1] == pw.distances[1, 0]


def test_pairwise_one_point_spaces():
    s = MetricSpace.uniform([[0.0]])
    pw = pairwise_gw([s, s, s])
    np.testing.assert_array_equal(pw.distances, np.zeros((3, 3)))
    assert pw.all_converged


def test_pairwise_two_point_spaces_match_oracle():
    sides = [1.0, 2.0, 4.0]
    spaces = [MetricSpace.uniform([[0, a], [a, 0]]) for a in sides]
    pw = pairwise_gw(spaces, GwConfig(epsilon_rel=0.01))
    for i in range(3):
        for j in range(i + 1, 3):
            assert abs(pw.distances[i, j] - two_point_family_min(sides[i], sides[j])) < 1e-3
    np.testing.assert_array_equal(pw.distances, pw.distances.T)
    np.testing.assert_array_equal(np.diag(pw.distances), 0.0)
    assert len(pw.flags()) == 3


def test_pairwise_independent_of_workers():
    rng = np.random.default_rng(4)
    spaces = []
    for n in (3, 4, 5, 4):
        x = rng.normal(size=(n, 2))
        spaces.append(MetricSpace.uniform(np.linalg.norm(x[:, None] - x[None], axis=-1)))
    a = pairwise_gw(spaces, workers=1)
    b = pairwise_gw(spaces, workers=3)
    np.testing.assert_array_equal(a.distances, b.distances)


def test_pairwise_needs_two():
    with pytest.raises(InvariantViolation):
        pairwise_gw([MetricSpace.uniform([[0.0]])])
