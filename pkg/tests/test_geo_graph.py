import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mpstan.errors import GraphError, InputError, NumericError
from mpstan.geo_graph import (
    GravityHyper,
    PatchGraph,
    PatchMeta,
    build_graph,
    gravity_weight,
    haversine_distance,
    mobility_probability,
    read_distance_matrix,
    read_patch_meta,
    write_patch_meta,
)


def meta(pid, lat=0.0, lon=0.0, pop=1000.0):
    return PatchMeta(patch_id=pid, name=pid, population=pop, lat=lat, lon=lon)


class TestHaversine:
    def test_identical_points(self):
        assert haversine_distance(meta("a"), meta("b")) == 0.0

    def test_antipodal_on_equator(self):
        d = haversine_distance(meta("a", 0, 0), meta("b", 0, 180))
        assert d == pytest.approx(math.pi * 6371.0, rel=1e-12)
        assert d == pytest.approx(20015.1, abs=0.05)

    def test_one_degree_of_latitude(self):
        # along a meridian the great-circle distance is R * dphi exactly
        d = haversine_distance(meta("a", 40.0, -75.0), meta("b", 41.0, -75.0))
        assert d == pytest.approx(111.19492664455873, rel=1e-12)

    def test_symmetric_and_nonnegative(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a = meta("a", rng.uniform(-90, 90), rng.uniform(-180, 180))
            b = meta("b", rng.uniform(-90, 90), rng.uniform(-180, 180))
            assert haversine_distance(a, b) == haversine_distance(b, a) >= 0

    @pytest.mark.parametrize("lat,lon", [(91, 0), (-90.5, 0), (0, 180.01), (0, -181)])
    def test_out_of_range(self, lat, lon):
        with pytest.raises(InputError):
            haversine_distance(meta("a", lat, lon), meta("b"))


class TestGravityWeight:
    def test_zero_distance(self):
        assert gravity_weight(2, 3, 0.0, GravityHyper(r=1.0)) == 6.0

    def test_far_limit(self):
        assert gravity_weight(2, 3, 1e6, GravityHyper(r=1.0)) == 0.0

    def test_direct_evaluation(self):
        w = gravity_weight(1e6, 2e6, 100.0, GravityHyper(r=200.0))
        assert w == pytest.approx(2e12 * 0.6065306597126334, rel=1e-14)

    def test_exponents(self):
        w = gravity_weight(4.0, 9.0, 0.0, GravityHyper(alpha1=0.5, alpha2=0.5, r=1.0))
        assert w == pytest.approx(6.0)

    def test_overflow_is_numeric_error(self):
        with pytest.raises(NumericError):
            gravity_weight(1e300, 1e300, 0.0, GravityHyper(alpha1=2, alpha2=2, r=1.0))

    def test_needs_resolved_r(self):
        with pytest.raises(InputError):
            gravity_weight(1, 1, 1, GravityHyper())

    @settings(max_examples=200, deadline=None)
    @given(
        st.floats(1, 1e7), st.floats(1, 1e7), st.floats(0, 5000), st.floats(0, 5000), st.floats(1, 1000)
    )
    def test_monotone_in_distance_and_symmetric(self, pi, pj, d1, d2, r):
        h = GravityHyper(r=r)
        lo, hi = sorted((d1, d2))
        assert gravity_weight(pi, pj, lo, h) >= gravity_weight(pi, pj, hi, h)
        assert gravity_weight(pi, pj, lo, h) == gravity_weight(pj, pi, lo, h)


class TestHyper:
    def test_defaults(self):
        h = GravityHyper()
        assert (h.alpha1, h.alpha2, h.r, h.top_e) == (1.0, 1.0, None, 3)

    @pytest.mark.parametrize("kw", [{"r": 0.0}, {"r": -1.0}, {"top_e": 0}, {"top_e": 1.5}])
    def test_invalid(self, kw):
        with pytest.raises(InputError):
            GravityHyper(**kw)


def brute_force_adjacency(w, top_e):
    """Row i keeps j iff fewer than top_e others beat it (larger weight, or equal and lower index)."""
    n = w.shape[0]
    a = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            better = sum(
                1 for k in range(n) if k not in (i, j) and (w[i, k] > w[i, j] or (w[i, k] == w[i, j] and k < j))
            )
            if better < top_e:
                a[i, j] = 1.0
    return np.maximum(a, a.T)


class TestBuildGraph:
    def test_two_patches(self):
        g = build_graph([meta("a", 0, 0), meta("b", 0, 1)], GravityHyper(top_e=1))
        np.testing.assert_array_equal(g.adjacency, [[0, 1], [1, 0]])

    def test_collinear_equidistant(self):
        metas = [meta(k) for k in "abc"]
        d = np.array([[0, 1, 2], [1, 0, 1], [2, 1, 0]], dtype=float)
        g = build_graph(metas, GravityHyper(r=1.0, top_e=1), distance_override=d)
        np.testing.assert_array_equal(g.adjacency, [[0, 1, 0], [1, 0, 1], [0, 1, 0]])
        assert g.degree.tolist() == [1, 2, 1]
        assert g.neighbor_sets == ((1,), (0, 2), (1,))

    @pytest.mark.parametrize("seed", range(10))
    def test_random_against_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        metas = [meta(f"p{i}", rng.uniform(30, 45), rng.uniform(-100, -80), rng.integers(1e4, 1e6)) for i in range(5)]
        g = build_graph(metas, GravityHyper(top_e=2))
        np.testing.assert_array_equal(g.adjacency, brute_force_adjacency(g.weights, 2))

    def test_ties_prefer_lower_index(self):
        # equal populations and distances: every weight ties
        metas = [meta(k) for k in "abcd"]
        d = np.ones((4, 4)) - np.eye(4)
        g = build_graph(metas, GravityHyper(r=1.0, top_e=1), distance_override=d)
        # rows pick a->b, b->a, c->a, d->a
        np.testing.assert_array_equal(g.adjacency, [[0, 1, 1, 1], [1, 0, 0, 0], [1, 0, 0, 0], [1, 0, 0, 0]])

    def test_default_r_is_median_distance(self):
        metas = [meta(k) for k in "abc"]
        d = np.array([[0, 1, 5], [1, 0, 3], [5, 3, 0]], dtype=float)
        g = build_graph(metas, GravityHyper(top_e=1), distance_override=d)
        assert g.gravity.r == 3.0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 12), st.integers(0, 2**32 - 1), st.integers(1, 4))
    def test_symmetric_zero_diagonal(self, n, seed, top_e):
        rng = np.random.default_rng(seed)
        metas = [meta(f"p{i}", rng.uniform(-60, 60), rng.uniform(-170, 170), rng.uniform(1, 1e7)) for i in range(n)]
        top_e = min(top_e, n - 1)
        g = build_graph(metas, GravityHyper(top_e=top_e, r=5000.0))
        assert np.array_equal(g.adjacency, g.adjacency.T)
        assert not np.any(np.diag(g.adjacency))
        assert np.all(g.weights[g.adjacency == 1] > 0)
        assert np.all(g.degree >= 1)

    def test_duplicate_id(self):
        with pytest.raises(InputError, match="duplicate"):
            build_graph([meta("a"), meta("a", 0, 1)])

    def test_top_e_too_large(self):
        with pytest.raises(InputError):
            build_graph([meta("a"), meta("b", 0, 1)], GravityHyper(top_e=2))

    def test_isolated_patch_from_underflow(self):
        # with a tiny r every weight underflows to zero and no edge is valid
        metas = [meta("a", 0, 0), meta("b", 0, 90), meta("c", 0, 179)]
        with pytest.raises(GraphError):
            build_graph(metas, GravityHyper(r=1e-3, top_e=1))

    def test_bad_override(self):
        with pytest.raises(InputError):
            build_graph([meta("a"), meta("b")], GravityHyper(r=1.0, top_e=1), distance_override=[[0, 1], [2, 0]])


class TestPatchGraph:
    def test_mobility_probability(self):
        a = np.zeros((5, 5))
        a[0, 1:] = a[1:, 0] = 1
        g = PatchGraph.from_adjacency(a)
        assert mobility_probability(g, 0) == 0.25
        assert mobility_probability(g, 3) == 1.0

    def test_mobility_columns_sum_to_one(self):
        from conftest import random_symmetric_graph

        rng = np.random.default_rng(1)
        for _ in range(20):
            g = PatchGraph.from_adjacency(random_symmetric_graph(rng, int(rng.integers(2, 30))))
            for j in range(g.n):
                total = sum(mobility_probability(g, j) for _ in g.neighbor_sets[j])
                assert total == pytest.approx(1.0, abs=1e-12)
            np.testing.assert_allclose(g.mobility_matrix.sum(axis=0), 1.0, atol=1e-12)

    def test_isolated_rejected(self):
        with pytest.raises(GraphError):
            PatchGraph.from_adjacency([[0, 1, 0], [1, 0, 0], [0, 0, 0]])

    def test_asymmetric_rejected(self):
        with pytest.raises(GraphError):
            PatchGraph.from_adjacency([[0, 1], [0, 0]])

    def test_self_loop_rejected(self):
        with pytest.raises(GraphError):
            PatchGraph.from_adjacency([[1, 1], [1, 0]])

    def test_arrays_are_read_only(self):
        g = PatchGraph.from_adjacency([[0, 1], [1, 0]])
        with pytest.raises(ValueError):
            g.adjacency[0, 0] = 1


class TestPatchMetaIO:
    def test_round_trip(self, tmp_path):
        metas = [meta("a", 1.5, 2.25, 1234.0), meta("b", -3.0, 4.0, 99.0)]
        write_patch_meta(metas, tmp_path / "m.csv")
        assert read_patch_meta(tmp_path / "m.csv") == metas

    def test_bad_header(self, tmp_path):
        (tmp_path / "m.csv").write_text("id,name,population,lat,lon\na,a,1,0,0\n")
        with pytest.raises(InputError, match="header"):
            read_patch_meta(tmp_path / "m.csv")

    def test_nonpositive_population(self, tmp_path):
        (tmp_path / "m.csv").write_text("patch_id,name,population,lat,lon\na,a,0,0,0\n")
        with pytest.raises(InputError):
            read_patch_meta(tmp_path / "m.csv")

    def test_distance_matrix(self, tmp_path):
        (tmp_path / "d.csv").write_text(",b,a\nb,0,7\na,7,0\n")
        d = read_distance_matrix(tmp_path / "d.csv", ["a", "b"])
        np.testing.assert_array_equal(d, [[0, 7], [7, 0]])

    def test_distance_matrix_wrong_ids(self, tmp_path):
        (tmp_path / "d.csv").write_text(",a,c\na,0,7\nc,7,0\n")
        with pytest.raises(InputError):
            read_distance_matrix(tmp_path / "d.csv", ["a", "b"])
