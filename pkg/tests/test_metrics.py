import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kpdistill import metrics as MT
from kpdistill.geometry import Correspondences, homography_correspondences
from kpdistill.model import KeypointSet

from oracles import greedy_bruteforce, match_bruteforce, precision_recount


def corr(points, projected, valid):
    reason = np.where(np.asarray(valid), "ok", "out_of_bounds").astype("<U16")
    return Correspondences(np.asarray(points, float).reshape(-1, 2), np.asarray(projected, float).reshape(-1, 2), reason)


def unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def random_scene(rng, na, nb, spread=20.0):
    pa = rng.uniform(0, spread, (na, 2))
    pb = rng.uniform(0, spread, (nb, 2))
    proj_a = pa + rng.normal(scale=2.0, size=pa.shape)
    proj_b = pb + rng.normal(scale=2.0, size=pb.shape)
    va = rng.uniform(size=na) < 0.85
    vb = rng.uniform(size=nb) < 0.85
    return pa, pb, corr(pa, proj_a, va), corr(pb, proj_b, vb)


class TestMatchDescriptors:
    def test_self_match(self):
        eye = np.eye(6)[:4]
        m = MT.match_descriptors(eye, eye, mutual=True)
        assert [(i, j) for i, j, _ in m.pairs] == [(0, 0), (1, 1), (2, 2), (3, 3)]

    def test_prefers_orthogonal_over_negation(self):
        a = np.array([[1.0, 0.0]])
        b = np.array([[-1.0, 0.0], [0.0, 1.0]])
        m = MT.match_descriptors(a, b, mutual=False)
        assert m.pairs == [(0, 1, 0.0)]

    def test_ties_lowest_index(self):
        a = np.array([[1.0, 0.0]])
        b = np.array([[0.0, 1.0], [0.0, -1.0]])
        assert MT.match_descriptors(a, b, mutual=False).idx_b.tolist() == [0]

    def test_empty(self):
        assert len(MT.match_descriptors(np.zeros((0, 3)), unit_rows(np.random.default_rng(0), 4, 3))) == 0
        assert len(MT.match_descriptors(unit_rows(np.random.default_rng(0), 4, 3), np.zeros((0, 3)))) == 0

    @pytest.mark.parametrize("mutual", [True, False])
    @pytest.mark.parametrize("seed", range(10))
    def test_matches_bruteforce(self, seed, mutual):
        rng = np.random.default_rng(seed)
        a, b = unit_rows(rng, rng.integers(1, 50), 8), unit_rows(rng, rng.integers(1, 50), 8)
        m = MT.match_descriptors(a, b, mutual)
        assert list(zip(m.idx_a.tolist(), m.idx_b.tolist())) == match_bruteforce(a, b, mutual)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 30), st.integers(1, 30))
    def test_mutual_is_one_to_one(self, seed, na, nb):
        rng = np.random.default_rng(seed)
        m = MT.match_descriptors(unit_rows(rng, na, 4), unit_rows(rng, nb, 4), True)
        assert len(set(m.idx_a.tolist())) == len(m) == len(set(m.idx_b.tolist()))


class TestPrecision:
    def test_all_exact(self):
        pts = np.array([[1.0, 2.0], [10.0, 3.0]])
        m = MT.match_descriptors(np.eye(2), np.eye(2))
        r = MT.precision(m, corr(pts, pts, [True, True]), pts)
        assert (r.tp, r.fp, r.precision) == (2, 0, 1.0)

    def test_direction_asymmetry(self):
        rng = np.random.default_rng(0)
        p1 = np.array([[50.0, 50.0]])
        p2 = np.vstack([[50.0, 50.0], rng.uniform(100, 400, (99, 2))])
        d1 = np.array([[1.0, 0.0]])
        d2 = np.vstack([[1.0, 0.0], unit_rows(rng, 99, 2)])
        ident = lambda p: corr(p, p, np.ones(len(p), bool))
        r12 = MT.precision(MT.match_descriptors(d1, d2, mutual=False), ident(p1), p2)
        r21 = MT.precision(MT.match_descriptors(d2, d1, mutual=False), ident(p2), p1)
        assert r12.precision == 1.0
        assert r21.precision == pytest.approx(0.01)
        assert (r21.tp, r21.fp) == (1, 99)

    def test_invalid_reprojection_excluded(self):
        pts = np.array([[0.0, 0.0], [5.0, 5.0]])
        m = MT.match_descriptors(np.eye(2), np.eye(2))
        r = MT.precision(m, corr(pts, pts + [50, 0], [True, False]), pts)
        assert (r.tp, r.fp, r.excluded) == (0, 1, 1)

    def test_degenerate(self):
        r = MT.precision(MT.match_descriptors(np.zeros((0, 2)), np.zeros((0, 2))), corr([], [], []), np.zeros((0, 2)))
        assert r.precision == 0.0 and r.degenerate

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_recount(self, seed):
        rng = np.random.default_rng(seed)
        pa, pb, ca, _ = random_scene(rng, 30, 25)
        m = MT.match_descriptors(unit_rows(rng, 30, 5), unit_rows(rng, 25, 5), mutual=bool(seed % 2))
        r = MT.precision(m, ca, pb, 3.0)
        assert (r.tp, r.fp) == precision_recount(list(zip(m.idx_a, m.idx_b)), ca.projected, ca.valid, pb, 3.0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.1, 5), st.floats(0.1, 5))
    def test_threshold_monotone(self, seed, t1, t2):
        rng = np.random.default_rng(seed)
        pa, pb, ca, _ = random_scene(rng, 20, 20, spread=10)
        m = MT.match_descriptors(unit_rows(rng, 20, 3), unit_rows(rng, 20, 3), mutual=False)
        lo, hi = sorted((t1, t2))
        assert MT.precision(m, ca, pb, lo).tp <= MT.precision(m, ca, pb, hi).tp


class TestRepeatability:
    def test_identical(self):
        pts = np.array([[1.0, 1.0], [9.0, 4.0], [20.0, 7.0]])
        c = corr(pts, pts, np.ones(3, bool))
        r = MT.repeatability(pts, pts, c, c)
        assert (r.r_ab, r.r_ba, r.mean) == (1.0, 1.0, 1.0)

    def test_disjoint(self):
        pa, pb = np.array([[0.0, 0.0]]), np.array([[10.0, 0.0]])
        r = MT.repeatability(pa, pb, corr(pa, pa, [True]), corr(pb, pb, [True]))
        assert r.mean == 0.0 and not r.degenerate

    def test_one_to_one(self):
        # two a points near a single b point count once
        pa = np.array([[0.0, 0.0], [1.0, 0.0]])
        pb = np.array([[0.5, 0.0]])
        r = MT.repeatability(pa, pb, corr(pa, pa, [True, True]), corr(pb, pb, [True]))
        assert r.r_ab == 1.0 and r.r_ba == 0.5

    def test_greedy_takes_closest_first(self):
        proj = np.array([[0.0, 0.0], [2.0, 0.0]])
        pb = np.array([[1.9, 0.0], [4.5, 0.0]])
        # a1-b0 (0.1 px) is taken first; a0 is then left with b1 at 4.5 px
        assert MT.greedy_assignment(proj, pb, 3.0) == [(1, 0)]

    def test_no_valid_points(self):
        pa = np.array([[0.0, 0.0]])
        r = MT.repeatability(pa, pa, corr(pa, pa, [False]), corr(pa, pa, [False]))
        assert r.mean == 0.0 and r.degenerate

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_bruteforce(self, seed):
        rng = np.random.default_rng(seed)
        pa, pb, ca, cb = random_scene(rng, int(rng.integers(0, 40)), int(rng.integers(0, 40)))
        r = MT.repeatability(pa, pb, ca, cb, 3.0)
        hit_b, n_b = greedy_bruteforce(ca.projected, ca.valid, pb, cb.valid, 3.0)
        hit_a, n_a = greedy_bruteforce(cb.projected, cb.valid, pa, ca.valid, 3.0)
        assert r.r_ab == (hit_b / n_b if n_b else 0.0)
        assert r.r_ba == (hit_a / n_a if n_a else 0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31))
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        pa, pb, ca, cb = random_scene(rng, 15, 12, spread=12)
        da, db = unit_rows(rng, 15, 4), unit_rows(rng, 12, 4)
        base = MT.repeatability(pa, pb, ca, cb)
        base_p = MT.precision(MT.match_descriptors(da, db), ca, pb)
        ia, ib = rng.permutation(15), rng.permutation(12)
        ca2 = Correspondences(ca.source[ia], ca.projected[ia], ca.reason[ia])
        cb2 = Correspondences(cb.source[ib], cb.projected[ib], cb.reason[ib])
        perm = MT.repeatability(pa[ia], pb[ib], ca2, cb2)
        perm_p = MT.precision(MT.match_descriptors(da[ia], db[ib]), ca2, pb[ib])
        assert (base.r_ab, base.r_ba) == (perm.r_ab, perm.r_ba)
        assert (base_p.tp, base_p.fp) == (perm_p.tp, perm_p.fp)


class TestF1:
    @pytest.mark.parametrize("p,r,want", [(0.61, 0.55, 0.58), (0.65, 0.51, 0.57), (0.16, 1.0, 0.28)])
    def test_comparison_table(self, p, r, want):
        assert round(MT.f1(p, r), 2) == want
        assert round((p + r) / 2, 2) == 0.58

    @pytest.mark.parametrize(
        "rep,prec,hm",
        [(0.7515, 0.4482, 0.5615), (0.7192, 0.4492, 0.5530), (0.8829, 0.5500, 0.6778), (0.8563, 0.54359, 0.6650)],
    )
    def test_reported_harmonic_means(self, rep, prec, hm):
        assert round(MT.f1(prec, rep), 4) == hm

    def test_zero(self):
        assert MT.f1(0.0, 0.0) == 0.0

    @settings(max_examples=200)
    @given(st.floats(0, 1), st.floats(0, 1))
    def test_properties(self, p, r):
        v = MT.f1(p, r)
        assert v == pytest.approx(MT.f1(r, p), abs=1e-15)
        assert v <= (p + r) / 2 + 1e-15
        assert v <= min(1.0, p + r) + 1e-15
        if p + r > 0:
            assert v == pytest.approx(2 * p * r / (p + r), abs=1e-9)
        if abs(p - r) > 1e-6:
            assert v < (p + r) / 2
        assert MT.f1(p, p) == pytest.approx(p, abs=1e-15)


def kps(points, desc):
    pts = np.asarray(points, float)
    return KeypointSet(pts, np.ones(len(pts)), np.asarray(desc, float))


def shift_mapper(dx, shape=(64, 64)):
    h = np.array([[1, 0, dx], [0, 1, 0], [0, 0, 1.0]])
    return lambda p: homography_correspondences(h, p, shape)


class TestEvaluatePair:
    def test_scripted_five_points(self):
        # b is a shifted by +10 px in x; hand-worked values below
        pa = [(5, 5), (20, 5), (35, 20), (50, 40), (10, 50)]
        pb = [(15, 5), (31, 6), (45, 30), (2, 2), (20, 52)]
        e = np.eye(5)
        da = e
        db = e[[0, 2, 1, 3, 4]]  # b1 and b2 swap descriptors
        m = MT.evaluate_pair(kps(pa, da), kps(pb, db), shift_mapper(10), shift_mapper(-10))
        assert (m.tp_ab, m.fp_ab, m.tp_ba, m.fp_ba) == (2, 3, 2, 2)
        assert m.precision_ab == pytest.approx(0.4)
        assert m.precision_ba == pytest.approx(0.5)
        assert m.precision_mean == pytest.approx(0.45)
        assert m.repeatability_ab == pytest.approx(0.75)
        assert m.repeatability_ba == pytest.approx(0.6)
        assert m.repeatability_mean == pytest.approx(0.675)
        assert m.f1 == pytest.approx(0.54)
        assert (m.n_a, m.n_b, m.threshold_px) == (5, 5, 3.0)
        assert m.precision_mean == (m.precision_ab + m.precision_ba) / 2

    def test_same_frame(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(0, 60, (12, 2))
        d = unit_rows(rng, 12, 8)
        ident = shift_mapper(0)
        m = MT.evaluate_pair(kps(pts, d), kps(pts, d), ident, ident)
        assert (m.precision_mean, m.repeatability_mean, m.f1) == (1.0, 1.0, 1.0)
        assert not m.degenerate

    def test_no_detections_one_side(self):
        rng = np.random.default_rng(1)
        empty = KeypointSet(np.zeros((0, 2)), np.zeros(0), np.zeros((0, 8)))
        m = MT.evaluate_pair(kps(rng.uniform(0, 60, (5, 2)), unit_rows(rng, 5, 8)), empty, shift_mapper(0), shift_mapper(0))
        assert (m.precision_mean, m.repeatability_mean, m.f1) == (0.0, 0.0, 0.0)
        assert m.degenerate

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31))
    def test_rates_bounded(self, seed):
        rng = np.random.default_rng(seed)
        na, nb = rng.integers(0, 20, 2)
        m = MT.evaluate_pair(
            kps(rng.uniform(0, 64, (na, 2)), unit_rows(rng, na, 4)),
            kps(rng.uniform(0, 64, (nb, 2)), unit_rows(rng, nb, 4)),
            shift_mapper(3),
            shift_mapper(-3),
        )
        for v in (m.precision_ab, m.precision_ba, m.precision_mean, m.repeatability_ab, m.repeatability_ba, m.f1):
            assert 0.0 <= v <= 1.0


class TestAggregate:
    def test_f1_of_means(self):
        m1 = MT.PairMetrics(0.5, 0.7, 0.6, 0.9, 0.7, 0.8, MT.f1(0.6, 0.8), 1, 1, 1, 1, 2, 2)
        m2 = MT.PairMetrics(0.2, 0.2, 0.2, 0.5, 0.3, 0.4, MT.f1(0.2, 0.4), 1, 1, 1, 1, 2, 2, degenerate=True)
        a = MT.aggregate("x", [m1, m2])
        assert (a.precision, a.repeatability) == pytest.approx((0.4, 0.6))
        assert a.f1 == pytest.approx(0.48)
        assert a.arithmetic_mean == pytest.approx(0.5)
        assert (a.n_pairs, a.degenerate_pairs) == (2, 1)

    def test_empty(self):
        a = MT.aggregate("x", [])
        assert a.n_pairs == 0 and a.f1 == 0.0
