import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from floorbench.baselines import SampleSet, complete
from floorbench.grid import BevGrid, eval_region
from floorbench.metrics import (
    DegenerateRecordError,
    aggregate,
    best_of_k_curve,
    boundary_partition,
    confusion,
    distributional_eval,
    energy_score,
    fidelity,
    metrics_csv,
    read_metrics_csv,
    sample_stats,
    score_record,
    variance_decomposition,
)
from oracles import chebyshev_partition, confusion_loop, distributional_direct, energy_direct, jaccard_loop
from records import RES, records, toy_record


def g(a):
    return BevGrid(np.asarray(a, bool), RES)


def stack_of(shape, k):
    return st.tuples(*[arrays(np.bool_, shape) for _ in range(k)])


grids_with_mask = st.tuples(st.integers(1, 9), st.integers(1, 9)).flatmap(
    lambda s: st.tuples(arrays(np.bool_, s), arrays(np.bool_, s), arrays(np.bool_, s))
)


class TestFidelity:
    def test_perfect(self):
        f = g(np.eye(3))
        assert fidelity(f, f, BevGrid.ones(3, 3, RES)) == (0.0, 1.0, 1.0)

    def test_four_cell_example(self):
        truth = g([[1, 1, 0, 0]])
        pred = g([[1, 0, 1, 0]])
        umr, iou, f1 = fidelity(pred, truth, BevGrid.ones(1, 4, RES))
        assert (umr, iou, f1) == (0.5, pytest.approx(1 / 3), 0.5)

    def test_all_obstacle(self):
        truth = g([[1, 1, 0, 1]])
        umr, iou, f1 = fidelity(BevGrid.zeros(1, 4, RES), truth, BevGrid.ones(1, 4, RES))
        assert iou == 0.0 and f1 == 0.0 and umr == 0.75

    def test_empty_mask(self):
        with pytest.raises(DegenerateRecordError):
            fidelity(g([[1]]), g([[1]]), g([[0]]))

    @given(grids_with_mask)
    def test_confusion_matches_loop(self, t):
        p, truth, m = t
        assert confusion(p, truth, m) == confusion_loop(p, truth, m)

    @given(grids_with_mask)
    def test_identities(self, t):
        p, truth, m = t
        assume(m.any())
        umr, iou, f1 = fidelity(g(p), g(truth), g(m))
        accuracy = np.count_nonzero((p == truth) & m) / np.count_nonzero(m)
        assert umr + accuracy == pytest.approx(1.0, abs=1e-12)
        assert iou <= f1 + 1e-15
        assert f1 == pytest.approx(2 * iou / (1 + iou), abs=1e-12)
        assert 0 <= umr <= 1 and 0 <= iou <= 1


class TestEnergy:
    def test_all_equal_truth(self):
        f = g(np.eye(4))
        assert energy_score([f, f, f], f, BevGrid.ones(4, 4, RES)) == 0.0

    def test_two_sample_example(self):
        # eight-cell mask; four cells cannot realise these three distances
        cells = lambda idx: g(np.isin(np.arange(8), idx).reshape(2, 4))  # noqa: E731
        a, b, truth = cells([0, 1, 2, 6, 7]), cells([0, 1, 2, 3, 4, 5, 7]), cells([0, 1, 2, 3, 4, 5, 6])
        mask = BevGrid.ones(2, 4, RES)
        assert jaccard_loop(a.cells, truth.cells, mask.cells) == 0.5
        assert jaccard_loop(b.cells, truth.cells, mask.cells) == 0.25
        assert jaccard_loop(a.cells, b.cells, mask.cells) == 0.5
        # first term 0.375; the ordered-pair sum counts d(a, b) twice over 2K(K-1) = 4
        assert energy_score([a, b], truth, mask) == pytest.approx(0.125, abs=1e-15)
        assert energy_direct([a.cells, b.cells], truth.cells, mask.cells) == pytest.approx(0.125, abs=1e-15)

    @settings(max_examples=80)
    @given(st.tuples(st.integers(1, 6), st.integers(1, 6)).flatmap(
        lambda s: st.tuples(st.integers(1, 4).flatmap(lambda k: stack_of(s, k)), arrays(np.bool_, s), arrays(np.bool_, s))))
    def test_matches_direct_sum(self, t):
        samples, truth, m = t
        assume(m.any())
        got = energy_score([g(s) for s in samples], g(truth), g(m))
        assert got == pytest.approx(energy_direct(samples, truth, m), abs=1e-12)

    @given(grids_with_mask, st.integers(1, 5))
    def test_replicated_sample_is_one_minus_iou(self, t, k):
        p, truth, m = t
        # with an empty masked union the distance is 0 but the IoU is also 0
        assume(np.any((p | truth) & m))
        iou = fidelity(g(p), g(truth), g(m)).iou
        assert energy_score([g(p)] * k, g(truth), g(m)) == pytest.approx(1 - iou, abs=1e-12)

    def test_empty_union_convention(self):
        z = BevGrid.zeros(2, 2, RES)
        mask = BevGrid.ones(2, 2, RES)
        assert energy_score([z, z], z, mask) == 0.0
        assert fidelity(z, z, mask).iou == 0.0


class TestSampleStats:
    def test_identical(self):
        s = g(np.eye(3))
        st_ = sample_stats([s, s, s], g(np.ones((3, 3))), BevGrid.ones(3, 3, RES))
        assert st_.var_mean == 0.0 and st_.iou_best == st_.iou_mean

    def test_max_variance(self):
        a = g(np.eye(3))
        b = g(~np.eye(3, dtype=bool))
        assert sample_stats([a, b], a, BevGrid.ones(3, 3, RES)).var_mean == 0.25

    @given(st.tuples(st.integers(1, 6), st.integers(1, 6)).flatmap(
        lambda s: st.tuples(stack_of(s, 4), arrays(np.bool_, s), arrays(np.bool_, s))))
    def test_prefix_monotone(self, t):
        samples, truth, m = t
        assume(m.any())
        grids = [g(s) for s in samples]
        curve = best_of_k_curve(grids, g(truth), g(m))
        assert all(x <= y for x, y in zip(curve, curve[1:]))
        assert sample_stats(grids[:2], g(truth), g(m)).iou_best <= sample_stats(grids, g(truth), g(m)).iou_best
        full = sample_stats(grids, g(truth), g(m))
        assert full.iou_best >= full.iou_mean and 0 <= full.var_mean <= 0.25
        assert curve[-1] == full.iou_best


class TestBoundary:
    def test_full_grid_radius_one(self):
        f = BevGrid.ones(8, 8, RES)
        interior, boundary = boundary_partition(f, f, 1)
        expected = np.ones((8, 8), bool)
        expected[2:6, 2:6] = False
        assert np.array_equal(boundary.cells, expected)
        assert np.array_equal(interior.cells, ~expected)

    def test_empty_floor(self):
        interior, boundary = boundary_partition(BevGrid.zeros(5, 5, RES), BevGrid.ones(5, 5, RES))
        assert interior.count() == boundary.count() == 0

    def test_bad_radius(self):
        with pytest.raises(ValueError):
            boundary_partition(BevGrid.ones(2, 2, RES), BevGrid.ones(2, 2, RES), 0)

    def test_half_floor_radius_seven(self):
        f = np.zeros((16, 16), bool)
        f[:, :8] = True
        u = np.ones((16, 16), bool)
        interior, boundary = boundary_partition(g(f), g(u), 7)
        ref_i, ref_b = chebyshev_partition(f, u, 7)
        assert np.array_equal(interior.cells, ref_i) and np.array_equal(boundary.cells, ref_b)

    @settings(max_examples=60, deadline=None)
    @given(st.tuples(st.integers(2, 14), st.integers(2, 14)).flatmap(
        lambda s: st.tuples(arrays(np.bool_, s), arrays(np.bool_, s))), st.integers(1, 4))
    def test_matches_chebyshev_oracle(self, t, radius):
        f, u = t
        interior, boundary = boundary_partition(g(f), g(u), radius)
        ref_i, ref_b = chebyshev_partition(f, u, radius)
        assert np.array_equal(interior.cells, ref_i)
        assert np.array_equal(boundary.cells, ref_b)
        assert not (interior & boundary).any()
        assert interior.issubset(g(u)) and boundary.issubset(g(u))


class TestVarianceDecomposition:
    def setup_method(self):
        f = np.zeros((32, 32), bool)
        f[4:28, 4:28] = True
        self.f = g(f)
        self.u = BevGrid.ones(32, 32, RES)

    def test_identical_samples(self):
        i, b = boundary_partition(self.f, self.u, 3)
        assert variance_decomposition([self.f, self.f], i, b) == (0.0, 0.0)

    def test_boundary_only_difference(self):
        i, b = boundary_partition(self.f, self.u, 3)
        other = self.f.cells.copy()
        other[4, 4:28] = False  # a boundary row
        vi, vb = variance_decomposition([self.f, g(other)], i, b)
        assert vi == 0.0 and vb > 0

    def test_empty_mask_and_overlap(self):
        z = BevGrid.zeros(32, 32, RES)
        assert variance_decomposition([self.f], z, z) == (None, None)
        with pytest.raises(ValueError):
            variance_decomposition([self.f], self.u, self.u)

    def test_radius_sweep_is_smooth(self):
        rng = np.random.default_rng(3)
        # samples jitter the floor edge by one cell; interior never varies
        samples = []
        for _ in range(4):
            a = np.zeros((32, 32), bool)
            lo, hi = 4 + rng.integers(-1, 2, 2), 28 + rng.integers(-1, 2, 2)
            a[lo[0]:hi[0], lo[1]:hi[1]] = True
            samples.append(g(a))
        ratios = []
        for r in range(5, 10):
            vi, vb = variance_decomposition(samples, *boundary_partition(self.f, self.u, r))
            ratios.append(vb / max(vi, 1e-6))
            assert vb > 0 and vi == 0.0
        assert all(x > 0 for x in ratios)


class TestDistributional:
    def setup_method(self):
        rng = np.random.default_rng(1)
        self.sols = [g(rng.random((6, 6)) < 0.5) for _ in range(5)]
        self.mask = BevGrid.ones(6, 6, RES)

    def test_perfect_cover(self):
        d = distributional_eval(list(reversed(self.sols)), self.sols, self.mask)
        assert d.d_sym == 0.0 and d.coverage == 1.0 and d.diversity > 0

    def test_one_of_five(self):
        d = distributional_eval([self.sols[2]], self.sols, self.mask)
        assert d.d_pg == 0.0 and d.coverage == pytest.approx(0.2) and d.diversity is None

    def test_empty_inputs(self):
        with pytest.raises(ValueError):
            distributional_eval([], self.sols, self.mask)
        with pytest.raises(ValueError):
            distributional_eval(self.sols, [], self.mask)

    def test_two_by_two_enumeration(self):
        row = lambda bits: g(np.array(bits, bool).reshape(1, 4))  # noqa: E731
        preds = [row([1, 1, 0, 0]), row([0, 0, 1, 1])]
        sols = [row([1, 1, 1, 0]), row([0, 0, 0, 1])]
        mask = BevGrid.ones(1, 4, RES)
        # distances: p0-s0 1/3, p0-s1 1, p1-s0 3/4, p1-s1 1/2
        d = distributional_eval(preds, sols, mask)
        assert d.d_pg == pytest.approx((1 / 3 + 1 / 2) / 2)
        assert d.d_gp == pytest.approx((1 / 3 + 1 / 2) / 2)
        assert d.coverage == 0.0 and d.diversity == 1.0

    @settings(max_examples=60)
    @given(st.tuples(st.integers(1, 5), st.integers(1, 5)).flatmap(
        lambda s: st.tuples(st.integers(1, 4).flatmap(lambda k: stack_of(s, k)),
                            st.integers(1, 4).flatmap(lambda k: stack_of(s, k)), arrays(np.bool_, s))))
    def test_matches_direct(self, t):
        preds, sols, m = t
        got = distributional_eval([g(p) for p in preds], [g(s) for s in sols], g(m))
        ref = distributional_direct(preds, sols, m)
        for a, b in zip(got, ref):
            assert (a is None and b is None) or a == pytest.approx(b, abs=1e-12)


class TestScoring:
    @settings(max_examples=40, deadline=None)
    @given(records(need_observed=True, need_eval=True), st.integers(1, 4))
    def test_record_invariants(self, rec, k):
        for method in ("all_floor", "nn_prop", "uniform_random"):
            m = score_record(rec, complete(method, rec, k=k, seed=2), radius=2)
            for f in ("umr", "iou", "f1", "iou_best", "iou_mean", "mes"):
                assert 0.0 <= getattr(m, f) <= 1.0
            for f in ("var_mean", "var_interior", "var_boundary"):
                val = getattr(m, f)
                assert val is None or 0.0 <= val <= 0.25
            assert m.iou_best >= m.iou_mean - 1e-15

    def test_deterministic_mes_matches_iou(self):
        rng = np.random.default_rng(7)
        f_star = rng.random((20, 20)) < 0.7
        u = rng.random((20, 20)) < 0.5
        rec = toy_record(f_star, np.ones((20, 20)), u)
        m = score_record(rec, complete("nn_prop", rec, k=4))
        assert m.mes == pytest.approx(1 - m.iou, abs=1e-12)
        assert m.var_mean == 0.0

    def test_degenerate_record(self):
        rec = toy_record(np.ones((3, 3)), np.ones((3, 3)), np.zeros((3, 3)))
        with pytest.raises(DegenerateRecordError):
            score_record(rec, complete("all_floor", rec))

    def test_csv_roundtrip_and_aggregate(self):
        rng = np.random.default_rng(2)
        rows = []
        for i in range(6):
            f_star = rng.random((10, 10)) < 0.6
            u = rng.random((10, 10)) < 0.5
            rec = toy_record(f_star, np.ones((10, 10)), u, obs_id=f"o{i}")
            rows.append(score_record(rec, complete("uniform_random", rec, k=3, seed=i), radius=1,
                                     split="test" if i % 2 else "val", tier="Easy"))
        text = metrics_csv(rows)
        back = read_metrics_csv(text)
        assert metrics_csv(back) == text
        agg = {r.group: r for r in aggregate(back, ["method_tag", "split"])}
        for split in ("test", "val"):
            members = [r for r in rows if r.split == split]
            row = agg[("uniform_random", split)]
            assert row.n == 3
            ious = [r.iou for r in members]
            assert row.mean["iou"] == pytest.approx(sum(ious) / 3, abs=1e-12)
            assert row.std["iou"] == pytest.approx(float(np.std(ious)), abs=1e-12)

    def test_aggregate_skips_errors(self):
        rec = toy_record(np.eye(4), np.ones((4, 4)), np.ones((4, 4)))
        good = score_record(rec, complete("all_floor", rec), radius=1)
        bad = score_record(rec, complete("all_obstacle", rec), radius=1)
        bad.error = "degenerate"
        (row,) = aggregate([good, bad], ["split"])
        assert row.n == 1 and row.mean["iou"] == good.iou and math.isclose(row.std["iou"], 0.0)
