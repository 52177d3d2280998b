"""Statistics module tests: accumulation, matrix square root, FSD identities."""

import numpy as np
import pytest

from ganscope import stats as st


def random_segmaps(rng, n, classes=(0, 1, 2, 3), size=8):
    return [rng.choice(classes, size=(size, size)).astype(np.uint8) for _ in range(n)]


class TestAccumulate:
    def test_identical_maps_zero_covariance(self):
        seg = np.array([[0, 1], [1, 2]], dtype=np.uint8)
        rec = st.accumulate([seg, seg], [0, 1, 2])
        np.testing.assert_array_equal(rec.mu, [1.0, 2.0, 1.0])
        np.testing.assert_array_equal(rec.sigma, np.zeros((3, 3)))
        assert rec.count == 2

    def test_hand_computed_unbiased_variance(self):
        # class-0 counts are 0 and 2 -> mu 1, unbiased variance 2
        a = np.ones((1, 2), dtype=np.uint8)  # zero background pixels
        b = np.zeros((1, 2), dtype=np.uint8)  # two background pixels
        rec = st.accumulate([a, b], [0, 1])
        assert rec.mu[0] == pytest.approx(1.0)
        assert rec.sigma[0, 0] == pytest.approx(2.0)

    def test_streaming_equals_two_pass_batch(self):
        rng = np.random.default_rng(0)
        maps = random_segmaps(rng, 1000)
        ids = [0, 1, 2, 3]
        rec = st.accumulate(maps, ids)
        # independent two-pass oracle: stack counts, use numpy mean/cov
        counts = np.stack([
            np.array([(m == c).sum() for c in ids], dtype=np.float64) for m in maps
        ])
        mu = counts.mean(axis=0)
        sigma = np.cov(counts.T, ddof=1)
        assert np.abs(rec.mu - mu).max() <= 1e-9 * max(np.abs(mu).max(), 1.0)
        assert np.abs(rec.sigma - sigma).max() <= 1e-9 * max(np.abs(sigma).max(), 1.0)

    def test_parallel_merge_matches_single_pass(self):
        rng = np.random.default_rng(1)
        maps = random_segmaps(rng, 100)
        ids = [0, 1, 2, 3]
        whole = st.StatsAccumulator(ids)
        for m in maps:
            whole.add(m)
        half1, half2 = st.StatsAccumulator(ids), st.StatsAccumulator(ids)
        for m in maps[:50]:
            half1.add(m)
        for m in maps[50:]:
            half2.add(m)
        merged = half1.merge(half2).finalize()
        single = whole.finalize()
        np.testing.assert_allclose(merged.mu, single.mu, rtol=1e-12)
        np.testing.assert_allclose(merged.sigma, single.sigma, rtol=1e-12)

    def test_resolution_mismatch_rejected(self):
        acc = st.StatsAccumulator([0, 1])
        acc.add(np.zeros((4, 4), dtype=np.uint8))
        with pytest.raises(ValueError, match="resolution"):
            acc.add(np.zeros((8, 8), dtype=np.uint8))

    def test_empty_stream_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            st.accumulate([], [0, 1])


class TestMatrixSqrt:
    def test_identity(self):
        np.testing.assert_allclose(st.matrix_sqrt_psd(np.eye(4)), np.eye(4), atol=1e-12)

    def test_diagonal(self):
        np.testing.assert_allclose(
            st.matrix_sqrt_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-12
        )

    def test_reconstruction_on_random_psd(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(9, 9))
        m = a.T @ a
        s = st.matrix_sqrt_psd(m)
        assert np.linalg.norm(s @ s - m) / np.linalg.norm(m) < 1e-8
        np.testing.assert_allclose(s, s.T)

    @pytest.mark.parametrize("dim", [2, 9, 16, 33, 64])
    def test_reconstruction_up_to_64(self, dim):
        for seed in range(3):
            rng = np.random.default_rng(seed * 100 + dim)
            a = rng.normal(size=(dim, dim))
            m = a.T @ a
            s = st.matrix_sqrt_psd(m)
            assert np.linalg.norm(s @ s - m) / np.linalg.norm(m) < 1e-8

    def test_clamps_small_negative_eigenvalues(self):
        m = np.diag([1.0, -1e-12])
        s = st.matrix_sqrt_psd(m)
        assert s[1, 1] == 0.0

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError, match="symmetric"):
            st.matrix_sqrt_psd(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_indefinite_rejected(self):
        with pytest.raises(ValueError, match="indefinite"):
            st.matrix_sqrt_psd(np.diag([1.0, -0.5]))


def make_record(mu, sigma, ids=None, count=100):
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    return st.SegStatsRecord(ids or list(range(len(mu))), mu, sigma, count)


class TestFsd:
    def test_self_distance_zero(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(9, 9))
        rec = make_record(rng.uniform(0, 50, 9), a.T @ a)
        assert st.fsd(rec, rec) < 1e-9

    def test_one_class_scalar_formula(self):
        g = make_record([2.0], [[1.0]])
        t = make_record([0.0], [[1.0]])
        assert st.fsd(g, t) == pytest.approx(4.0, abs=1e-12)

    def test_diagonal_closed_form(self):
        g = make_record([3.0, 3.0], np.diag([4.0, 1.0]))
        t = make_record([3.0, 3.0], np.diag([1.0, 1.0]))
        # per class: (mu_g-mu_t)^2 + (sqrt(sg) - sqrt(st))^2 -> (2-1)^2 + 0
        assert st.fsd(g, t) == pytest.approx(1.0, abs=1e-9)

    def test_diagonal_closed_form_random(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            c = rng.integers(2, 10)
            mug, mut = rng.uniform(0, 30, c), rng.uniform(0, 30, c)
            sg, stv = rng.uniform(0.1, 20, c), rng.uniform(0.1, 20, c)
            g = make_record(mug, np.diag(sg))
            t = make_record(mut, np.diag(stv))
            expect = float(((mug - mut) ** 2).sum() + ((np.sqrt(sg) - np.sqrt(stv)) ** 2).sum())
            assert st.fsd(g, t) == pytest.approx(expect, rel=1e-9, abs=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        a1 = rng.normal(size=(6, 6))
        a2 = rng.normal(size=(6, 6))
        r1 = make_record(rng.uniform(0, 20, 6), a1.T @ a1)
        r2 = make_record(rng.uniform(0, 20, 6), a2.T @ a2)
        d12, d21 = st.fsd(r1, r2), st.fsd(r2, r1)
        assert abs(d12 - d21) / max(d12, d21) < 1e-9

    def test_nonnegative_on_random_pairs(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            a1 = rng.normal(size=(5, 5))
            a2 = rng.normal(size=(5, 5))
            r1 = make_record(rng.uniform(0, 10, 5), a1.T @ a1)
            r2 = make_record(rng.uniform(0, 10, 5), a2.T @ a2)
            assert st.fsd(r1, r2) >= 0.0

    def test_class_mismatch_rejected(self):
        r1 = make_record([1.0], [[1.0]], ids=[0])
        r2 = make_record([1.0], [[1.0]], ids=[1])
        with pytest.raises(ValueError, match="inventories"):
            st.fsd(r1, r2)


class TestHistogramReport:
    def test_equal_stats_equal_pairs(self):
        rec = make_record([5.0, 3.0, 8.0], np.eye(3))
        rep = st.histogram_report(rec, rec, top_k=3, clip_ceiling=10.0)
        for e in rep.entries:
            assert e.true_mean == e.gen_mean

    def test_ordering_desc_with_id_tiebreak(self):
        t = make_record([5.0, 7.0, 5.0, 9.0], np.eye(4), ids=[0, 1, 2, 3])
        rep = st.histogram_report(t, t, top_k=4, clip_ceiling=100.0)
        assert [e.class_id for e in rep.entries] == [3, 1, 0, 2]

    def test_withheld_class_present_in_report(self):
        t = make_record([10.0, 6.0], np.eye(2), ids=[0, 5])
        g = make_record([10.0, 0.0], np.eye(2), ids=[0, 5])
        rep = st.histogram_report(g, t, top_k=2, clip_ceiling=100.0)
        entry = next(e for e in rep.entries if e.class_id == 5)
        assert entry.gen_mean == 0.0 and entry.true_mean > 0.0

    def test_clip_flags(self):
        t = make_record([150.0, 5.0], np.eye(2))
        rep = st.histogram_report(t, t, top_k=2, clip_ceiling=100.0)
        assert rep.entries[0].clipped and not rep.entries[1].clipped

    def test_top_k_truncation_warns(self):
        rec = make_record([1.0, 2.0], np.eye(2))
        with pytest.warns(UserWarning, match="truncating"):
            rep = st.histogram_report(rec, rec, top_k=5, clip_ceiling=10.0)
        assert len(rep.entries) == 2

    def test_csv_and_svg_outputs(self, tmp_path):
        t = make_record([150.0, 5.0, 1.0], np.eye(3))
        g = make_record([120.0, 0.0, 2.0], np.eye(3))
        rep = st.histogram_report(g, t, top_k=3, clip_ceiling=100.0)
        st.report_to_csv(rep, tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().strip().splitlines()
        assert lines[0] == "class,true_mean,gen_mean,clipped"
        assert len(lines) == 4
        st.report_to_svg(rep, tmp_path / "h.svg")
        svg = (tmp_path / "h.svg").read_text()
        assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
        assert "150" in svg  # clipped value printed above the bar


class TestSensitivity:
    def test_identical_record_distance_zero(self):
        rng = np.random.default_rng(0)
        maps = random_segmaps(rng, 40)
        rec = st.accumulate(maps, [0, 1, 2, 3])
        assert st.fsd(rec, rec) < 1e-9

    def test_splits_are_disjoint_and_deterministic(self):
        rng = np.random.default_rng(1)
        maps = random_segmaps(rng, 60)
        v1, info1 = st.sensitivity_test(maps, 30, seed=9)
        v2, info2 = st.sensitivity_test(maps, 30, seed=9)
        assert v1 == v2 and info1 == info2
        assert v1 > 0.0

    def test_insufficient_data_rejected(self):
        with pytest.raises(ValueError, match="need"):
            st.sensitivity_test(random_segmaps(np.random.default_rng(0), 10), 6, 0)

    def test_floor_shrinks_with_sample_size(self):
        # averaged over 3 trials to damp split noise at these small sizes
        rng = np.random.default_rng(7)
        maps = random_segmaps(rng, 1200, size=8)
        small = np.mean([st.sensitivity_test(maps, 100, seed=s)[0] for s in range(3)])
        large = np.mean([st.sensitivity_test(maps, 600, seed=s)[0] for s in range(3)])
        assert large < small


class TestSerialization:
    def test_json_roundtrip(self, tmp_path):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(4, 4))
        rec = make_record(rng.uniform(0, 9, 4), a.T @ a, count=123)
        path = tmp_path / "rec.json"
        st.record_to_json(rec, path)
        back = st.record_from_json(path)
        assert back.class_ids == rec.class_ids
        assert back.count == 123
        np.testing.assert_array_equal(back.mu, rec.mu)
        np.testing.assert_array_equal(back.sigma, rec.sigma)
