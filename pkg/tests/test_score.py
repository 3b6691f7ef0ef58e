import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from qsample.phantom import PhantomSpec, generate_phantom, phantom_truth
from qsample.score import (
    BD_CAP,
    ConnectionReport,
    assign_bundles,
    bhattacharyya_distance,
    bundle_points,
    connection_scores,
    psnr,
    write_report_csv,
    write_report_text,
)
from qsample.sphere import DirectionSet
from qsample.tract import Tractogram
from qsample.volume import DwiVolume


def make_volume(data):
    data = np.asarray(data, dtype=float)
    dirs = DirectionSet(np.linspace(0.1, 1.4, data.shape[3]), np.linspace(0, 5, data.shape[3]))
    return DwiVolume(data, dirs, 1000.0, (2, 2, 2), np.ones(data.shape[:3]))


class TestPsnr:
    def test_identical_gives_inf(self):
        x = make_volume(np.random.default_rng(0).random((4, 4, 4, 5)))
        assert psnr(x, x, np.ones((4, 4, 4), dtype=bool)) == math.inf

    def test_simple_arithmetic(self):
        # peak 1, RMSE 0.1 -> 20 dB
        x = make_volume(np.zeros((2, 2, 2, 1)))
        x.data[0, 0, 0, 0] = 1.0
        xhat = make_volume(x.data + 0.1)
        assert_allclose(psnr(xhat, x, np.ones((2, 2, 2), dtype=bool)), 20.0, rtol=1e-12)

    def test_halving_rmse_adds_six_db(self):
        rng = np.random.default_rng(1)
        x = make_volume(rng.random((3, 3, 3, 4)))
        noise = rng.random((3, 3, 3, 4)) * 0.2
        mask = np.ones((3, 3, 3), dtype=bool)
        p1 = psnr(make_volume(x.data + noise), x, mask)
        p2 = psnr(make_volume(x.data + 0.5 * noise), x, mask)
        assert_allclose(p2 - p1, 20.0 * math.log10(2.0), rtol=1e-10)

    def test_strictly_decreasing_in_rmse(self):
        rng = np.random.default_rng(2)
        x = make_volume(rng.random((3, 3, 3, 4)))
        noise = rng.random((3, 3, 3, 4))
        mask = np.ones((3, 3, 3), dtype=bool)
        values = [psnr(make_volume(x.data + s * noise), x, mask) for s in (0.05, 0.1, 0.2, 0.4)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_empty_mask_raises(self):
        x = make_volume(np.random.default_rng(0).random((2, 2, 2, 2)))
        with pytest.raises(ValueError, match="mask"):
            psnr(x, x, np.zeros((2, 2, 2), dtype=bool))


class TestBhattacharyya:
    def test_self_distance_zero(self):
        rng = np.random.default_rng(3)
        bundle = [rng.random((10, 3)) * 20 for _ in range(4)]
        assert bhattacharyya_distance(bundle, [p.copy() for p in bundle]) == 0.0

    def test_disjoint_supports_hit_cap(self):
        a = np.zeros((50, 3))
        b = np.ones((50, 3)) * 100.0
        assert bhattacharyya_distance(a, b) == BD_CAP

    def test_hand_evaluated_1d_case(self):
        # x masses (0.5, 0.5) vs (1, 0); y and z identical -> BC = (sqrt(.5)+2)/3
        a = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        b = np.array([[0.0, 0.0, 0.0], [0.25, 0.0, 0.0]])
        got = bhattacharyya_distance(a, b, bins=2)
        expected = -math.log((math.sqrt(0.5) + 1.0 + 1.0) / 3.0)
        assert_allclose(got, expected, rtol=1e-12)
        assert_allclose(got, 0.10273183249455636, rtol=1e-10)

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        a = rng.random((200, 3)) * 10
        b = rng.random((150, 3)) * 12
        assert_allclose(
            bhattacharyya_distance(a, b), bhattacharyya_distance(b, a), rtol=1e-12
        )

    def test_translation_invariance(self):
        rng = np.random.default_rng(5)
        a = rng.random((200, 3)) * 10
        b = rng.random((150, 3)) * 10
        shift = np.array([3.0, -2.0, 7.0])
        assert_allclose(
            bhattacharyya_distance(a + shift, b + shift),
            bhattacharyya_distance(a, b),
            rtol=1e-9,
        )

    @given(st.integers(0, 2**31))
    @settings(max_examples=25, deadline=None)
    def test_nonnegative_and_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(60, 3))
        b = rng.normal(size=(40, 3)) + rng.normal() * 0.5
        d1 = bhattacharyya_distance(a, b)
        d2 = bhattacharyya_distance(b, a)
        assert d1 >= 0.0
        assert_allclose(d1, d2, rtol=1e-12)

    def test_empty_raises(self):
        with pytest.raises(ValueError, match="empty"):
            bhattacharyya_distance([], np.ones((3, 3)))


def straight_truth():
    return phantom_truth(PhantomSpec("straight", dims=(16, 16, 16), n_dirs=6, seed=0))


def crossing_truth():
    return phantom_truth(
        PhantomSpec("crossing", dims=(32, 32, 32), n_dirs=6, seed=0, crossing_angle_deg=60)
    )


def spanning_streamline(bundle, n=40):
    """Polyline running the full centerline of a bundle."""
    a = bundle.centerline[0]
    b = bundle.centerline[-1]
    t = np.linspace(0.0, 1.0, n)[:, None]
    return a + t * (b - a)


class TestAssignBundles:
    def test_spanning_tracks_are_valid(self):
        truth = straight_truth()
        lines = [spanning_streamline(truth.bundles[0]) for _ in range(5)]
        labeled, classes = assign_bundles(Tractogram(lines), truth)
        assert classes == ["valid"] * 5
        assert labeled.labels == [truth.bundles[0].name] * 5

    def test_midway_termination_is_non_connecting(self):
        truth = straight_truth()
        full = spanning_streamline(truth.bundles[0])
        half = full[: len(full) // 2]
        _, classes = assign_bundles(Tractogram([half]), truth)
        assert classes == ["non-connecting"]

    def test_bundle_jump_is_invalid(self):
        truth = crossing_truth()
        a, b = truth.bundles
        # enters along bundle a, exits along bundle b: endpoint ROIs of two bundles
        jump = np.concatenate(
            [spanning_streamline(a)[:20], spanning_streamline(b)[20:]], axis=0
        )
        labeled, classes = assign_bundles(Tractogram([jump]), truth)
        # verified against the endpoint-membership oracle
        start, end = np.rint(jump[0]).astype(int), np.rint(jump[-1]).astype(int)
        assert a.roi_a[tuple(start)] and b.roi_b[tuple(end)]
        assert classes == ["invalid"]
        assert labeled.labels[0].startswith("invalid:")

    def test_same_roi_round_trip_is_invalid(self):
        truth = straight_truth()
        full = spanning_streamline(truth.bundles[0])
        loop = np.concatenate([full[:3], full[:3][::-1]], axis=0)
        _, classes = assign_bundles(Tractogram([loop]), truth)
        assert classes == ["invalid"]


class TestConnectionScores:
    def test_perfect_coverage(self):
        truth = straight_truth()
        bundle = truth.bundles[0]
        lines = [
            np.argwhere(bundle.mask).astype(float)[k::3]
            for k in range(3)
        ]
        # force the endpoints into the two ROIs so every line is valid
        start = np.argwhere(bundle.roi_a)[0].astype(float)
        end = np.argwhere(bundle.roi_b)[0].astype(float)
        lines = [np.concatenate([[start], l, [end]], axis=0) for l in lines]
        labeled, _ = assign_bundles(Tractogram(lines), truth)
        report = connection_scores(labeled, truth)
        assert report.vc == 1.0 and report.ic == 0.0 and report.nc == 0.0
        assert report.vb == 1 and report.ib == 0
        assert report.ol == 1.0 and report.or_ == 0.0 and report.f1 == 1.0

    def test_zero_streamlines(self):
        report = connection_scores(Tractogram([], labels=[]), straight_truth())
        assert (report.vc, report.ic, report.nc) == (0.0, 0.0, 1.0)
        assert report.vb == 0 and report.ib == 0

    def test_one_bundle_missed(self):
        truth = crossing_truth()
        a = truth.bundles[0]
        labeled, _ = assign_bundles(Tractogram([spanning_streamline(a)]), truth)
        report = connection_scores(labeled, truth)
        assert report.vb == 1
        assert report.vc == 1.0

    def test_fractions_sum_to_one(self):
        truth = crossing_truth()
        a, b = truth.bundles
        lines = [
            spanning_streamline(a),
            spanning_streamline(a)[: 10],
            np.concatenate([spanning_streamline(a)[:20], spanning_streamline(b)[20:]], axis=0),
        ]
        labeled, _ = assign_bundles(Tractogram(lines), truth)
        report = connection_scores(labeled, truth)
        assert abs(report.vc + report.ic + report.nc - 1.0) < 1e-9

    @given(st.integers(0, 2**31))
    @settings(max_examples=20, deadline=None)
    def test_randomized_tractograms_partition(self, seed):
        truth = straight_truth()
        rng = np.random.default_rng(seed)
        lines = [rng.uniform(0, 15, size=(rng.integers(2, 30), 3)) for _ in range(rng.integers(1, 40))]
        labeled, classes = assign_bundles(Tractogram(lines), truth)
        report = connection_scores(labeled, truth)
        assert abs(report.vc + report.ic + report.nc - 1.0) < 1e-9
        assert 0.0 <= report.ol <= 1.0 and 0.0 <= report.or_ <= 1.0 and 0.0 <= report.f1 <= 1.0

    def test_order_invariance(self):
        truth = crossing_truth()
        a, b = truth.bundles
        lines = [spanning_streamline(a), spanning_streamline(b), spanning_streamline(a)[:8]]
        labeled, _ = assign_bundles(Tractogram(lines), truth)
        rev = Tractogram(list(reversed(labeled.streamlines)), list(reversed(labeled.labels)))
        r1 = connection_scores(labeled, truth)
        r2 = connection_scores(rev, truth)
        assert r1 == r2

    def test_labels_required(self):
        with pytest.raises(ValueError, match="labels"):
            connection_scores(Tractogram([np.zeros((2, 3))]), straight_truth())

    def test_bundle_points_extraction(self):
        truth = straight_truth()
        line = spanning_streamline(truth.bundles[0])
        labeled, _ = assign_bundles(Tractogram([line]), truth)
        points = bundle_points(labeled, truth.bundles[0].name)
        assert points.shape == line.shape
        with pytest.raises(ValueError, match="no streamlines"):
            bundle_points(labeled, "absent")


class TestReports:
    def test_text_report(self, tmp_path):
        path = tmp_path / "r.txt"
        write_report_text(path, {"psnr_db": math.inf, "n": 3}, header={"bins": 32})
        text = path.read_text()
        assert "# bins: 32" in text
        assert "psnr_db: inf" in text
        assert "n: 3" in text

    def test_csv_report(self, tmp_path):
        path = tmp_path / "r.csv"
        write_report_csv(path, {"vc": 0.5, "ic": 0.25, "nc": 0.25})
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "vc,ic,nc"
        assert lines[1] == "0.5,0.25,0.25"

    def test_connection_report_validation(self):
        with pytest.raises(ValueError, match="sum"):
            ConnectionReport(0.5, 0.2, 0.2, 1, 0, 0.0, 0.0, 0.0)
