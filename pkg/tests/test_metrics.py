"""Metrics checked against a naive per-pair reference and hand geometry."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from moeflow import datasets, flow, metrics, nnet
from moeflow.errors import (
    DimensionMismatchError,
    UnsupportedSpecError,
    ValidationError,
)

BANDWIDTHS = metrics.DEFAULT_BANDWIDTHS


def naive_mmd2(x, y, bandwidths=BANDWIDTHS):
    """Three explicit double loops; the slow mirror of the estimator."""

    def k(a, b):
        d2 = float(np.sum((a - b) ** 2))
        return sum(np.exp(-d2 / (2.0 * s * s)) for s in bandwidths)

    n, m = len(x), len(y)
    xx = sum(k(x[i], x[j]) for i in range(n) for j in range(n) if i != j)
    yy = sum(k(y[i], y[j]) for i in range(m) for j in range(m) if i != j)
    xy = sum(k(x[i], y[j]) for i in range(n) for j in range(m))
    return xx / (n * (n - 1)) + yy / (m * (m - 1)) - 2.0 * xy / (n * m)


class TestMmdConfig:
    def test_default_bandwidth_set(self):
        assert metrics.MmdConfig().bandwidths == (0.2, 0.5, 1.0, 2.0, 5.0)

    def test_rejects_empty_and_nonpositive(self):
        with pytest.raises(ValidationError):
            metrics.MmdConfig(())
        with pytest.raises(ValidationError):
            metrics.MmdConfig((1.0, 0.0))


class TestMmd2:
    def test_identical_point_masses_give_zero(self):
        x = np.zeros((2, 1))
        assert metrics.mmd2_unbiased(x, np.zeros((2, 1))) == pytest.approx(0.0, abs=1e-12)

    def test_two_point_frozen_value(self):
        # x = y = {0, 1}: within-sums each give k(0,1) = sum_s exp(-1/(2s^2)),
        # cross-sum gives (2 k(0,0) + 2 k(0,1))/4, so mmd2 = k - 5.
        k = sum(np.exp(-1.0 / (2.0 * s * s)) for s in BANDWIDTHS)
        x = np.array([[0.0], [1.0]])
        got = metrics.mmd2_unbiased(x, x.copy())
        assert got == pytest.approx(k - 5.0, abs=1e-9)
        assert got == pytest.approx(-2.3954, abs=5e-4)
        assert got < 0.0  # unbiased estimate reported unclamped

    @pytest.mark.parametrize("n,m,dim", [(5, 7, 2), (4, 4, 1), (9, 3, 3)])
    def test_matches_naive_reference(self, n, m, dim):
        rng = np.random.default_rng(n * 100 + m)
        x = rng.normal(size=(n, dim))
        y = rng.normal(size=(m, dim)) + 0.5
        assert_allclose(
            metrics.mmd2_unbiased(x, y), naive_mmd2(x, y), rtol=1e-12, atol=1e-12
        )

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(20, 2))
        y = rng.normal(size=(30, 2))
        assert metrics.mmd2_unbiased(x, y) == pytest.approx(
            metrics.mmd2_unbiased(y, x), rel=1e-12
        )

    def test_accepts_sample_sets(self):
        spec = datasets.grid_spec(2)
        a = datasets.sample(spec, 50, seed=0)
        b = datasets.sample(spec, 50, seed=1)
        assert isinstance(metrics.mmd2_unbiased(a, b), float)

    def test_small_sets_rejected(self):
        with pytest.raises(ValidationError):
            metrics.mmd2_unbiased(np.zeros((1, 1)), np.zeros((5, 1)))

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(DimensionMismatchError):
            metrics.mmd2_unbiased(np.zeros((3, 1)), np.zeros((3, 2)))


class TestPermutationTest:
    def test_same_distribution_not_rejected(self):
        spec = datasets.grid_spec(3, extent=1.5, std=0.1)
        x = datasets.sample(spec, 300, seed=0).points
        y = datasets.sample(spec, 300, seed=1).points
        observed = abs(metrics.mmd2_unbiased(x, y))
        threshold = metrics.mmd_permutation_threshold(x, y, n_permutations=200)
        assert observed < threshold

    def test_different_distributions_rejected(self):
        spec = datasets.grid_spec(3, extent=1.5, std=0.1)
        x = datasets.sample(spec, 300, seed=0).points
        rng = np.random.default_rng(2)
        y = rng.uniform(-1.5, 1.5, size=(300, 2))
        observed = abs(metrics.mmd2_unbiased(x, y))
        threshold = metrics.mmd_permutation_threshold(x, y, n_permutations=200)
        assert observed > threshold

    def test_threshold_reproducible(self):
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=(40, 2)), rng.normal(size=(40, 2))
        a = metrics.mmd_permutation_threshold(x, y, n_permutations=50, seed=3)
        b = metrics.mmd_permutation_threshold(x, y, n_permutations=50, seed=3)
        assert a == b


def make_traj(states):
    states = np.asarray(states, dtype=np.float64)
    times = np.linspace(0.0, 1.0, len(states))
    return flow.Trajectory(times, states)


class TestStraightness:
    def test_straight_line_is_exactly_one(self):
        traj = make_traj([[0.0, 0.0], [0.5, 0.5], [1.0, 1.0]])
        assert metrics.straightness(traj) == 1.0

    def test_right_angle_path(self):
        traj = make_traj([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
        assert metrics.straightness(traj) == pytest.approx(np.sqrt(2.0), rel=1e-12)

    def test_zero_chord_rejected(self):
        traj = make_traj([[0.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(ValidationError):
            metrics.straightness(traj)

    def test_constant_field_integrates_straight(self):
        # One Euler step per interval along a constant field: collinear states.
        sizes = (2 + nnet.TIME_EMBED_WIDTH, 2)
        net = nnet.MlpNet(sizes, [np.zeros(sizes)], [np.array([0.3, -0.7])])
        traj = flow.euler_sample(net, np.array([1.0, 2.0]), t_steps=16)
        assert metrics.straightness(traj) == 1.0

    def test_stats_mean_and_max(self):
        trajs = [
            make_traj([[0.0, 0.0], [1.0, 1.0]]),
            make_traj([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]]),
        ]
        mean, mx = metrics.straightness_stats(trajs)
        assert mean == pytest.approx((1.0 + np.sqrt(2.0)) / 2.0, rel=1e-12)
        assert mx == pytest.approx(np.sqrt(2.0), rel=1e-12)

    def test_triangle_inequality_floor(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            states = rng.normal(size=(6, 2))
            if np.linalg.norm(states[-1] - states[0]) < 1e-6:
                continue
            assert metrics.straightness(make_traj(states)) >= 1.0 - 1e-9


class TestModeCoverage:
    def test_samples_at_every_mean(self):
        spec = datasets.grid_spec(5)
        means = np.array([c[1] for c in spec.components])
        assert metrics.mode_coverage(means, spec) == 1.0

    def test_single_covered_mode(self):
        spec = datasets.grid_spec(5)
        one = np.tile(np.asarray(spec.components[0][1]), (100, 1))
        assert metrics.mode_coverage(one, spec) == pytest.approx(0.04)

    def test_true_samples_cover_everything(self):
        spec = datasets.grid_spec(5)
        pts = datasets.sample(spec, 100_000, seed=0)
        assert metrics.mode_coverage(pts, spec) == 1.0

    def test_halfmoon_unsupported(self):
        with pytest.raises(UnsupportedSpecError):
            metrics.mode_coverage(np.zeros((4, 2)), datasets.halfmoon_spec())

    def test_radius_must_be_positive(self):
        spec = datasets.explicit_spec([(1.0, 0.0, 0.0)], dim=1)  # std 0 -> no default
        with pytest.raises(ValidationError):
            metrics.mode_coverage(np.zeros((4, 1)), spec)


class TestMetricsReport:
    def test_valid_report_roundtrips_fields(self):
        rep = metrics.MetricsReport(-0.01, 1.0, 1.2, 0.96, 4096, 4)
        assert rep.mmd2 == -0.01 and rep.steps == 4

    def test_invariants_enforced(self):
        with pytest.raises(ValidationError):
            metrics.MetricsReport(0.0, 0.5, 1.0, 0.5, 10, 4)
        with pytest.raises(ValidationError):
            metrics.MetricsReport(0.0, 1.0, 1.0, 1.5, 10, 4)
        with pytest.raises(ValidationError):
            metrics.MetricsReport(0.0, 1.0, 1.0, 0.5, 0, 4)
