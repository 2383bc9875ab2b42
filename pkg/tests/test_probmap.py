import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmapkit.geometry import ActivationWindow, Rect
from pmapkit.probmap import (
    ProbabilityMap,
    coverage_of_point,
    sparsemax,
    sparsemax_jvp,
    temperature_scale,
)

from conftest import one_hot_map, square_window


def brute_simplex_projection(z, tol=1e-14):
    """Bisection on the simplex projection's threshold; independent of sorting."""
    z = np.asarray(z, dtype=float).ravel()
    lo = z.min() - 1.0 / len(z) - 1.0
    hi = z.max()
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        mass = np.maximum(z - mid, 0.0).sum()
        if mass > 1.0:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    tau = 0.5 * (lo + hi)
    p = np.maximum(z - tau, 0.0)
    return p / p.sum()


class TestSparsemax:
    def test_uniform_on_equal_logits(self):
        out = sparsemax(np.full(8, 3.7))
        assert np.allclose(out, 1.0 / 8.0)

    def test_dominant_logit_takes_all(self):
        assert np.allclose(sparsemax(np.array([2.0, 0.0, 0.0])), [1, 0, 0])

    def test_three_cell_example(self):
        out = sparsemax(np.array([0.6, 0.4, 0.1]))
        expected = np.array([0.6, 0.4, 0.1]) - 0.1 / 3.0
        assert np.max(np.abs(out - expected)) < 1e-9

    def test_matches_bisection_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(2, 64))
            z = rng.normal(scale=rng.uniform(0.1, 5.0), size=n)
            assert np.max(np.abs(sparsemax(z) - brute_simplex_projection(z))) < 1e-9

    def test_nearest_simplex_point(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=12)
        p_star = sparsemax(z)
        base = np.linalg.norm(p_star - z)
        for _ in range(1000):
            q = rng.dirichlet(np.ones(12))
            assert base <= np.linalg.norm(q - z) + 1e-12

    def test_shift_invariance_bit_exact(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            # dyadic inputs and shifts add without rounding
            z = rng.integers(-(2**30), 2**30, size=16) / 2.0**20
            c = float(rng.integers(-(2**30), 2**30)) / 2.0**20
            a = sparsemax(z)
            b = sparsemax(z + c)
            assert np.array_equal(a, b)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            sparsemax(np.array([1.0, np.nan]))
        with pytest.raises(ValueError):
            sparsemax(np.array([np.inf, 0.0]))

    def test_preserves_shape_and_sum(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(5, 7))
        p = sparsemax(z)
        assert p.shape == (5, 7)
        assert abs(p.sum() - 1.0) < 1e-12
        assert (p >= 0).all()


class TestSparsemaxJvp:
    def test_tangent_sums_to_zero_on_full_support(self):
        z = np.full(9, 0.1)
        out = sparsemax_jvp(z, np.ones(9))
        assert abs(out.sum()) < 1e-15

    def test_off_support_exactly_zero(self):
        z = np.array([5.0, 0.0, -1.0, 4.9])
        t = np.ones(4)
        out = sparsemax_jvp(z, t)
        support = sparsemax(z) > 0
        assert np.all(out[~support] == 0.0)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        z = rng.normal(size=16) * 0.3
        t = rng.normal(size=16)
        h = 1e-6
        fd = (sparsemax(z + h * t) - sparsemax(z - h * t)) / (2 * h)
        an = sparsemax_jvp(z, t)
        denom = max(np.abs(fd).max(), 1e-12)
        assert np.abs(an - fd).max() / denom < 1e-6


class TestProbabilityMap:
    def test_rejects_negative_values(self):
        w = square_window(2, 2)
        v = np.array([[0.5, 0.6], [-0.1, 0.0]])
        with pytest.raises(ValueError):
            ProbabilityMap(w, v)

    def test_renormalizes_small_drift_and_rejects_large(self):
        w = square_window(2, 2)
        v = np.full((2, 2), 0.25) * (1 + 5e-7)
        m = ProbabilityMap(w, v)
        assert abs(m.values.sum() - 1.0) < 1e-9
        with pytest.raises(ValueError):
            ProbabilityMap(w, np.full((2, 2), 0.25) * 1.01)

    def test_values_immutable(self):
        m = one_hot_map(square_window(3, 3), 1, 1)
        with pytest.raises(ValueError):
            m.values[0, 0] = 0.5

    def test_shape_must_match_grid(self):
        with pytest.raises(ValueError):
            ProbabilityMap(square_window(3, 4), np.full((3, 3), 1 / 9))


class TestTemperatureScale:
    def test_identity_at_one(self):
        rng = np.random.default_rng(5)
        w = square_window(4, 4)
        v = rng.dirichlet(np.ones(16)).reshape(4, 4)
        m = ProbabilityMap(w, v)
        assert np.allclose(temperature_scale(m, 1.0).values, m.values, atol=1e-12)

    def test_two_cell_map_flattens_toward_uniform(self):
        w = ActivationWindow(Rect(0, 0, 20, 10), 2, 1)
        m = ProbabilityMap(w, np.array([[0.9, 0.1]]))
        out = temperature_scale(m, 1e6).values
        assert np.allclose(out, 0.5, atol=1e-4)

    def test_power_example(self):
        w = ActivationWindow(Rect(0, 0, 20, 10), 2, 1)
        m = ProbabilityMap(w, np.array([[0.8, 0.2]]))
        out = temperature_scale(m, 0.5).values
        assert out[0, 0] == pytest.approx(0.64 / 0.68, abs=1e-12)
        assert out[0, 1] == pytest.approx(0.04 / 0.68, abs=1e-12)

    def test_zeros_stay_zero(self):
        w = square_window(2, 2)
        m = ProbabilityMap(w, np.array([[0.7, 0.3], [0.0, 0.0]]))
        out = temperature_scale(m, 2.0)
        assert out.values[1, 0] == 0.0
        assert out.values[1, 1] == 0.0

    @given(st.floats(min_value=0.05, max_value=20.0))
    @settings(max_examples=40, deadline=None)
    def test_argmax_set_preserved(self, t):
        rng = np.random.default_rng(6)
        w = square_window(4, 4)
        v = rng.dirichlet(np.ones(16)).reshape(4, 4)
        m = ProbabilityMap(w, v)
        out = temperature_scale(m, t)
        assert np.argmax(out.values) == np.argmax(m.values)

    def test_invalid_temperature(self):
        m = one_hot_map(square_window(2, 2), 0, 0)
        with pytest.raises(ValueError):
            temperature_scale(m, 0.0)


class TestCoverage:
    def test_one_hot_full_coverage(self):
        m = one_hot_map(square_window(4, 4), 2, 3)
        assert coverage_of_point(m, (2, 3)) == 1.0

    def test_uniform_all_tied(self):
        w = square_window(5, 5)
        m = ProbabilityMap(w, np.full((5, 5), 1 / 25))
        assert coverage_of_point(m, (0, 0)) == pytest.approx(1.0)
        assert coverage_of_point(m, (4, 4)) == pytest.approx(1.0)

    def test_sorted_accumulation_example(self):
        w = ActivationWindow(Rect(0, 0, 30, 10), 3, 1)
        m = ProbabilityMap(w, np.array([[0.5, 0.3, 0.2]]))
        assert coverage_of_point(m, (0, 1)) == pytest.approx(0.8)
        assert coverage_of_point(m, (0, 0)) == pytest.approx(0.5)
        assert coverage_of_point(m, (0, 2)) == pytest.approx(1.0)

    def test_monotone_in_cell_value(self):
        rng = np.random.default_rng(7)
        w = square_window(6, 6)
        v = rng.dirichlet(np.ones(36)).reshape(6, 6)
        m = ProbabilityMap(w, v)
        cells = [(i, j) for i in range(6) for j in range(6)]
        cov = {c: coverage_of_point(m, c) for c in cells}
        for a in cells:
            for b in cells:
                if m.values[a] >= m.values[b]:
                    assert cov[a] <= cov[b] + 1e-12

    def test_out_of_grid_cell_rejected(self):
        m = one_hot_map(square_window(3, 3), 0, 0)
        with pytest.raises(ValueError):
            coverage_of_point(m, (3, 0))
