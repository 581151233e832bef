import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nstr.linalg import IndexSet
from nstr.models import (
    GradientBundle,
    local_max_model,
    min_norm_point,
    modified_cauchy_step,
    phi_eval,
    stationarity_measure,
)
from nstr.problems import experiment1_problem

from oracles import grid_resolution, hull_distance_bruteforce, sphere_grid

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
# entries of very different magnitude, the hard case for min-norm searches
mixed = st.one_of(
    finite,
    st.sampled_from([0.0, 5e-324, 1e-300, 1.1920929e-07, -1.1920929e-07, 1e-5, -1e-5, 10.0, -10.0]),
)


def bundles(max_m=5, max_dim=4, elements=finite):
    return st.integers(1, max_dim).flatmap(
        lambda n: st.integers(1, max_m).flatmap(lambda m: arrays(np.float64, (m, n), elements=elements))
    )


class TestGradientBundle:
    def test_dedup_keeps_first(self):
        b = GradientBundle([[1.0, 0.0], [1.0, 1e-14], [0.0, 1.0]], [IndexSet([0]), IndexSet([1]), IndexSet([2])])
        assert len(b) == 2
        assert b.provenance[0] == IndexSet([0])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            GradientBundle(np.zeros((0, 2)))

    def test_read_only(self):
        b = GradientBundle([[1.0, 2.0]])
        with pytest.raises(ValueError):
            b.gradients[0, 0] = 5.0


class TestPhiEval:
    def test_singleton(self):
        assert phi_eval(GradientBundle([[1.0, 0.0]]), [2.0, 3.0]) == 2.0

    def test_max_of_two(self):
        assert phi_eval(GradientBundle([[1.0, 0.0], [0.0, 1.0]]), [2.0, 3.0]) == 3.0

    @pytest.mark.parametrize("t", [-2.5, 0.0, 1.7])
    def test_absolute_value(self, t):
        assert phi_eval(GradientBundle([[1.0, 0.0], [-1.0, 0.0]]), [t, 0.0]) == abs(t)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            phi_eval(GradientBundle([[1.0, 0.0]]), [1.0])

    @settings(max_examples=60, deadline=None)
    @given(G=bundles(), t=st.floats(0, 100), seed=st.integers(0, 1000))
    def test_positive_homogeneity(self, G, t, seed):
        b = GradientBundle(G)
        d = np.random.default_rng(seed).standard_normal(b.dim)
        np.testing.assert_allclose(phi_eval(b, t * d), t * phi_eval(b, d), rtol=1e-12, atol=1e-12)


class TestStationarityMeasure:
    def test_singleton(self):
        s = stationarity_measure(GradientBundle([[3.0, 4.0]]))
        assert s.psi == pytest.approx(5.0)
        np.testing.assert_allclose(s.d_star, [-0.6, -0.8])

    def test_origin_in_hull(self):
        s = stationarity_measure(GradientBundle([[1.0, 0.0], [-1.0, 0.0]]))
        assert s.psi == 0.0
        np.testing.assert_array_equal(s.d_star, [0.0, 0.0])

    def test_two_unit_vectors(self):
        s = stationarity_measure(GradientBundle([[1.0, 0.0], [0.0, 1.0]]))
        # brute force over lambda in [0,1] of |lambda e1 + (1-lambda) e2|
        lam = np.linspace(0, 1, 100001)
        ref = np.min(np.hypot(lam, 1 - lam))
        assert s.psi == pytest.approx(ref, abs=1e-9)
        assert s.psi == pytest.approx(np.sqrt(2) / 2, abs=1e-14)
        np.testing.assert_allclose(s.min_norm, [0.5, 0.5], atol=1e-14)

    def test_interior_minimizer_on_face(self):
        pts = [[1.0, 1.0, 0.0], [1.0, -1.0, 0.0], [3.0, 0.0, 1.0]]
        x, w = min_norm_point(pts)
        np.testing.assert_allclose(x, [1.0, 0.0, 0.0], atol=1e-14)
        np.testing.assert_allclose(w.sum(), 1.0)

    @settings(max_examples=200, deadline=None)
    @given(G=bundles())
    def test_matches_hull_oracle(self, G):
        ref, _ = hull_distance_bruteforce(G)
        assert stationarity_measure(GradientBundle(G)).psi == pytest.approx(ref, abs=1e-8)

    @settings(max_examples=40, deadline=None)
    @given(G=bundles())
    def test_minimax_over_sphere(self, G):
        b = GradientBundle(G)
        grid = sphere_grid(b.dim)
        res = grid_resolution(grid)
        grid_val = max(0.0, -float(np.min(np.max(grid @ b.gradients.T, axis=1))))
        lip = float(np.max(np.linalg.norm(b.gradients, axis=1)))
        psi = stationarity_measure(b).psi
        assert grid_val <= psi + 1e-10
        assert psi - grid_val <= lip * res + 1e-10

    @settings(max_examples=300, deadline=None)
    @given(G=bundles(elements=mixed))
    def test_matches_hull_oracle_mixed_scales(self, G):
        b = GradientBundle(G)
        ref, _ = hull_distance_bruteforce(b.gradients)
        r = float(np.max(np.linalg.norm(b.gradients, axis=1)))
        assert stationarity_measure(b).psi == pytest.approx(ref, abs=1e-12 * max(1.0, r))

    def test_entering_point_below_norm_resolution(self):
        # adding the last point lowers |x|^2 by ~1e-30 at |x|^2 ~ 1e-14;
        # the exact distance is 8.0657489873869367e-8
        G = [
            [-5e-324, 1e-300, 1.1920929e-07],
            [1.5, -5e-324, 1.1920929e-07],
            [0.0, -3.307410305207135, -2.0],
            [-9.999999, 1.1920929e-07, -1e-300],
        ]
        assert stationarity_measure(GradientBundle(G)).psi == pytest.approx(8.0657489873869367e-8, rel=1e-9)

    def test_tiny_point_with_origin_in_hull(self):
        # the absolute Wolfe gap would stop at 1e-9 here
        s = stationarity_measure(GradientBundle([[-1e-5], [1e-9], [1.0]]))
        assert s.psi == 0.0

    def test_no_cycling_on_tiny_weights(self):
        G = [[2.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.1920929e-07, 0.0]]
        assert stationarity_measure(GradientBundle(G)).psi == pytest.approx(1.1920929e-07, rel=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(G=bundles())
    def test_d_star_attains(self, G):
        b = GradientBundle(G)
        s = stationarity_measure(b)
        if s.psi > 0:
            assert np.linalg.norm(s.d_star) == pytest.approx(1.0)
            # |x|^2 - psi^2 is only resolved to eps r^2, so x may sit sqrt(eps) r
            # from the minimizer and tilt d_star by sqrt(eps) r / psi
            r = float(np.max(np.linalg.norm(b.gradients, axis=1)))
            slack = 8 * np.sqrt(np.finfo(float).eps) * r * r / s.psi
            assert phi_eval(b, s.d_star) == pytest.approx(-s.psi, abs=1e-9 * max(1, s.psi) + slack)
            assert -phi_eval(b, s.d_star) <= s.psi + 1e-12 * max(1.0, r)


class TestModifiedCauchyStep:
    def test_steepest_descent_zero_h(self):
        c = modified_cauchy_step(GradientBundle([[1.0, 0.0]]), np.zeros((2, 2)), 0.5)
        np.testing.assert_allclose(c.d, [-0.5, 0.0])
        assert c.zeta == pytest.approx(-0.5)

    def test_two_gradients(self):
        c = modified_cauchy_step(GradientBundle([[1.0, 0.0], [0.0, 1.0]]), np.zeros((2, 2)), 1.0)
        np.testing.assert_allclose(c.d, -np.ones(2) / np.sqrt(2), atol=1e-14)
        assert c.zeta == pytest.approx(-np.sqrt(2) / 2)

    def test_curvature_limited(self):
        c = modified_cauchy_step(GradientBundle([[2.0]]), np.eye(1), 5.0)
        np.testing.assert_allclose(c.d, [-2.0])
        assert c.zeta == pytest.approx(-4.0)
        decrease = -c.model_value
        assert decrease == pytest.approx(2.0)
        assert decrease >= 0.5 * 2.0 * min(5.0, 2.0)

    def test_zero_psi_returns_zero_step(self):
        c = modified_cauchy_step(GradientBundle([[1.0], [-1.0]]), np.eye(1), 1.0)
        assert c.psi == 0.0 and np.all(c.d == 0)

    @settings(max_examples=150, deadline=None)
    @given(G=bundles(), delta=st.floats(1e-3, 10), seed=st.integers(0, 2**32 - 1))
    def test_feasible_and_decrease(self, G, delta, seed):
        b = GradientBundle(G)
        rng = np.random.default_rng(seed)
        M = rng.standard_normal((b.dim, b.dim))
        H = M + M.T
        H *= rng.uniform(0, 10) / max(np.abs(np.linalg.eigvalsh(H)).max(), 1e-12)
        c = modified_cauchy_step(b, H, delta)
        assert np.linalg.norm(c.d) <= delta * (1 + 1e-12)
        assert np.all(b.gradients @ c.d <= c.zeta + 1e-12 * max(1, abs(c.zeta)))
        h_norm = np.abs(np.linalg.eigvalsh(H)).max()
        reach = delta if h_norm == 0 else min(delta, c.psi / h_norm)
        assert -c.model_value >= 0.5 * c.psi * reach * (1 - 1e-10) - 1e-14


class TestLocalMaxModel:
    def test_smooth_point(self):
        m = local_max_model(GradientBundle([[2.0, -1.0]]))
        assert m.phi([1.0, 1.0]) == 1.0
        assert m.phi([1.0, 1.0], delta=100.0) == 1.0

    def test_counterexample_smooth_branch(self):
        m = local_max_model(GradientBundle([[-1.0]]))
        assert m.phi([0.3]) == pytest.approx(-0.3)

    def test_counterexample_kink(self):
        m = local_max_model(GradientBundle([[-2.0], [-1.0]]))
        assert m.stationarity().psi == pytest.approx(1.0)
        assert m.stationarity(delta=1e6).psi == pytest.approx(1.0)


class TestLinearizationRemainder:
    def test_gap_vanishes_along_sequence(self):
        # target below the kink so that psi stays positive at the biactive point u = 1
        prob = experiment1_problem(alpha=0.01, z_d=-1.0, u_d=-5.0)
        gaps = []
        for k in range(4, 23, 3):
            delta = 2.0**-k
            u = 1.0 + 0.5 * delta
            b = prob.bundle_for(np.array([u]), delta, 14)
            assert stationarity_measure(b).psi >= 0.05
            f0 = prob.eval_f(np.array([u]))
            ds = np.linspace(-delta, delta, 401)
            gap = max(prob.eval_f(np.array([u + d])) - f0 - phi_eval(b, [d]) for d in ds)
            gaps.append(gap / delta)
        assert gaps[-1] <= 1e-6
        assert all(g2 <= g1 + 1e-12 for g1, g2 in zip(gaps, gaps[1:]))
