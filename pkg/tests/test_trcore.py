import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nstr.errors import DegenerateDenominator, NstrError
from nstr.linalg import spectral_norm
from nstr.models import GradientBundle
from nstr.problems import ProblemDef
from nstr.report import audit_invariants, audit_radius
from nstr.trcore import (
    Status,
    StepKind,
    TrParams,
    TrState,
    dogleg_step,
    hessian_update,
    next_radius,
    quality_modified,
    quality_standard,
    run,
    update,
)

from quadratics import max_of_quadratics, smooth_quadratic


def make_state(x=(0.0, 0.0), delta=1.0):
    x = np.asarray(x, dtype=float)
    return TrState(k=0, x=x, f_x=0.0, delta=delta, H=np.eye(x.size))


def q(g, H, d):
    return float(g @ d + 0.5 * d @ H @ d)


class TestDogleg:
    def test_interior_newton(self):
        np.testing.assert_allclose(dogleg_step([1.0, 0.0], np.eye(2), 2.0), [-1.0, 0.0])

    def test_first_leg_clipped(self):
        np.testing.assert_allclose(dogleg_step([1.0, 0.0], np.eye(2), 0.5), [-0.5, 0.0])

    def test_dogleg_path_against_grid(self):
        g = np.array([1.0, 1.0])
        H = np.diag([1.0, 4.0])
        d = dogleg_step(g, H, 1.0)
        assert np.linalg.norm(d) == pytest.approx(1.0)
        assert -q(g, H, d) >= 0.5 * np.linalg.norm(g) * min(1.0, np.linalg.norm(g) / 4.0)
        # brute-force minimization of the model over the disk; dogleg is within a few percent
        r, t = np.meshgrid(np.linspace(0, 1, 401), np.linspace(0, 2 * np.pi, 721))
        D = np.stack([r * np.cos(t), r * np.sin(t)], axis=-1).reshape(-1, 2)
        best = np.min(D @ g + 0.5 * np.einsum("ij,jk,ik->i", D, H, D))
        assert q(g, H, d) <= 0.9 * best

    def test_indefinite_cauchy_point(self):
        d = dogleg_step([1.0, 0.0], np.diag([-1.0, 2.0]), 0.7)
        np.testing.assert_allclose(d, [-0.7, 0.0])

    def test_zero_gradient_rejected(self):
        with pytest.raises(ValueError):
            dogleg_step([0.0, 0.0], np.eye(2), 1.0)

    @settings(max_examples=150, deadline=None)
    @given(n=st.integers(1, 6), delta=st.floats(1e-4, 100), seed=st.integers(0, 2**32 - 1))
    def test_cauchy_decrease(self, n, delta, seed):
        rng = np.random.default_rng(seed)
        g = rng.standard_normal(n)
        M = rng.standard_normal((n, n))
        H = M + M.T if rng.random() < 0.3 else M @ M.T
        d = dogleg_step(g, H, delta)
        gn = np.linalg.norm(g)
        hn = np.abs(np.linalg.eigvalsh(H)).max()
        assert np.linalg.norm(d) <= delta * (1 + 1e-12)
        assert -q(g, H, d) >= 0.5 * gn * min(delta, gn / hn) * (1 - 1e-10)


class TestQuality:
    @pytest.mark.parametrize(
        "f_x,f_trial,q_d,expected", [(1, 0.5, 0.5, 1.0), (1, 1.2, 0.5, -0.4), (2, 1.7, 1.6, 0.75)]
    )
    def test_standard(self, f_x, f_trial, q_d, expected):
        assert quality_standard(f_x, f_trial, q_d) == pytest.approx(expected)

    def test_standard_degenerate(self):
        with pytest.raises(DegenerateDenominator):
            quality_standard(1.0, 0.5, 1.0)

    def test_modified_forced_null(self):
        assert quality_modified(1.0, 0.0, 0.5, psi=0.1, norm_g=1.0, delta=0.2) == 0.0

    def test_modified_ratio(self):
        assert quality_modified(1.0, 0.6, 0.5, psi=1.0, norm_g=1.0, delta=0.2) == pytest.approx(0.8)

    def test_modified_zero_psi(self):
        assert quality_modified(1.0, 0.0, 0.5, psi=0.0, norm_g=3.0, delta=1e-9) == 0.0


class TestUpdate:
    params = TrParams(delta_min=0.01, eta1=0.25, eta2=0.75, beta1=0.5, beta2=1.1)

    def test_null_step(self):
        s = update(make_state(), 0.1, np.array([1.0, 1.0]), self.params)
        assert s.delta == 0.5
        np.testing.assert_array_equal(s.x, [0.0, 0.0])

    def test_middle_case_floor(self):
        s = update(make_state(delta=0.005), 0.5, np.array([1.0, 0.0]), self.params)
        assert s.delta == 0.01
        np.testing.assert_array_equal(s.x, [1.0, 0.0])

    def test_expansion(self):
        s = update(make_state(), 0.9, np.array([0.0, 2.0]), self.params)
        assert s.delta == pytest.approx(1.1)
        np.testing.assert_array_equal(s.x, [0.0, 2.0])

    def test_input_untouched(self):
        st0 = make_state()
        update(st0, 0.9, np.array([1.0, 1.0]), self.params)
        assert st0.delta == 1.0 and np.all(st0.x == 0)

    def test_no_floor(self):
        p = self.params.with_(radius_floor=False)
        assert next_radius(0.005, 0.9, p) == pytest.approx(0.0055)

    def test_stopped_state_rejected(self):
        st0 = make_state()
        st0.status = Status.MAX_ITER
        with pytest.raises(NstrError):
            update(st0, 0.5, np.zeros(2), self.params)

    @pytest.mark.parametrize("bad", [dict(eta1=0.8, eta2=0.5), dict(beta1=1.2), dict(beta2=0.9), dict(mu=0.0)])
    def test_param_validation(self, bad):
        with pytest.raises(ValueError):
            TrParams(**bad)


class TestHessianUpdate:
    def test_curvature_skip(self):
        H = np.diag([1.0, 2.0])
        np.testing.assert_array_equal(hessian_update(H, [1.0, 0.0], [0.0, 1.0], 1e8), H)

    def test_secant_fixed_point(self):
        np.testing.assert_allclose(hessian_update(np.eye(2), [1.0, 0.0], [1.0, 0.0], 1e8), np.eye(2))

    @settings(max_examples=80, deadline=None)
    @given(n=st.integers(1, 8), seed=st.integers(0, 2**32 - 1))
    def test_secant_and_spd(self, n, seed):
        rng = np.random.default_rng(seed)
        M = rng.standard_normal((n, n))
        H = M @ M.T + np.eye(n)
        s = rng.standard_normal(n)
        y = rng.standard_normal(n)
        if s @ y <= 1e-3 * np.linalg.norm(s) * np.linalg.norm(y):
            y = -y if s @ y < 0 else y + s
        Hn = hessian_update(H, s, y, 1e8)
        np.testing.assert_allclose(Hn @ s, y, atol=1e-10 * max(1, np.linalg.norm(y)))
        np.testing.assert_allclose(Hn, Hn.T)
        assert np.linalg.eigvalsh(Hn)[0] > 0

    def test_cap(self):
        Hn = hessian_update(np.eye(2), [1e-3, 0.0], [10.0, 0.0], c_h=50.0)
        assert spectral_norm(Hn) <= 50.0 * 1.0 + 1e-9


class TestRun:
    def test_smooth_quadratic(self):
        prob = ProblemDef(
            2,
            lambda x: 0.5 * float(x @ x),
            lambda x: x.copy(),
            lambda x, delta, cap: GradientBundle(x[None, :]),
        )
        res = run(prob, TrParams(), np.array([1.0, 1.0]))
        assert np.linalg.norm(res.state.x) <= 1e-6
        assert len(res.records) <= 100
        assert res.state.status in (Status.STATIONARY_INDICATOR, Status.STATIONARY_SUBGRADIENT_ZERO)

    def test_unpacks_as_pair(self):
        prob, _ = smooth_quadratic(np.random.default_rng(0), 3)
        state, records = run(prob, TrParams(), np.zeros(3))
        assert state.k == len(records)

    def test_subgradient_zero_at_start(self):
        prob = ProblemDef(1, lambda x: 0.0, lambda x: np.zeros(1), lambda x, d, c: GradientBundle([[0.0]]))
        res = run(prob, TrParams(), [3.0])
        assert res.state.status == Status.STATIONARY_SUBGRADIENT_ZERO and not res.records

    def test_max_iter(self):
        prob, _ = smooth_quadratic(np.random.default_rng(1), 4)
        res = run(prob, TrParams(max_iter=2), np.full(4, 10.0))
        assert res.state.status == Status.MAX_ITER and len(res.records) == 2

    def test_callback_and_trajectory(self):
        prob, _ = smooth_quadratic(np.random.default_rng(2), 2)
        seen = []
        res = run(prob, TrParams(), np.ones(2), on_record=seen.append, keep_trajectory=True)
        assert seen == res.records
        assert len(res.trajectory) == len(res.records)
        np.testing.assert_array_equal(res.trajectory[0], np.ones(2))

    @pytest.mark.parametrize("seed", range(10))
    def test_random_smooth_quadratics(self, seed):
        rng = np.random.default_rng(seed)
        prob, c = smooth_quadratic(rng, int(rng.integers(1, 6)))
        params = TrParams()
        res = run(prob, params, rng.standard_normal(prob.dim) * 5)
        np.testing.assert_allclose(res.state.x, c, atol=1e-6)
        assert audit_radius(res.records, res.state.delta, params) == []
        assert audit_invariants(res.records, params) == []

    @pytest.mark.parametrize("seed", range(10))
    def test_random_max_of_quadratics(self, seed):
        rng = np.random.default_rng(100 + seed)
        prob = max_of_quadratics(rng, int(rng.integers(1, 5)), int(rng.integers(2, 5)))
        params = TrParams(max_iter=400)
        x0 = rng.standard_normal(prob.dim) * 3
        res = run(prob, params, x0)
        assert res.state.f_x < prob.eval_f(x0)
        assert audit_radius(res.records, res.state.delta, params) == []
        assert audit_invariants(res.records, params) == []

    def test_null_steps_shrink_and_keep_x(self):
        rng = np.random.default_rng(5)
        prob = max_of_quadratics(rng, 3, 4)
        params = TrParams(max_iter=300)
        res = run(prob, params, rng.standard_normal(3) * 3, keep_trajectory=True)
        recs = res.records
        for i in range(len(recs) - 1):
            if recs[i].step_kind == StepKind.NULL:
                np.testing.assert_array_equal(res.trajectory[i + 1], res.trajectory[i])
                assert recs[i + 1].delta == pytest.approx(params.beta1 * recs[i].delta)
            else:
                assert recs[i + 1].f < recs[i].f
                assert recs[i + 1].delta >= params.delta_min

    def test_modified_branch_forced_null(self):
        rng = np.random.default_rng(9)
        prob = max_of_quadratics(rng, 2, 3)
        res = run(prob, TrParams(max_iter=300), rng.standard_normal(2))
        for r in res.records:
            if r.psi is not None and r.psi <= r.norm_g * r.delta:
                assert r.rho == 0.0 and r.step_kind == StepKind.NULL
