"""Concrete problems for the trust-region driver.

* the one-dimensional piecewise-linear counterexample, with either the local
  (Clarke) model or the neighbourhood bundle model;
* tracking-type control of the VI solution operator: the scalar toy problem
  and the 2D Laplacian problem, plus arbitrary SPD matrices read from disk.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import PreconditionViolated
from .linalg import IndexSet, SparseSpdMatrix, as_vector, assemble_laplacian_2d
from .models import GradientBundle
from .trcore import TrParams
from .vi import (
    LipschitzConstants,
    ViProblemData,
    ViSolution,
    adjoint_gradient,
    default_fixed_set,
    gradient_bundle,
    possibly_biactive,
    solve_vi,
)


@dataclass
class ProblemDef:
    """Oracle bundle consumed by :func:`nstr.trcore.run`.

    ``refine`` is optional. When present it receives the current progress
    measure and returns True once the problem has switched to exact inner
    solves.
    """

    dim: int
    eval_f: Callable[[np.ndarray], float]
    subgradient: Callable[[np.ndarray], np.ndarray]
    bundle_for: Callable[[np.ndarray, float, int], GradientBundle]
    refine: Optional[Callable[[float], bool]] = None
    name: str = "problem"


# ---------------------------------------------------------------------------
# counterexample


@dataclass(frozen=True)
class CounterexampleParams:
    a: float = 2.0
    b: float = 1.0

    def __post_init__(self):
        if not 0 < self.b < self.a:
            raise ValueError("need 0 < b < a")

    def theta(self, beta1: float, beta2: float) -> float:
        r = self.b / self.a
        return (r - 1.0) * beta1 / (beta1 * beta2 - 1.0) + r

    @property
    def slopes(self) -> tuple[float, float, float]:
        return (-self.a, -self.b, 1.0)


def counterexample_f(params: CounterexampleParams, x: float) -> float:
    return max(-params.a * x, -params.b * x, x - (1.0 + params.b))


def _pieces_at(params: CounterexampleParams, x: float) -> list[float]:
    vals = (-params.a * x, -params.b * x, x - (1.0 + params.b))
    top = max(vals)
    return [s for s, v in zip(params.slopes, vals) if v == top]


def _pieces_near(params: CounterexampleParams, x: float, delta: float) -> list[float]:
    # piece 0 rules on x <= 0, piece 1 on [0, 1], piece 2 on x >= 1
    lo, hi = x - delta, x + delta
    out = []
    if lo <= 0.0:
        out.append(-params.a)
    if lo <= 1.0 and hi >= 0.0:
        out.append(-params.b)
    if hi >= 1.0:
        out.append(1.0)
    return out


def counterexample_problem(params: CounterexampleParams | None = None, model: str = "local") -> ProblemDef:
    """``model="local"`` uses the slopes active at ``x`` only; ``"bundle"`` every
    slope that occurs on ``[x - delta, x + delta]``."""
    params = CounterexampleParams() if params is None else params
    if model not in ("local", "bundle"):
        raise ValueError("model must be 'local' or 'bundle'")

    def eval_f(x):
        return counterexample_f(params, float(x[0]))

    def subgradient(x):
        return np.array([_pieces_at(params, float(x[0]))[0]])

    def bundle_for(x, delta, cap):
        if model == "local":
            slopes = _pieces_at(params, float(x[0]))
        else:
            slopes = _pieces_near(params, float(x[0]), delta)
        return GradientBundle(np.array(slopes).reshape(-1, 1))

    return ProblemDef(1, eval_f, subgradient, bundle_for, name=f"counterexample-{model}")


def counterexample_tr_params(max_iter: int = 40, **overrides) -> TrParams:
    """Parameters for the failure example: exact linear subproblems (``H = 0``)
    and no radius floor, so that the radius recurrence matches the closed form."""
    base = dict(
        delta_min=2.0,
        eta1=0.9,
        eta2=0.95,
        beta1=0.4,
        beta2=1.2,
        delta0=1.3,
        mu=0.8,
        max_iter=max_iter,
        hessian="zero",
        radius_floor=False,
        tol_step=1e-12,
        tol_stationarity=1e-12,
    )
    base.update(overrides)
    return TrParams(**base)


def check_counterexample_preconditions(params: CounterexampleParams, tr: TrParams, x0: float) -> float:
    """Return ``theta`` or raise :class:`PreconditionViolated` naming the failed inequality."""
    b1, b2 = tr.beta1, tr.beta2
    if not b1 + b1 * b2 < 1:
        raise PreconditionViolated(f"beta1 + beta1*beta2 < 1 fails: {b1 + b1 * b2}")
    theta = params.theta(b1, b2)
    if not tr.eta1 >= theta:
        raise PreconditionViolated(f"eta1 >= theta fails: eta1={tr.eta1}, theta={theta}")
    c = (b1 * b2 - 1.0) / b1
    lo = 1.0 / (1.0 + c)
    if not lo < x0 < 0:
        raise PreconditionViolated(f"x0 in ({lo}, 0) fails: x0={x0}")
    delta0 = c * x0
    if not math.isclose(tr.delta0, delta0, rel_tol=1e-12, abs_tol=1e-15):
        raise PreconditionViolated(f"delta0 = (beta1*beta2 - 1)/beta1 * x0 = {delta0} fails: delta0={tr.delta0}")
    if not tr.delta_min > delta0:
        raise PreconditionViolated(f"delta_min > delta0 fails: {tr.delta_min} <= {delta0}")
    return theta


def counterexample_reference_iterates(
    params: CounterexampleParams, tr: TrParams, x0: float, k_max: int
) -> list[tuple[float, float, float]]:
    """Closed-form ``(x_k, delta_k, rho_k)`` for ``k = 0, ..., k_max - 1``."""
    theta = check_counterexample_preconditions(params, tr, x0)
    r = tr.beta1 * tr.beta2
    out = []
    for k in range(k_max):
        j = k // 2
        x = r**j * x0
        if k % 2 == 0:
            out.append((x, r**j * tr.delta0, theta))
        else:
            out.append((x, tr.beta1 * r**j * tr.delta0, 1.0))
    return out


# ---------------------------------------------------------------------------
# VI-constrained tracking problems


@dataclass(frozen=True)
class TrackingObjective:
    """``J(y, u) = |y - z_d|^2/2 + alpha |u - u_d|^2/2``."""

    z_d: np.ndarray
    alpha: float
    u_d: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        z = as_vector(self.z_d, name="z_d")
        object.__setattr__(self, "z_d", z)
        ud = np.zeros_like(z) if self.u_d is None else as_vector(self.u_d, z.shape[0], "u_d")
        object.__setattr__(self, "u_d", ud)

    def value(self, y, u) -> float:
        return 0.5 * float(np.sum((y - self.z_d) ** 2)) + 0.5 * self.alpha * float(np.sum((u - self.u_d) ** 2))

    def grad_y(self, y, u) -> np.ndarray:
        return y - self.z_d

    def grad_u(self, y, u) -> np.ndarray:
        return self.alpha * (u - self.u_d)


class ViTrackingProblem:
    """Reduced objective ``f(u) = J(S(u), u)`` over the VI solution operator.

    With ``inexact_tol`` set, inner solves use that tolerance until
    :meth:`refine` sees the progress measure drop below ``switch_below``;
    afterwards ``exact_tol`` is used.
    """

    def __init__(
        self,
        data: ViProblemData,
        objective: TrackingObjective,
        exact_tol: float = 1e-12,
        inexact_tol: Optional[float] = None,
        switch_below: float = 1e-2,
        allow_bundle_sampling: bool = False,
        name: str = "vi-tracking",
    ):
        if objective.z_d.shape[0] != data.n:
            raise ValueError("z_d dimension does not match A")
        self.data = data
        self.objective = objective
        self.dim = data.n
        self.exact_tol = exact_tol
        self.tol = exact_tol if inexact_tol is None else inexact_tol
        self.switch_below = switch_below
        self.allow_bundle_sampling = allow_bundle_sampling
        self.name = name
        self.lip = LipschitzConstants.certified(data)
        self.refine = None if inexact_tol is None else self._refine
        self._cache: OrderedDict[bytes, ViSolution] = OrderedDict()
        self._last_y: Optional[np.ndarray] = None

    def solution(self, u) -> ViSolution:
        u = np.asarray(u, dtype=float)
        key = u.tobytes()
        sol = self._cache.get(key)
        if sol is None:
            sol = solve_vi(self.data, u, self.tol, y0=self._last_y)
            self._cache[key] = sol
            if len(self._cache) > 8:
                self._cache.popitem(last=False)
        else:
            self._cache.move_to_end(key)
        self._last_y = sol.y
        return sol

    def eval_f(self, u) -> float:
        return self.objective.value(self.solution(u).y, u)

    def subgradient(self, u) -> np.ndarray:
        sol = self.solution(u)
        ob = self.objective
        return adjoint_gradient(self.data, default_fixed_set(sol), ob.grad_y(sol.y, u), ob.grad_u(sol.y, u))

    def bundle_for(self, u, delta: float, cap: int) -> GradientBundle:
        sol = self.solution(u)
        ob = self.objective
        return gradient_bundle(
            self.data, sol, delta, ob.grad_y(sol.y, u), ob.grad_u(sol.y, u), cap, self.lip,
            allow_sampling=self.allow_bundle_sampling,
        )

    def possibly_biactive(self, u, delta: float) -> IndexSet:
        return possibly_biactive(self.data, self.solution(u), self.lip, delta)

    def _refine(self, measure: float) -> bool:
        if self.tol == self.exact_tol:
            return True
        if measure < self.switch_below:
            self.tol = self.exact_tol
            self._cache.clear()
            return True
        return False


def soft_threshold_state(u: float) -> float:
    """Closed-form ``S(u)`` for ``A = [2]``, ``nu = 1``."""
    if u >= 1.0:
        return 0.5 * (u - 1.0)
    if u <= -1.0:
        return 0.5 * (u + 1.0)
    return 0.0


def experiment1_minimizers(alpha: float, z_d: float, u_d: float) -> tuple[float, float]:
    """The kink minimum ``-1`` and the smooth local minimum on ``u > 1``."""
    return -1.0, (4.0 * alpha * u_d + 2.0 * z_d + 1.0) / (4.0 * alpha + 1.0)


def experiment1_problem(alpha: float = 0.01, z_d: float = 1.0, u_d: float = -5.0, **kw) -> ViTrackingProblem:
    data = ViProblemData(SparseSpdMatrix.from_dense([[2.0]]), nu=1.0)
    obj = TrackingObjective(np.array([z_d]), alpha, np.array([u_d]))
    return ViTrackingProblem(data, obj, name="experiment1", **kw)


def experiment1_tr_params(**overrides) -> TrParams:
    base = dict(delta_min=1e-2, max_iter=500, tol_step=1e-7, tol_stationarity=1e-10)
    base.update(overrides)
    return TrParams(**base)


def half_domain_target(m: int, threshold: float = 0.5) -> np.ndarray:
    """Indicator of grid points whose first coordinate is at least ``threshold``."""
    h = 1.0 / (m + 1)
    x1 = (np.arange(m) + 1) * h
    row = (x1 >= threshold - 1e-14).astype(float)
    return np.tile(row, m)


def experiment2_problem(
    m: int,
    alpha: float,
    nu: float,
    threshold: float = 0.5,
    inexact_tol: Optional[float] = 1e-6,
    exact_tol: float = 1e-12,
    **kw,
) -> ViTrackingProblem:
    if m < 2:
        raise ValueError("m must be at least 2")
    data = ViProblemData(assemble_laplacian_2d(m), nu=nu)
    obj = TrackingObjective(half_domain_target(m, threshold), alpha)
    return ViTrackingProblem(
        data, obj, exact_tol=exact_tol, inexact_tol=inexact_tol, name="experiment2", **kw
    )


def experiment2_start(problem: ViTrackingProblem) -> np.ndarray:
    """Control whose state is exactly the target: ``u0 = A z_d + nu * sgn(z_d)``."""
    z = problem.objective.z_d
    return problem.data.A @ z + problem.data.nu * np.sign(z)


def experiment2_tr_params(**overrides) -> TrParams:
    base = dict(delta_min=1e-3, max_iter=500, tol_step=1e-8, tol_stationarity=1e-8)
    base.update(overrides)
    return TrParams(**base)


def custom_matrix_problem(
    A: SparseSpdMatrix, nu: float, z_d, alpha: float, u_d=None, **kw
) -> ViTrackingProblem:
    data = ViProblemData(A, nu=nu)
    obj = TrackingObjective(as_vector(z_d, A.n, "z_d"), alpha, None if u_d is None else as_vector(u_d, A.n, "u_d"))
    return ViTrackingProblem(data, obj, name="custom", **kw)
