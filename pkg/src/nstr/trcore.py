"""Nonsmooth trust-region driver.

While the radius stays at or above ``delta_min`` the method behaves like a
classical trust-region scheme on the quadratic model ``f + <g, d> + d'Hd/2``
(dogleg steps, BFGS ``H``). Below ``delta_min`` it switches to the modified
subproblem built from a gradient bundle that describes ``f`` on the whole
trust region, and the quality indicator forces a null step whenever the
bundle's stationarity measure ``psi`` does not dominate ``|g| * delta``.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Protocol

import numpy as np

from .errors import CauchyDecreaseViolation, DegenerateDenominator, NstrError
from .linalg import as_vector, spectral_norm
from .models import GradientBundle, modified_cauchy_step

# relative slack for the runtime decrease assertions (rounding only)
_ASSERT_RTOL = 1e-10


class Status(str, enum.Enum):
    RUNNING = "Running"
    STATIONARY_SUBGRADIENT_ZERO = "StationarySubgradientZero"
    STATIONARY_INDICATOR = "StationaryIndicator"
    STEP_TOO_SMALL = "StepTooSmall"
    MAX_ITER = "MaxIter"


class StepKind(str, enum.Enum):
    NULL = "Null"
    SUCCESSFUL = "Successful"


class Problem(Protocol):
    dim: int

    def eval_f(self, x: np.ndarray) -> float: ...

    def subgradient(self, x: np.ndarray) -> np.ndarray: ...

    def bundle_for(self, x: np.ndarray, delta: float, cap: int) -> GradientBundle: ...


@dataclass(frozen=True)
class TrParams:
    delta_min: float = 1e-2
    eta1: float = 0.25
    eta2: float = 0.75
    beta1: float = 0.5
    beta2: float = 1.1
    mu: float = 0.8
    delta0: float = 1.0
    max_iter: int = 200
    tol_stationarity: float = 1e-8
    tol_step: float = 1e-8
    c_h: float = 1e8
    hessian: str = "bfgs"  # "bfgs" or "zero"
    radius_floor: bool = True
    bundle_cap: int = 14
    allow_bundle_sampling: bool = False

    def __post_init__(self):
        checks = [
            (self.delta_min > 0, "delta_min > 0"),
            (0 < self.eta1 < self.eta2 < 1, "0 < eta1 < eta2 < 1"),
            (0 < self.beta1 < 1, "0 < beta1 < 1"),
            (self.beta2 > 1, "beta2 > 1"),
            (0 < self.mu <= 1, "0 < mu <= 1"),
            (self.delta0 > 0, "delta0 > 0"),
            (self.max_iter >= 1, "max_iter >= 1"),
            (self.tol_stationarity > 0, "tol_stationarity > 0"),
            (self.tol_step > 0, "tol_step > 0"),
            (self.c_h > 0, "c_h > 0"),
            (self.hessian in ("bfgs", "zero"), "hessian in {bfgs, zero}"),
            (self.bundle_cap >= 0, "bundle_cap >= 0"),
        ]
        for ok, what in checks:
            if not ok:
                raise ValueError(f"invalid trust-region parameters: need {what}")

    def with_(self, **changes) -> "TrParams":
        return replace(self, **changes)


@dataclass
class TrState:
    k: int
    x: np.ndarray
    f_x: float
    delta: float
    H: np.ndarray
    g: Optional[np.ndarray] = None
    status: Status = Status.RUNNING
    inexact_iterations: Optional[int] = None  # iterations spent before a tolerance switch


@dataclass(frozen=True)
class IterateRecord:
    k: int
    f: float
    norm_g: float
    psi: Optional[float]
    delta: float
    rho: Optional[float]
    step_kind: StepKind
    bundle_size: Optional[int]
    wall_ms: float
    model_decrease: Optional[float] = None
    cauchy_bound: Optional[float] = None

    @property
    def branch(self) -> str:
        return "standard" if self.psi is None else "modified"


@dataclass
class RunResult:
    state: TrState
    records: list[IterateRecord] = field(default_factory=list)
    heuristic: bool = False
    trajectory: list[np.ndarray] | None = None  # x_k per record, when requested

    def __iter__(self):
        # allows ``state, records = run(...)``
        yield self.state
        yield self.records


def dogleg_step(g, H, delta: float) -> np.ndarray:
    """Approximate minimizer of ``<g, d> + d'Hd/2`` over ``|d| <= delta``.

    Returns the Newton point when ``H`` is positive definite and the point lies
    inside the region, otherwise the dogleg path point. For indefinite or
    singular ``H`` the exact Cauchy point along ``-g`` is returned.
    """
    g = np.asarray(g, dtype=float)
    H = np.asarray(H, dtype=float)
    gnorm = float(np.linalg.norm(g))
    if gnorm == 0.0:
        raise ValueError("dogleg_step needs a nonzero gradient")
    if delta <= 0:
        raise ValueError("delta must be positive")

    gHg = float(g @ H @ g)
    if gHg > 0:
        t_c = min(gnorm**2 / gHg, delta / gnorm)
    else:
        t_c = delta / gnorm
    d_cauchy = -t_c * g

    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        return d_cauchy
    d_newton = -np.linalg.solve(L.T, np.linalg.solve(L, g))
    if np.linalg.norm(d_newton) <= delta:
        return d_newton
    d_u = -(gnorm**2 / gHg) * g
    if np.linalg.norm(d_u) >= delta:
        return -(delta / gnorm) * g
    # intersect the segment d_u + tau (d_newton - d_u) with the sphere
    w = d_newton - d_u
    a = w @ w
    b = 2.0 * (d_u @ w)
    c = d_u @ d_u - delta**2
    tau = (-b + math.sqrt(max(b * b - 4.0 * a * c, 0.0))) / (2.0 * a)
    return d_u + tau * w


def quality_standard(f_x: float, f_trial: float, q_d: float) -> float:
    return _ratio(f_x - f_trial, f_x - q_d)


def _ratio(actual: float, predicted: float) -> float:
    if not predicted > 0:
        raise DegenerateDenominator(f"predicted decrease {predicted!r} is not positive")
    return actual / predicted


def quality_modified(
    f_x: float, f_trial: float, qmod_d: float, psi: float, norm_g: float, delta: float
) -> float:
    if psi < 0 or delta <= 0:
        raise ValueError("need psi >= 0 and delta > 0")
    if psi <= norm_g * delta:
        return 0.0
    return quality_standard(f_x, f_trial, qmod_d)


def next_radius(delta: float, rho: float, params: TrParams) -> float:
    floor = params.delta_min if params.radius_floor else 0.0
    if rho <= params.eta1:
        return params.beta1 * delta
    if rho <= params.eta2:
        return max(floor, delta)
    return max(floor, params.beta2 * delta)


def update(state: TrState, rho: float, d, params: TrParams) -> TrState:
    """Iterate and radius update. Returns a new state, ``state`` is untouched."""
    if state.status != Status.RUNNING:
        raise NstrError(f"cannot update a state with status {state.status.value}")
    x = state.x if rho <= params.eta1 else state.x + np.asarray(d, dtype=float)
    return replace(state, x=x, delta=next_radius(state.delta, rho, params))


def hessian_update(H, s, y_diff, c_h: float) -> np.ndarray:
    """Safeguarded BFGS update with a spectral-norm cap.

    The update is skipped when ``<s, y_diff> <= 1e-8 |s| |y_diff|``. When the
    updated matrix has norm above ``c_h`` it is scaled down to norm ``c_h``.
    """
    H = np.asarray(H, dtype=float)
    s = np.asarray(s, dtype=float)
    y = np.asarray(y_diff, dtype=float)
    sy = float(s @ y)
    if sy <= 1e-8 * np.linalg.norm(s) * np.linalg.norm(y) or sy <= 0:
        return H.copy()
    Hs = H @ s
    sHs = float(s @ Hs)
    H_new = H - np.outer(Hs, Hs) / sHs + np.outer(y, y) / sy
    H_new = 0.5 * (H_new + H_new.T)
    nrm = spectral_norm(H_new)
    if nrm > c_h:
        H_new *= c_h / nrm
    return H_new


def _matrix_norm(H: np.ndarray) -> float:
    return spectral_norm(H)


def _cauchy_bound(mu: float, measure: float, delta: float, h_norm: float) -> float:
    reach = delta if h_norm == 0.0 else min(delta, measure / h_norm)
    return 0.5 * mu * measure * reach


def run(
    problem: Problem,
    params: TrParams,
    x0,
    on_record: Callable[[IterateRecord], None] | None = None,
    keep_trajectory: bool = False,
) -> RunResult:
    """Run the trust-region loop from ``x0``.

    Returns a :class:`RunResult`, which unpacks as ``(state, records)``.

    Termination, checked in this order:

    * ``g = 0``: StationarySubgradientZero; ``|g| <= tol_stationarity``:
      StationaryIndicator (both at the start of an iteration);
    * modified branch with ``psi <= tol_stationarity`` and the new radius
      below ``tol_step``: StationaryIndicator;
    * relative step and new radius both below ``tol_step``: StepTooSmall;
    * ``max_iter`` iterations: MaxIter.

    A problem may expose ``refine(norm_g) -> bool`` to tighten its inner
    solver tolerance. It is offered the current subgradient norm at the start
    of every iteration (and ``0.0`` when a stop is due); once it switches,
    ``f`` and ``g`` are re-evaluated and the monotonicity baseline restarts.
    No stop is accepted before the switch.
    """
    x0 = as_vector(x0, problem.dim, "x0")
    n = x0.shape[0]
    x_scale = max(1.0, float(np.linalg.norm(x0)))
    refine = getattr(problem, "refine", None)
    refined = refine is None

    H = np.eye(n) if params.hessian == "bfgs" else np.zeros((n, n))
    h_is_initial = params.hessian == "bfgs"
    state = TrState(k=0, x=x0, f_x=float(problem.eval_f(x0)), delta=params.delta0, H=H)
    result = RunResult(state, heuristic=params.allow_bundle_sampling)
    if keep_trajectory:
        result.trajectory = []
    records = result.records
    pending_pair: tuple[np.ndarray, np.ndarray] | None = None  # (s, g_old) of last success

    def finish(status: Status) -> RunResult:
        state.status = status
        result.state = state
        return result

    while True:
        t0 = time.perf_counter()
        g = as_vector(problem.subgradient(state.x), n, "subgradient")
        if pending_pair is not None and params.hessian == "bfgs":
            s, g_old = pending_pair
            if h_is_initial:
                sy = float(s @ (g - g_old))
                if sy > 0:
                    yy = float((g - g_old) @ (g - g_old))
                    state.H = (yy / sy) * np.eye(n)
                    h_is_initial = False
            state.H = hessian_update(state.H, s, g - g_old, params.c_h)
        pending_pair = None
        norm_g = float(np.linalg.norm(g))
        if not refined and (refine(norm_g) or (norm_g <= params.tol_stationarity and refine(0.0))):
            refined = True
            state.inexact_iterations = state.k
            state.f_x = float(problem.eval_f(state.x))
            g = as_vector(problem.subgradient(state.x), n, "subgradient")
            norm_g = float(np.linalg.norm(g))
        state.g = g
        if norm_g == 0.0 and refined:
            return finish(Status.STATIONARY_SUBGRADIENT_ZERO)
        if norm_g <= params.tol_stationarity and refined:
            return finish(Status.STATIONARY_INDICATOR)

        h_norm = _matrix_norm(state.H)
        delta = state.delta
        psi = None
        bundle_size = None
        if delta >= params.delta_min:
            d = dogleg_step(g, state.H, delta)
            # model decrease formed directly; f_x - q(d) cancels badly once steps are tiny
            decrease = -(float(g @ d) + 0.5 * float(d @ state.H @ d))
            bound = _cauchy_bound(params.mu, norm_g, delta, h_norm)
            if decrease < bound * (1 - _ASSERT_RTOL):
                raise CauchyDecreaseViolation(
                    f"k={state.k}: standard decrease {decrease!r} < bound {bound!r}"
                )
            f_trial = float(problem.eval_f(state.x + d))
            rho = _ratio(state.f_x - f_trial, decrease)
        else:
            bundle = problem.bundle_for(state.x, delta, params.bundle_cap)
            bundle_size = len(bundle)
            step = modified_cauchy_step(bundle, state.H, delta, params.mu)
            psi = step.psi
            d = step.d
            decrease = -step.model_value
            bound = _cauchy_bound(params.mu, psi, delta, h_norm)
            if decrease < bound * (1 - _ASSERT_RTOL):
                raise CauchyDecreaseViolation(
                    f"k={state.k}: modified decrease {decrease!r} < bound {bound!r}"
                )
            if psi <= norm_g * delta:
                f_trial = None
                rho = 0.0
            else:
                f_trial = float(problem.eval_f(state.x + d))
                rho = _ratio(state.f_x - f_trial, decrease)

        new = update(state, rho, d, params)
        success = rho > params.eta1
        if success:
            if not f_trial < state.f_x:
                raise NstrError(f"k={state.k}: accepted step did not decrease f")
            new.f_x = f_trial
            pending_pair = (np.asarray(d, dtype=float).copy(), g)
        step_rel = float(np.linalg.norm(d)) / x_scale if success else 0.0

        rec = IterateRecord(
            k=state.k,
            f=state.f_x,
            norm_g=norm_g,
            psi=psi,
            delta=delta,
            rho=rho,
            step_kind=StepKind.SUCCESSFUL if success else StepKind.NULL,
            bundle_size=bundle_size,
            wall_ms=(time.perf_counter() - t0) * 1e3,
            model_decrease=decrease,
            cauchy_bound=bound,
        )
        records.append(rec)
        if result.trajectory is not None:
            result.trajectory.append(state.x.copy())
        if on_record is not None:
            on_record(rec)

        new.k = state.k + 1
        state = new
        result.state = state

        if not refined:
            # a stop is never accepted on inexact data, so force the switch instead
            stop_wanted = state.k >= params.max_iter or (
                state.delta < params.tol_step and step_rel < params.tol_step
            )
            if stop_wanted and refine(0.0):
                refined = True
                state.inexact_iterations = state.k
                state.f_x = float(problem.eval_f(state.x))
                if state.k < params.max_iter:
                    continue

        if psi is not None and psi <= params.tol_stationarity and state.delta < params.tol_step:
            return finish(Status.STATIONARY_INDICATOR)
        if step_rel < params.tol_step and state.delta < params.tol_step:
            return finish(Status.STEP_TOO_SMALL)
        if state.k >= params.max_iter:
            return finish(Status.MAX_ITER)
