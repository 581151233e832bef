"""Variational inequality of the second kind and its generalized derivatives.

The state ``y = S(u)`` minimizes ``y'Ay/2 - u'y + nu |y|_1``. Equivalently
there is a dual ``q`` with

    A y + nu q = u,   |q_i| <= 1,   y_i q_i = |y_i|.

``S`` is piecewise linear. Its pieces are indexed by the set ``N`` of
components held at zero, and each Bouligand element has the form
``G = A(N)^{-1} chi(N)``: solve with the rows and columns of ``N`` removed
and return zero on ``N``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import BiactiveSetTooLarge, NotConverged, OracleFailure
from .linalg import IndexSet, SparseSpdMatrix, as_vector, cg_solve, reduced_solve
from .models import GradientBundle

DEFAULT_ACT_TOL = 1e-9
_STALL_SWEEPS = 5


@dataclass(frozen=True)
class ViProblemData:
    A: SparseSpdMatrix
    nu: float = 1.0
    act_tol: float = DEFAULT_ACT_TOL

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError("nu must be positive")
        if not self.act_tol >= 0:
            raise ValueError("act_tol must be non-negative")

    @property
    def n(self) -> int:
        return self.A.n


class ViSets(NamedTuple):
    inactive: IndexSet
    strongly_active: IndexSet
    biactive: IndexSet


@dataclass(frozen=True)
class ViSolution:
    y: np.ndarray
    q: np.ndarray
    sets: ViSets
    residual: float
    sweeps: int = 0

    @property
    def zero_set(self) -> IndexSet:
        return self.sets.strongly_active.union(self.sets.biactive)


@dataclass(frozen=True)
class LipschitzConstants:
    """Upper bounds: ``|S(u1)-S(u2)|_inf <= l_y |u1-u2|`` and the same for ``q`` with ``l_q``."""

    l_y: float
    l_q: float

    @classmethod
    def certified(cls, data: ViProblemData, tol: float = 1e-3) -> "LipschitzConstants":
        lo, hi = data.A.bounds(tol)
        return cls(1.0 / lo, (hi / lo + 1.0) / data.nu)


def complementarity_residual(y: np.ndarray, q: np.ndarray) -> float:
    """``max((|q|-1)_+, |q_i - sgn y_i| over y_i != 0)``."""
    res = float(np.max(np.maximum(np.abs(q) - 1.0, 0.0), initial=0.0))
    nz = y != 0
    if nz.any():
        res = max(res, float(np.max(np.abs(q[nz] - np.sign(y[nz])))))
    return res


def classify_sets(y, q, act_tol: float) -> ViSets:
    y = np.asarray(y, dtype=float)
    q = np.asarray(q, dtype=float)
    small = np.abs(y) <= act_tol
    inactive = ~small
    strongly = small & (np.abs(q) < 1.0 - act_tol)
    biactive = small & ~strongly
    return ViSets(IndexSet.from_mask(inactive), IndexSet.from_mask(strongly), IndexSet.from_mask(biactive))


def _soft(v: np.ndarray, t: float) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def solve_vi(data: ViProblemData, u, tol: float = 1e-12, y0=None, max_sweeps: int = 200) -> ViSolution:
    """Primal-dual active-set solver with a proximal-gradient fallback.

    Each sweep guesses the sign pattern from ``q + diag(A) y / nu``, solves
    the reduced system ``A_ff y_f = u_f - nu s_f`` with ``y = 0`` elsewhere and
    recomputes ``q = (u - Ay)/nu``. A repeated pattern is a fixed point. When
    the residual stops improving for five sweeps, soft-thresholding steps with
    step ``1/lambda_max`` are inserted before active-set sweeps resume.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    A = data.A
    n = A.n
    nu = data.nu
    u = as_vector(u, n, "u")
    diag = A.diagonal()
    y = np.zeros(n) if y0 is None else as_vector(y0, n, "y0")
    q = (u - A @ y) / nu
    best = np.inf
    stall = 0
    last_pattern = None
    for sweep in range(1, max_sweeps + 1):
        z = q + diag * y / nu
        s = np.where(z > 1.0, 1.0, np.where(z < -1.0, -1.0, 0.0))
        free = s != 0
        pattern = s.tobytes()
        y_new = np.zeros(n)
        if free.any():
            rhs = u[free] - nu * s[free]
            # target absolute residual 0.5*tol*nu so that |q_f - s_f| stays below tol
            cg_tol = max(0.5 * tol * nu / max(1.0, float(np.linalg.norm(rhs))), 1e-15)
            sub = A.principal_submatrix(free)
            y_new[free] = cg_solve(sub, rhs, cg_tol, x0=y[free] if y0 is not None or sweep > 1 else None)
        y = y_new
        q = (u - A @ y) / nu
        res = complementarity_residual(y, q)
        if pattern == last_pattern and res <= tol:
            return ViSolution(y, q, classify_sets(y, q, data.act_tol), res, sweep)
        last_pattern = pattern
        if res < best * (1 - 1e-3):
            best = res
            stall = 0
        else:
            stall += 1
        if stall >= _STALL_SWEEPS:
            _, hi = A.bounds()
            for _ in range(50 * n + 100):
                y = _soft(y - (A @ y - u) / hi, nu / hi)
            q = (u - A @ y) / nu
            stall = 0
            best = np.inf
            last_pattern = None
    raise NotConverged("vi active-set solver", max_sweeps, complementarity_residual(y, q))


def bouligand_apply(data: ViProblemData, N: IndexSet, h) -> np.ndarray:
    """``G h`` for ``G = A(N)^{-1} chi(N)``; ``nu`` plays no role."""
    return reduced_solve(data.A, N, h)


def adjoint_gradient(data: ViProblemData, N: IndexSet, grad_y, grad_u) -> np.ndarray:
    """``G' grad_y + grad_u``. ``G`` is symmetric after projection, so this is one reduced solve."""
    p = reduced_solve(data.A, N, grad_y)
    return p + as_vector(grad_u, data.n, "grad_u")


def possibly_biactive(data: ViProblemData, sol: ViSolution, lip: LipschitzConstants, delta: float) -> IndexSet:
    """Indices that may be biactive somewhere in the ball of radius ``delta`` around ``u``.

    Both thresholds are widened by ``act_tol`` so that indices classified as
    biactive at ``u`` itself are always included.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    tol = data.act_tol
    mask = (np.abs(sol.y) < lip.l_y * delta + tol) & (
        np.abs(np.abs(sol.q) - 1.0) < lip.l_q * delta + tol
    )
    return IndexSet.from_mask(mask)


def default_fixed_set(sol: ViSolution) -> IndexSet:
    """``N`` of the subgradient used by the standard branch: every index held at zero."""
    return sol.zero_set


def gradient_bundle(
    data: ViProblemData,
    sol: ViSolution,
    delta: float,
    grad_y,
    grad_u,
    cap: int = 14,
    lip: Optional[LipschitzConstants] = None,
    allow_sampling: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> GradientBundle:
    """Adjoint gradients for every fixed set reachable within the trust region.

    With ``P`` the possibly biactive set, the fixed sets are
    ``(A_s \\ P) union B0`` for all ``B0`` subsets of ``P``, enumerated by
    binary counting over sorted ``P``. Indices of ``P`` that are strongly
    active at ``u`` may leave the active set inside the ball, which is why
    they are moved into the enumerated part.

    More than ``cap`` possibly biactive indices raise
    :class:`BiactiveSetTooLarge` unless ``allow_sampling`` is set, in which
    case ``2**cap`` random subsets (plus the default fixed set) are used.
    """
    if lip is None:
        lip = LipschitzConstants.certified(data)
    P = possibly_biactive(data, sol, lip, delta)
    base = sol.sets.strongly_active.difference(P)
    p_idx = P.indices
    if len(P) <= cap:
        subsets = (
            IndexSet(p_idx[[b for b in range(len(P)) if bits >> b & 1]])
            for bits in range(1 << len(P))
        )
    elif allow_sampling:
        rng = np.random.default_rng(0) if rng is None else rng
        draws = [IndexSet(p_idx[rng.random(len(P)) < 0.5]) for _ in range(1 << cap)]
        subsets = itertools.chain([sol.zero_set.difference(base)], draws)
    else:
        raise BiactiveSetTooLarge(len(P), cap)
    grads = []
    prov = []
    for B0 in subsets:
        grads.append(adjoint_gradient(data, base.union(B0), grad_y, grad_u))
        prov.append(B0)
    return GradientBundle(np.array(grads), prov)


def lemma_set(sol: ViSolution, A: SparseSpdMatrix, eta: np.ndarray, h) -> IndexSet:
    """Biactive indices ``i`` with ``q_i ((I - A) eta + h)_i < 0``.

    For ``eta = S'(u; h)`` the fixed set ``A_s union`` this set reproduces the
    directional derivative through a Bouligand element.
    """
    h = np.asarray(h, dtype=float)
    w = eta - A @ eta + h
    B = sol.sets.biactive.indices
    return IndexSet(B[sol.q[B] * w[B] < 0])


def directional_derivative_oracle(
    data: ViProblemData, u, h, sol: Optional[ViSolution] = None, max_biactive: int = 8, tol: float = 1e-9
) -> np.ndarray:
    """Brute-force ``S'(u; h)`` from the cone-constrained derivative problem.

    ``eta`` minimizes ``eta'A eta/2 - h'eta`` over the cone
    ``{v : v_i = 0 on A_s, q_i v_i >= 0 on B}``. Each biactive index is either
    held at zero or left free (its sign is then fixed by ``q_i``), giving
    ``2**|B|`` candidate patterns. A candidate is accepted when it is cone
    feasible and its multipliers ``(A eta - h)_i`` satisfy ``q_i m_i >= 0`` on
    the zero-held biactive indices. Test-scale only.
    """
    if sol is None:
        sol = solve_vi(data, u)
    h = as_vector(h, data.n, "h")
    B = sol.sets.biactive.indices
    if B.size > max_biactive:
        raise OracleFailure(f"{B.size} biactive indices exceed the oracle limit {max_biactive}")
    A = data.A
    scale = max(1.0, float(np.linalg.norm(h)))
    for bits in range(1 << B.size):
        Z = IndexSet(B[[b for b in range(B.size) if bits >> b & 1]])
        N = sol.sets.strongly_active.union(Z)
        eta = reduced_solve(A, N, h)
        free_B = np.setdiff1d(B, Z.indices)
        if np.any(sol.q[free_B] * eta[free_B] < -tol * scale):
            continue
        mult = A @ eta - h
        zi = Z.indices
        if np.any(sol.q[zi] * mult[zi] < -tol * scale):
            continue
        return eta
    raise OracleFailure("no sign pattern satisfies the cone optimality conditions")
