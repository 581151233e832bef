"""Max-of-linear model functions built from finite gradient bundles.

A bundle ``{g_1, ..., g_m}`` defines the positively homogeneous model
``phi(d) = max_j <g_j, d>``. Its stationarity measure
``psi = -min_{|d| <= 1} phi(d)`` equals the distance from the origin to the
convex hull of the bundle, which is computed with Wolfe's minimum-norm-point
algorithm.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import NotConverged
from .linalg import IndexSet

DEDUP_TOL = 1e-12
PSI_ZERO = 1e-14


class GradientBundle:
    """Non-empty finite set of gradients, deduplicated to ``DEDUP_TOL``.

    ``provenance[j]`` optionally records the index set that produced ``g_j``.
    When duplicates are merged the first occurrence wins.
    """

    __slots__ = ("gradients", "provenance")

    def __init__(self, gradients, provenance: Sequence[IndexSet] | None = None):
        g = np.atleast_2d(np.asarray(gradients, dtype=float))
        if g.shape[0] == 0:
            raise ValueError("a gradient bundle must contain at least one gradient")
        if not np.all(np.isfinite(g)):
            raise ValueError("bundle gradients must be finite")
        if provenance is not None and len(provenance) != g.shape[0]:
            raise ValueError("provenance must have one entry per gradient")
        keep: list[int] = []
        for j in range(g.shape[0]):
            if not any(np.max(np.abs(g[j] - g[k])) <= DEDUP_TOL for k in keep):
                keep.append(j)
        self.gradients = g[keep]
        self.gradients.setflags(write=False)
        self.provenance = None if provenance is None else [provenance[j] for j in keep]

    @property
    def dim(self) -> int:
        return self.gradients.shape[1]

    def __len__(self) -> int:
        return self.gradients.shape[0]

    def __repr__(self) -> str:
        return f"GradientBundle(size={len(self)}, dim={self.dim})"


def phi_eval(bundle: GradientBundle, d) -> float:
    d = np.asarray(d, dtype=float).reshape(-1)
    if d.shape[0] != bundle.dim:
        raise ValueError(f"direction has length {d.shape[0]}, bundle dimension is {bundle.dim}")
    return float(np.max(bundle.gradients @ d))


def _affine_min_norm(Q: np.ndarray) -> np.ndarray:
    """Weights ``w`` (summing to one) of the min-norm point of the affine hull of rows of Q."""
    k = Q.shape[0]
    if k == 1:
        return np.ones(1)
    D = (Q[1:] - Q[0]).T
    c = np.linalg.lstsq(D, -Q[0], rcond=None)[0]
    return np.concatenate(([1.0 - c.sum()], c))


def _reduce_face(P: np.ndarray, S: list[int], lam: np.ndarray):
    """Wolfe's minor cycle: move toward the affine min-norm point of ``P[S]``,
    dropping points whose weight reaches zero, until the weights are positive.
    """
    while True:
        w = _affine_min_norm(P[S])
        # tiny positive weights are kept: a correct weight can be far below
        # any fixed threshold when the points differ in scale
        if np.all(w > 0):
            return S, w
        neg = w <= 0
        den = lam[neg] - w[neg]
        theta = float(np.min(np.divide(lam[neg], den, out=np.zeros_like(den), where=den > 0)))
        lam = lam + theta * (w - lam)
        drop = lam <= 0
        if not drop.any():
            drop[int(np.argmin(lam))] = True
        S = [s for s, dropped in zip(S, drop) if not dropped]
        lam = lam[~drop]
        lam /= lam.sum()


def min_norm_point(points, max_iter: int | None = None):
    """Wolfe's algorithm for the point of smallest norm in ``conv(points)``.

    Returns ``(x, weights)`` with ``x = weights @ points``. Candidates enter in
    order of ``<p_j, x>``, ties to the lowest index.

    The entering test ``<p_j, x> < |x|^2`` carries an error of order
    ``eps * max|p|^2``, which swamps it once ``|x|`` nears
    ``sqrt(eps) * max|p|``. So every point that passes the test up to that
    error is tried, and a minor cycle is accepted only if it keeps the entering
    point and does not grow ``|x|``; the true decrease can be far below the
    resolution of ``|x|^2``. Faces are never revisited, so the search is
    finite. Norms are accurate to ``eps * max|p|``, so the result is too.
    """
    P = np.atleast_2d(np.asarray(points, dtype=float))
    m, n = P.shape
    if max_iter is None:
        max_iter = 10 * (m + n)
    sq = np.einsum("ij,ij->i", P, P)
    band = 64 * np.finfo(float).eps * float(np.max(sq))

    S = [int(np.argmin(sq))]
    lam = np.ones(1)
    x = P[S[0]].copy()
    seen = {frozenset(S)}
    for _ in range(max_iter):
        xx = float(x @ x)
        if xx == 0.0:
            break
        dots = P @ x
        dots[S] = np.inf
        moved = False
        for j in np.argsort(dots, kind="stable"):
            if dots[j] >= xx + band:
                break
            S_new, lam_new = _reduce_face(P, S + [int(j)], np.append(lam, 0.0))
            x_new = lam_new @ P[S_new]
            face = frozenset(S_new)
            if int(j) in face and face not in seen and x_new @ x_new <= xx:
                S, lam, x, moved = S_new, lam_new, x_new, True
                seen.add(face)
                break
        if not moved:
            break
    else:
        raise NotConverged("min-norm point", max_iter)
    weights = np.zeros(m)
    weights[S] = lam
    return x, weights


class Stationarity(NamedTuple):
    psi: float
    d_star: np.ndarray
    min_norm: np.ndarray


def stationarity_measure(bundle: GradientBundle) -> Stationarity:
    """``psi`` and the steepest model-descent direction ``d_star``.

    ``d_star = -g_bar / |g_bar|`` for the min-norm point ``g_bar``; when the
    origin lies in the hull ``psi`` is 0 and ``d_star`` is the zero vector.
    That is decided by ``psi <= 1e-14``, or by ``psi <= 64 eps max|g_j|``, the
    roundoff level of ``g_bar``, for larger bundles.
    """
    g_bar, _ = min_norm_point(bundle.gradients)
    psi = float(np.linalg.norm(g_bar))
    r = float(np.sqrt(np.max(np.einsum("ij,ij->i", bundle.gradients, bundle.gradients))))
    if psi <= max(PSI_ZERO, 64 * np.finfo(float).eps * r):
        return Stationarity(0.0, np.zeros(bundle.dim), g_bar)
    return Stationarity(psi, -g_bar / psi, g_bar)


class CauchyStep(NamedTuple):
    d: np.ndarray
    zeta: float
    model_value: float  # zeta + d'Hd/2, i.e. the model relative to f(x)
    psi: float


def modified_cauchy_step(bundle: GradientBundle, H, delta: float, mu: float = 1.0) -> CauchyStep:
    """Cauchy point of the bundle subproblem along the min-norm direction.

    The step ``t * d_star`` with ``t = min(delta, psi / d_star'H d_star)``
    (``t = delta`` for non-positive curvature) achieves the modified Cauchy
    decrease with ``mu = 1``. ``(d, zeta)`` is feasible for the linear-quadratic
    reformulation: ``|d| <= delta`` and ``<g_j, d> <= zeta`` for all ``j``.

    The returned ``psi`` is the descent rate ``-phi(d_star)`` actually attained
    along ``d_star``. It never exceeds the hull distance and agrees with it up
    to the min-norm solver tolerance; using it keeps the decrease guarantee
    exact when the hull distance is tiny compared with the gradients.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if not 0 < mu <= 1:
        raise ValueError("mu must lie in (0, 1]")
    st = stationarity_measure(bundle)
    psi = 0.0 if st.psi == 0.0 else -phi_eval(bundle, st.d_star)
    if psi <= PSI_ZERO:
        return CauchyStep(np.zeros(bundle.dim), 0.0, 0.0, 0.0)
    H = np.asarray(H, dtype=float)
    kappa = float(st.d_star @ H @ st.d_star)
    t = delta if kappa <= 0 else min(delta, psi / kappa)
    d = t * st.d_star
    zeta = phi_eval(bundle, d)
    return CauchyStep(d, zeta, zeta + 0.5 * float(d @ H @ d), psi)


@dataclass(frozen=True)
class LocalMaxModel:
    """Model that only sees the generators of the Clarke set at the current point.

    The trust-region radius is ignored, so no neighborhood information enters.
    """

    clarke_set: GradientBundle

    def phi(self, d, delta: float | None = None) -> float:
        return phi_eval(self.clarke_set, d)

    def bundle(self, delta: float | None = None) -> GradientBundle:
        return self.clarke_set

    def stationarity(self, delta: float | None = None) -> Stationarity:
        return stationarity_measure(self.clarke_set)


def local_max_model(clarke_set: GradientBundle) -> LocalMaxModel:
    return LocalMaxModel(clarke_set)
