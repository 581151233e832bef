"""Sparse SPD matrices, Jacobi-preconditioned CG, reduced solves and spectral bounds.

Vectors are plain one-dimensional float64 numpy arrays. Grid unknowns of the
2D Laplacian are ordered row-major: index ``j * m + i`` belongs to the interior
point ``((i + 1) h, (j + 1) h)``, so ``i`` runs along the first coordinate.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp

from .errors import NotConverged

SPECTRAL_SLACK = 1e-2
_SUBMATRIX_CACHE = 32


def as_vector(x, n: int | None = None, name: str = "vector") -> np.ndarray:
    v = np.array(x, dtype=float, copy=True).reshape(-1)
    if n is not None and v.shape[0] != n:
        raise ValueError(f"{name} has length {v.shape[0]}, expected {n}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    return v


class IndexSet:
    """Sorted, duplicate-free set of indices in ``[0, n)``."""

    __slots__ = ("_idx",)

    def __init__(self, indices=()):
        if not isinstance(indices, np.ndarray):
            indices = list(indices)
        idx = np.unique(np.asarray(indices, dtype=np.int64))
        if idx.size and idx[0] < 0:
            raise ValueError("indices must be non-negative")
        idx.setflags(write=False)
        self._idx = idx

    @classmethod
    def from_mask(cls, mask) -> "IndexSet":
        return cls(np.flatnonzero(np.asarray(mask, dtype=bool)))

    @classmethod
    def full(cls, n: int) -> "IndexSet":
        return cls(np.arange(n))

    @property
    def indices(self) -> np.ndarray:
        return self._idx

    def mask(self, n: int) -> np.ndarray:
        if self._idx.size and self._idx[-1] >= n:
            raise ValueError(f"index {self._idx[-1]} out of range for dimension {n}")
        m = np.zeros(n, dtype=bool)
        m[self._idx] = True
        return m

    def union(self, other: "IndexSet") -> "IndexSet":
        return IndexSet(np.union1d(self._idx, other._idx))

    def difference(self, other: "IndexSet") -> "IndexSet":
        return IndexSet(np.setdiff1d(self._idx, other._idx, assume_unique=True))

    def issubset(self, other: "IndexSet") -> bool:
        return bool(np.all(np.isin(self._idx, other._idx)))

    def __contains__(self, i) -> bool:
        k = np.searchsorted(self._idx, i)
        return bool(k < self._idx.size and self._idx[k] == i)

    def __len__(self) -> int:
        return int(self._idx.size)

    def __iter__(self):
        return iter(int(i) for i in self._idx)

    def __eq__(self, other) -> bool:
        return isinstance(other, IndexSet) and np.array_equal(self._idx, other._idx)

    def __hash__(self) -> int:
        return hash(self._idx.tobytes())

    def __repr__(self) -> str:
        return f"IndexSet({self._idx.tolist()})"


@dataclass(frozen=True, eq=False)
class SparseSpdMatrix:
    """Symmetric positive definite matrix in CSR storage.

    Symmetry is checked on construction; definiteness is asserted lazily by
    every solve, which raises instead of returning garbage.
    """

    csr: sp.csr_matrix
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        a = sp.csr_matrix(self.csr, dtype=float)
        if a.shape[0] != a.shape[1]:
            raise ValueError(f"matrix must be square, got {a.shape}")
        a.sum_duplicates()
        a.sort_indices()
        asym = abs(a - a.T)
        scale = abs(a).max() if a.nnz else 0.0
        if asym.nnz and asym.max() > 1e-12 * max(scale, 1.0):
            raise ValueError("matrix is not symmetric")
        if np.any(a.diagonal() <= 0):
            raise ValueError("matrix has a non-positive diagonal entry, cannot be SPD")
        object.__setattr__(self, "csr", a)

    @classmethod
    def from_dense(cls, a) -> "SparseSpdMatrix":
        return cls(sp.csr_matrix(np.asarray(a, dtype=float)))

    @property
    def n(self) -> int:
        return self.csr.shape[0]

    def __matmul__(self, x):
        return self.csr @ x

    def diagonal(self) -> np.ndarray:
        d = self._cache.get("diag")
        if d is None:
            d = self.csr.diagonal()
            self._cache["diag"] = d
        return d

    def toarray(self) -> np.ndarray:
        return self.csr.toarray()

    def principal_submatrix(self, keep: np.ndarray) -> sp.csr_matrix:
        """Rows and columns selected by the boolean mask ``keep``.

        The last few submatrices are cached by mask, since active-set sweeps
        and neighbouring trust-region iterates keep revisiting the same pattern.
        """
        keep = np.asarray(keep, dtype=bool)
        cache = self._cache.setdefault("sub", OrderedDict())
        key = keep.tobytes()
        sub = cache.get(key)
        if sub is None:
            sub = self.csr[keep][:, keep]
            cache[key] = sub
            if len(cache) > _SUBMATRIX_CACHE:
                cache.popitem(last=False)
        else:
            cache.move_to_end(key)
        return sub

    def bounds(self, tol: float = 1e-3) -> tuple[float, float]:
        """Cached :func:`spectral_bounds`."""
        key = ("bounds", tol)
        if key not in self._cache:
            self._cache[key] = spectral_bounds(self, tol)
        return self._cache[key]


def _csr(A) -> sp.csr_matrix:
    if isinstance(A, SparseSpdMatrix):
        return A.csr
    if isinstance(A, sp.csr_matrix):
        return A
    if sp.issparse(A):
        return sp.csr_matrix(A)
    return sp.csr_matrix(np.asarray(A, dtype=float))


def cg_solve(A, b, tol: float = 1e-12, max_iter: int | None = None, x0=None) -> np.ndarray:
    """Solve ``A x = b`` with Jacobi-preconditioned conjugate gradients.

    Stops once the true residual satisfies ``||Ax - b|| <= tol * max(1, ||b||)``.
    The recursive residual drifts from the true one near machine precision, so
    the loop restarts from the current iterate (at most three times) before
    giving up with :class:`NotConverged`.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    a = _csr(A)
    n = a.shape[0]
    b = as_vector(b, n, "right-hand side")
    if max_iter is None:
        max_iter = 10 * n + 100
    target = tol * max(1.0, float(np.linalg.norm(b)))
    inv_diag = 1.0 / a.diagonal()
    x = np.zeros(n) if x0 is None else as_vector(x0, n, "initial guess")
    r = b - a @ x
    used = 0
    for _ in range(4):
        if np.linalg.norm(r) <= target:
            return x
        z = inv_diag * r
        p = z.copy()
        rz = r @ z
        while used < max_iter:
            ap = a @ p
            pap = p @ ap
            if pap <= 0.0:
                raise NotConverged("cg (matrix is not positive definite)", used)
            alpha = rz / pap
            x += alpha * p
            r -= alpha * ap
            used += 1
            if np.linalg.norm(r) <= 0.5 * target:
                break
            z = inv_diag * r
            rz_new = r @ z
            p = z + (rz_new / rz) * p
            rz = rz_new
        r = b - a @ x
        if used >= max_iter:
            break
    res = float(np.linalg.norm(r))
    if res <= target:
        return x
    raise NotConverged("cg", max_iter, res)


def reduced_solve(A, N: IndexSet, b, tol: float = 1e-12) -> np.ndarray:
    """Solve the system with the rows and columns in ``N`` eliminated.

    Returns ``z`` with ``z[N] = 0`` and ``sum_{j not in N} A_ij z_j = b_i`` for
    every ``i`` outside ``N``. This is ``A(N)^{-1} chi(N) b``.
    """
    a = A if isinstance(A, SparseSpdMatrix) else SparseSpdMatrix(_csr(A))
    n = a.n
    b = as_vector(b, n, "right-hand side")
    free = ~N.mask(n)
    z = np.zeros(n)
    if not free.any():
        return z
    if free.all():
        return cg_solve(a, b, tol)
    z[free] = cg_solve(a.principal_submatrix(free), b[free], tol)
    return z


def spectral_bounds(A, tol: float = 1e-3, max_iter: int = 20000) -> tuple[float, float]:
    """Bounds ``(lo, hi)`` with ``lo <= lambda_min(A)`` and ``hi >= lambda_max(A)``.

    Power iteration estimates the largest eigenvalue, inverse power iteration
    (CG inner solves) the smallest. Both estimates are widened by the relative
    slack ``10 * tol`` and then tightened with Gershgorin bounds where those are
    sharper, since Gershgorin bounds are rigorous.
    """
    a = _csr(A)
    n = a.shape[0]
    slack = 10.0 * tol
    absrow = np.asarray(abs(a).sum(axis=1)).ravel()
    diag = a.diagonal()
    gersh_hi = float(np.max(absrow))
    gersh_lo = float(np.min(2.0 * diag - absrow))
    if n == 1:
        return float(diag[0]), float(diag[0])
    rng = np.random.default_rng(0)
    start = rng.standard_normal(n)
    start /= np.linalg.norm(start)

    v = start.copy()
    lam = 0.0
    for _ in range(max_iter):
        w = a @ v
        lam_new = float(v @ w)
        v = w / np.linalg.norm(w)
        if abs(lam_new - lam) <= 1e-6 * tol * abs(lam_new):
            lam = lam_new
            break
        lam = lam_new
    else:
        raise NotConverged("power iteration", max_iter)
    hi = min(lam * (1.0 + slack), gersh_hi)

    v = start.copy()
    mu = 0.0
    for _ in range(max_iter):
        w = cg_solve(a, v, 1e-10)
        mu_new = float(v @ w)
        v = w / np.linalg.norm(w)
        if abs(mu_new - mu) <= 1e-6 * tol * abs(mu_new):
            mu = mu_new
            break
        mu = mu_new
    else:
        raise NotConverged("inverse power iteration", max_iter)
    lam_min = min(1.0 / mu, float(v @ (a @ v)))
    lo = max(lam_min * (1.0 - slack), gersh_lo)
    if lo <= 0:
        raise NotConverged("spectral lower bound (matrix not positive definite?)", max_iter)
    return lo, hi


def spectral_norm(H: np.ndarray, tol: float = 1e-6, max_iter: int = 1000) -> float:
    """Power-iteration estimate of the spectral norm of a dense symmetric matrix.

    The returned value carries a 1% safety factor so it errs on the large side.
    """
    H = np.asarray(H, dtype=float)
    n = H.shape[0]
    if not np.any(H):
        return 0.0
    if n <= 64:
        return float(np.max(np.abs(np.linalg.eigvalsh(H)))) * (1.0 + SPECTRAL_SLACK)
    v = np.random.default_rng(1).standard_normal(n)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iter):
        w = H @ (H @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        new = float(np.sqrt(nw))
        v = w / nw
        if abs(new - est) <= tol * new:
            est = new
            break
        est = new
    return est * (1.0 + SPECTRAL_SLACK)


def assemble_laplacian_2d(m: int) -> SparseSpdMatrix:
    """Five-point finite-difference matrix of -Laplace on (0,1)^2, Dirichlet BC."""
    if m < 1:
        raise ValueError("m must be at least 1")
    h = 1.0 / (m + 1)
    t = sp.diags([-np.ones(m - 1), 2.0 * np.ones(m), -np.ones(m - 1)], [-1, 0, 1])
    eye = sp.identity(m)
    a = (sp.kron(eye, t) + sp.kron(t, eye)) / h**2
    return SparseSpdMatrix(sp.csr_matrix(a))


def read_matrix_market(path) -> SparseSpdMatrix:
    """Read a ``%%MatrixMarket matrix coordinate real symmetric`` file."""
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip().lower().split()
    if header[:5] != ["%%matrixmarket", "matrix", "coordinate", "real", "symmetric"]:
        raise ValueError(f"{path}: expected a coordinate real symmetric Matrix Market file")
    return SparseSpdMatrix(sp.csr_matrix(scipy.io.mmread(str(path))))
