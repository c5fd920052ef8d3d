"""Symmetric eigenvalue engine built on Sturm-sequence inertia counts.

Dense operators are reduced to tridiagonal form once; every count is then a
single O(n) pass over the LDL^T pivots of T - lambda*I.  One-dimensional
operators are natively tridiagonal and never densified.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from numba import njit
from scipy.linalg import lapack

from .errors import DomainError, NumericalError
from .operator import DiscreteOperator

PIVOT_FLUSH = 1e-30
NATIVE_HOUSEHOLDER_MAX = 256
MAX_DENSE_DIM = 4096


@njit(cache=True)
def _sturm_count(diag, off2, lam, flush):
    n = diag.shape[0]
    count = 0
    p = diag[0] - lam
    if abs(p) < flush:
        p = -flush
    if p < 0.0:
        count += 1
    for i in range(1, n):
        p = diag[i] - lam - off2[i - 1] / p
        if abs(p) < flush:
            p = -flush
        if p < 0.0:
            count += 1
    return count


@njit(cache=True)
def _sturm_counts(diag, off2, lams, flush):
    out = np.empty(lams.shape[0], dtype=np.int64)
    for j in range(lams.shape[0]):
        out[j] = _sturm_count(diag, off2, lams[j], flush)
    return out


@njit(cache=True)
def _bisect_kth(diag, off2, k, lo, hi, tol, flush):
    """Smallest x in [lo, hi] with count(x) >= k+1, to fp resolution or tol."""
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi or hi - lo <= tol:
            break
        if _sturm_count(diag, off2, mid, flush) >= k + 1:
            hi = mid
        else:
            lo = mid
    return hi


BISECT_LANES = 8


@njit(cache=True)
def _bisect_lowest(diag, off2, k, lo, hi, tol, flush):
    """Bisect eigenvalues 0..k-1 in groups of lanes sharing one pass over the pivots.

    The interleaved Sturm recurrences are independent, which hides the
    latency of the division chain.  Each lane follows exactly the iteration
    of ``_bisect_kth``.
    """
    out = np.empty(k)
    n = diag.shape[0]
    lanes = BISECT_LANES
    a = np.empty(lanes)
    b = np.empty(lanes)
    mid = np.empty(lanes)
    p = np.empty(lanes)
    cnt = np.zeros(lanes, dtype=np.int64)
    active = np.zeros(lanes, dtype=np.bool_)
    for start in range(0, k, lanes):
        m = min(lanes, k - start)
        for j in range(lanes):
            a[j] = lo
            b[j] = hi
            active[j] = j < m
        for _ in range(2000):
            any_active = False
            for j in range(m):
                if active[j]:
                    mj = 0.5 * (a[j] + b[j])
                    if mj <= a[j] or mj >= b[j] or b[j] - a[j] <= tol:
                        active[j] = False
                    else:
                        any_active = True
                    mid[j] = mj
            if not any_active:
                break
            for j in range(lanes):
                q = diag[0] - mid[j]
                if abs(q) < flush:
                    q = -flush
                p[j] = q
                cnt[j] = 1 if q < 0.0 else 0
            for i in range(1, n):
                di = diag[i]
                oi = off2[i - 1]
                for j in range(lanes):
                    q = di - mid[j] - oi / p[j]
                    if abs(q) < flush:
                        q = -flush
                    p[j] = q
                    if q < 0.0:
                        cnt[j] += 1
            for j in range(m):
                if active[j]:
                    if cnt[j] >= start + j + 1:
                        b[j] = mid[j]
                    else:
                        a[j] = mid[j]
        for j in range(m):
            out[start + j] = b[j]
    return out


def householder_tridiagonal(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonal reduction of a symmetric matrix to tridiagonal (diag, off)."""
    a = np.array(a, dtype=float, copy=True)
    n = a.shape[0]
    for k in range(n - 2):
        x = a[k + 1:, k]
        alpha = np.linalg.norm(x)
        if alpha == 0.0:
            continue
        if x[0] > 0:
            alpha = -alpha
        v = x.copy()
        v[0] -= alpha
        vnorm2 = v @ v
        if vnorm2 == 0.0:
            continue
        sub = a[k + 1:, k + 1:]
        p = sub @ v * (2.0 / vnorm2)
        kvec = p - (v @ p) / vnorm2 * v
        sub -= np.outer(v, kvec) + np.outer(kvec, v)
        a[k + 1, k] = a[k, k + 1] = alpha
        a[k + 2:, k] = 0.0
        a[k, k + 2:] = 0.0
    return np.diag(a).copy(), np.diag(a, 1).copy()


def _lapack_tridiagonal(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    _, d, e, _, info = lapack.dsytrd(np.asfortranarray(a, dtype=float), lower=1)
    if info != 0:
        raise NumericalError(f"LAPACK dsytrd failed with info={info}")
    return np.asarray(d, dtype=float), np.asarray(e, dtype=float)


@dataclass(frozen=True, eq=False)
class TridiagonalForm:
    """Tridiagonal matrix orthogonally similar to the operator."""

    diag: np.ndarray
    off: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.diag.shape[0])

    @property
    def off2(self) -> np.ndarray:
        return self.off * self.off

    @property
    def scale(self) -> float:
        return max(abs(self.lower), abs(self.upper), 1e-300)

    @property
    def _radius(self) -> np.ndarray:
        r = np.zeros(self.dim)
        if self.dim > 1:
            r[:-1] += np.abs(self.off)
            r[1:] += np.abs(self.off)
        return r

    @property
    def lower(self) -> float:
        return float(np.min(self.diag - self._radius))

    @property
    def upper(self) -> float:
        return float(np.max(self.diag + self._radius))


OperatorLike = Union[DiscreteOperator, TridiagonalForm, np.ndarray]


def _condition_report(a: np.ndarray) -> dict:
    finite = bool(np.all(np.isfinite(a)))
    report = {"dim": int(a.shape[0]), "finite": finite}
    if finite:
        report["asymmetry"] = float(np.max(np.abs(a - a.T)))
        report["frobenius"] = float(np.linalg.norm(a))
    return report


def tridiagonalize(op: OperatorLike, method: str = "auto") -> TridiagonalForm:
    """Tridiagonal form of ``op``; d = 1 operators use their native stencil."""
    if isinstance(op, TridiagonalForm):
        return op
    if isinstance(op, DiscreteOperator) and op.d == 1:
        return TridiagonalForm(*op.tridiagonal())
    if isinstance(op, DiscreteOperator):
        if op.dim > MAX_DENSE_DIM:
            raise DomainError(f"dense reduction limited to {MAX_DENSE_DIM} unknowns, got {op.dim}")
        a = op.to_dense()
    else:
        a = np.asarray(op, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DomainError("expected a square matrix")
    if not np.all(np.isfinite(a)) or not np.allclose(a, a.T, rtol=0, atol=1e-12 * max(1.0, np.abs(a).max())):
        raise NumericalError("tridiagonalization breakdown: matrix not finite and symmetric",
                             trace=_condition_report(a))
    if a.shape[0] == 1:
        return TridiagonalForm(a.diagonal().copy(), np.zeros(0))
    if method == "householder" or (method == "auto" and a.shape[0] <= NATIVE_HOUSEHOLDER_MAX):
        diag, off = householder_tridiagonal(a)
    elif method in ("lapack", "auto"):
        diag, off = _lapack_tridiagonal(a)
    else:
        raise DomainError(f"unknown tridiagonalization method {method!r}")
    if not (np.all(np.isfinite(diag)) and np.all(np.isfinite(off))):
        raise NumericalError("tridiagonalization produced non-finite entries",
                             trace=_condition_report(a))
    return TridiagonalForm(diag, off)


def count_leq(op: OperatorLike, lam: float) -> int:
    """Number of eigenvalues <= lam (ties included)."""
    tri = tridiagonalize(op)
    return int(_sturm_count(tri.diag, tri.off2, float(lam), PIVOT_FLUSH * tri.scale))


def count_many(tri: TridiagonalForm, lams) -> np.ndarray:
    lams = np.ascontiguousarray(lams, dtype=float)
    return _sturm_counts(tri.diag, tri.off2, lams, PIVOT_FLUSH * tri.scale)


def lowest_eigenvalues(op: OperatorLike, k: int, tol: Optional[float] = None) -> np.ndarray:
    """The k smallest eigenvalues by Sturm bisection.

    ``tol=None`` bisects to floating-point resolution; otherwise the bracket
    is closed to an absolute width ``tol``.
    """
    tri = tridiagonalize(op)
    if not 1 <= k <= tri.dim:
        raise DomainError(f"k must be in [1, {tri.dim}], got {k}")
    lo, hi = tri.lower, tri.upper
    pad = 1e-12 * tri.scale + 1e-300
    return _bisect_lowest(tri.diag, tri.off2, int(k), lo - pad, hi + pad,
                          0.0 if tol is None else float(tol), PIVOT_FLUSH * tri.scale)


def lowest_eigenvalue(op: OperatorLike) -> float:
    return float(lowest_eigenvalues(op, 1)[0])


@dataclass(frozen=True)
class SpectralSummary:
    lambda_grid: np.ndarray
    counts: np.ndarray
    lambda1: float
    dim: int


def counting_curve(op: OperatorLike, lambda_grid) -> SpectralSummary:
    """Counts on an increasing energy grid from a single tridiagonal reduction."""
    grid = np.asarray(lambda_grid, dtype=float).reshape(-1)
    if grid.size == 0 or np.any(np.diff(grid) <= 0):
        raise DomainError("lambda_grid must be nonempty and strictly increasing")
    tri = tridiagonalize(op)
    counts = count_many(tri, grid)
    return SpectralSummary(lambda_grid=grid, counts=counts,
                           lambda1=float(lowest_eigenvalues(tri, 1)[0]), dim=tri.dim)
