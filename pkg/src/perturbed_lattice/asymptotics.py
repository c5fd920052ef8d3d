"""Closed-form exponents and constants of the low-energy asymptotics.

Also evaluates the variational constants: the Pastur functional (an
integral of a one-dimensional minimum) and upper bounds for the critical
constant K0 from explicit test functions.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, DomainError
from .randfield import SPHERE_AREA

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
SCAN_POINTS = 128
SCAN_RANGE = (1e-3, 1e3)
TAIL_REL_TOL = 1e-6


def kappa(d: int, theta: float, alpha: float) -> float:
    """IDS exponent (d + theta)/(alpha - d)."""
    if not alpha > d:
        raise DomainError(f"alpha must exceed d, got alpha={alpha}, d={d}")
    return (d + theta) / (alpha - d)


def gamma_exponent(d: int, theta: float, alpha: float) -> float:
    """Laplace-side exponent (d + theta)/(alpha + theta)."""
    return (d + theta) / (alpha + theta)


def mu_exponent(d: int, alpha: float) -> float:
    """Exponent 2(alpha - 2)/(d(alpha - d)) of the intermediate regime."""
    if not alpha > d:
        raise DomainError(f"alpha must exceed d, got alpha={alpha}, d={d}")
    return 2.0 * (alpha - 2.0) / (d * (alpha - d))


def kasahara_map(kappa_: float, c: float) -> tuple[float, float]:
    """Map log N_tilde(t) ~ -C t^gamma to log N(lambda) ~ -B lambda^-kappa.

    Returns (gamma, B) with gamma = kappa/(kappa+1) and
    B = kappa^kappa / (kappa+1)^(kappa+1) * C^(kappa+1).
    """
    if not (kappa_ > 0 and c > 0):
        raise DomainError("kappa and C must be positive")
    gamma = kappa_ / (kappa_ + 1.0)
    coeff = math.exp(kappa_ * math.log(kappa_) - (kappa_ + 1.0) * math.log(kappa_ + 1.0)
                     + (kappa_ + 1.0) * math.log(c))
    return gamma, coeff


def lifshitz_1d_constant(theta: float, h: float) -> float:
    """pi^(1+theta) h^((1+theta)/2) / ((1+theta) 2^theta)."""
    if not (theta > 0 and h > 0):
        raise DomainError("theta and h must be positive")
    return math.pi ** (1 + theta) * h ** ((1 + theta) / 2) / ((1 + theta) * 2**theta)


def negative_constant(d: int, theta: float) -> float:
    """C1 = d^(1+theta/d) / ((d+theta) |S^(d-1)|^(theta/d))."""
    if d not in SPHERE_AREA or not theta > 0:
        raise DomainError("need d in {1,2,3} and theta > 0")
    return d ** (1 + theta / d) / ((d + theta) * SPHERE_AREA[d] ** (theta / d))


def neg_laplace_coefficient(d: int, theta: float, u0: float) -> float:
    """u0^(1+d/theta) * integral over the unit ball of (1 - |q|^theta)."""
    if d not in SPHERE_AREA or not theta > 0:
        raise DomainError("need d in {1,2,3} and theta > 0")
    if not u0 > 0:
        raise DomainError("u0 must be positive")
    return u0 ** (1 + d / theta) * SPHERE_AREA[d] * theta / (d * (d + theta))


def legendre_coefficient(a: float, p: float) -> float:
    """B with sup_t (t s - a t^p) = B s^(p/(p-1)), p > 1."""
    if not (a > 0 and p > 1):
        raise DomainError("need a > 0 and p > 1")
    return (p - 1.0) / p * (p * a) ** (-1.0 / (p - 1.0))


def lambda1_hard_1d(max_gap: float, h: float = 1.0, c6: float = 0.0) -> float:
    """Ground energy h pi^2/(gap + c6)^2 of the largest free interval."""
    if not max_gap > 0:
        raise DomainError("max_gap must be positive")
    return h * math.pi**2 / (max_gap + c6) ** 2


# -- Pastur functional ------------------------------------------------------

def _inner_objective(r, s, theta, alpha, c0):
    return c0 * r ** (-alpha) + np.abs(r - s) ** theta


def inner_minimum(s, theta: float, alpha: float, c0: float, *, iters: int = 90) -> np.ndarray:
    """min over r > 0 of c0 r^-alpha + |r - s|^theta, vectorized in s.

    A log-spaced scan plus the candidate r = s locates the best bracket;
    golden-section search then refines inside it.
    """
    s = np.atleast_1d(np.asarray(s, dtype=float))
    frac = np.linspace(0.0, 1.0, SCAN_POINTS)
    hi = np.maximum(SCAN_RANGE[1], 2.0 * s)
    lo = np.full_like(s, SCAN_RANGE[0])
    scan = lo[:, None] * (hi / lo)[:, None] ** frac[None, :]
    cand = np.sort(np.concatenate([scan, np.maximum(s, SCAN_RANGE[0])[:, None]], axis=1), axis=1)
    vals = _inner_objective(cand, s[:, None], theta, alpha, c0)
    k = np.argmin(vals, axis=1)
    rows = np.arange(s.shape[0])
    best = vals[rows, k]
    a = cand[rows, np.maximum(k - 1, 0)]
    b = cand[rows, np.minimum(k + 1, cand.shape[1] - 1)]
    x1 = b - GOLDEN * (b - a)
    x2 = a + GOLDEN * (b - a)
    f1 = _inner_objective(x1, s, theta, alpha, c0)
    f2 = _inner_objective(x2, s, theta, alpha, c0)
    for _ in range(iters):
        left = f1 < f2
        b = np.where(left, x2, b)
        a = np.where(left, a, x1)
        x2n = np.where(left, x1, a + GOLDEN * (b - a))
        x1n = np.where(left, b - GOLDEN * (b - a), x2)
        f2n = np.where(left, f1, _inner_objective(x2n, s, theta, alpha, c0))
        f1n = np.where(left, _inner_objective(x1n, s, theta, alpha, c0), f2)
        x1, x2, f1, f2 = x1n, x2n, f1n, f2n
    return np.minimum(best, np.minimum(f1, f2))


def _adaptive_gl(func: Callable, a: float, b: float, rtol: float = 1e-10, max_levels: int = 40) -> float:
    """Vectorized adaptive Gauss-Legendre (7 vs 15 nodes) on [a, b]."""
    n7, w7 = np.polynomial.legendre.leggauss(7)
    n15, w15 = np.polynomial.legendre.leggauss(15)
    edges = np.geomspace(max(a, 1e-6), b, 33) if a == 0 else np.linspace(a, b, 33)
    if a == 0:
        edges = np.concatenate([[0.0], edges])
    intervals = np.stack([edges[:-1], edges[1:]], axis=1)
    total = 0.0
    for _ in range(max_levels):
        mid = intervals.mean(axis=1)[:, None]
        half = 0.5 * (intervals[:, 1] - intervals[:, 0])[:, None]
        i7 = np.sum(func((mid + half * n7).ravel()).reshape(-1, 7) * w7, axis=1) * half[:, 0]
        i15 = np.sum(func((mid + half * n15).ravel()).reshape(-1, 15) * w15, axis=1) * half[:, 0]
        scale = abs(total) + abs(np.sum(i15)) + 1e-300
        done = np.abs(i15 - i7) <= rtol * scale * (half[:, 0] * 2 / (b - a) + 1e-3)
        total += math.fsum(i15[done])
        rest = intervals[~done]
        if rest.shape[0] == 0:
            return total
        m = rest.mean(axis=1)
        intervals = np.concatenate([np.stack([rest[:, 0], m], 1), np.stack([m, rest[:, 1]], 1)])
    return total + math.fsum(i15[~done])


def pastur_constant(d: int, theta: float, alpha: float, c0: float, *, return_info: bool = False):
    """|S^(d-1)| * integral over s > 0 of s^(d-1) min_r (c0 r^-alpha + |r - s|^theta).

    The minimum over displacement vectors reduces to the scalar problem
    along the ray through the site.  Beyond s_max the integrand is replaced
    by its exact leading term c0 s^-alpha.
    """
    if not alpha > d:
        raise DomainError(f"Pastur integral diverges for alpha <= d (alpha={alpha}, d={d})")
    if not (theta > 0 and c0 > 0):
        raise DomainError("theta and c0 must be positive")
    area = SPHERE_AREA[d]

    def integrand(s):
        return s ** (d - 1) * inner_minimum(s, theta, alpha, c0)

    s_max = 100.0
    body = area * _adaptive_gl(integrand, 0.0, s_max)
    while True:
        tail = area * c0 * s_max ** (d - alpha) / (alpha - d)
        if tail < TAIL_REL_TOL * body:
            break
        s_new = s_max * 10.0
        body += area * _adaptive_gl(integrand, s_max, s_new)
        s_max = s_new
    value = body + tail
    if return_info:
        return value, {"s_max": s_max, "tail": tail, "scan_points": SCAN_POINTS,
                       "scan_range": list(SCAN_RANGE), "tail_rel_tol": TAIL_REL_TOL}
    return value


# -- critical constant K0 ---------------------------------------------------

@dataclass(frozen=True, eq=False)
class TestFunctionProfile:
    """Test function sampled on a uniform tensor grid.

    ``axis`` holds the 1-D node coordinates; ``values`` has shape
    ``(len(axis),) * d``; the support lies in the cube |x|_inf <= support_radius.
    """

    axis: np.ndarray
    values: np.ndarray
    support_radius: float

    @property
    def d(self) -> int:
        return self.values.ndim

    @property
    def spacing(self) -> float:
        return float(self.axis[1] - self.axis[0])

    @property
    def norm2(self) -> float:
        return float(np.sqrt(np.sum(self.values**2) * self.spacing**self.d))


def cosine_profile(d: int, sigma: float, points_per_unit: int = 200) -> TestFunctionProfile:
    """Product of Dirichlet ground states sigma^(-1/2) cos(pi x / (2 sigma)) on [-sigma, sigma]^d."""
    n = max(16, int(math.ceil(2 * sigma * points_per_unit)))
    axis = -sigma + (np.arange(n) + 0.5) * (2 * sigma / n)
    one = np.cos(math.pi * axis / (2 * sigma)) / math.sqrt(sigma)
    vals = one
    for _ in range(d - 1):
        vals = np.multiply.outer(vals, one)
    return TestFunctionProfile(axis=axis, values=vals, support_radius=sigma)


def _dirichlet_energy(psi: TestFunctionProfile) -> float:
    """||grad psi||^2 with forward differences and zero values outside the grid."""
    dx = psi.spacing
    total = 0.0
    for ax in range(psi.d):
        pad = [(0, 0)] * psi.d
        pad[ax] = (1, 1)
        diff = np.diff(np.pad(psi.values, pad), axis=ax) / dx
        total += float(np.sum(diff**2)) * dx**psi.d
    return total


def k0_objective(h: float, theta: float, c0: float, psi: TestFunctionProfile, *,
                 kernel_exponent: Optional[float] = None, q_extent: float = 40.0,
                 q_step: Optional[float] = None, norm_tol: float = 1e-3,
                 return_parts: bool = False):
    """Discrete evaluation of the critical variational objective for one test function.

    h ||grad psi||^2 + integral dq inf over w outside supp psi of
    (c0 * integral psi(x)^2 |x - w|^-k dx + |w - q|^theta),   k = d + 2 by default.

    The q integral runs over |q|_inf <= q_extent; outside, the choice w = q
    bounds the integrand by c0 (|q| - support)^-k, integrated analytically,
    so the result stays an upper bound of the infimum over test functions.
    """
    d = psi.d
    if abs(psi.norm2 - 1.0) > norm_tol:
        raise DomainError(f"test function must be L2-normalized, norm = {psi.norm2:.6g}")
    k = float(d + 2 if kernel_exponent is None else kernel_exponent)
    if not k > d:
        raise DomainError("kernel exponent must exceed d")
    kinetic = h * _dirichlet_energy(psi)

    sup_r = psi.support_radius
    dx = psi.spacing
    mesh = np.meshgrid(*([psi.axis] * d), indexing="ij")
    xs = np.stack([m.ravel() for m in mesh], axis=1)
    mass = psi.values.ravel() ** 2 * dx**d
    keep = mass > 0
    xs, mass = xs[keep], mass[keep]

    q_step = q_step or max(dx, sup_r / 40.0)
    # candidate sites w outside the support: geometric offsets from the support edge
    offsets = sup_r * np.geomspace(1e-3, 4.0 * q_extent / max(sup_r, 1e-9), 160)
    if d == 1:
        w_pts = np.concatenate([-(sup_r + offsets), sup_r + offsets])[:, None]
        q_ax = np.arange(-q_extent, q_extent + q_step / 2, q_step)
        q_pts = q_ax[:, None]
    else:
        w_ax = np.concatenate([-(sup_r + offsets[::-1]), np.linspace(-sup_r, sup_r, 21), sup_r + offsets])
        wm = np.meshgrid(*([w_ax] * d), indexing="ij")
        w_pts = np.stack([m.ravel() for m in wm], axis=1)
        w_pts = w_pts[np.max(np.abs(w_pts), axis=1) > sup_r]
        q_ax = np.arange(-q_extent, q_extent + q_step / 2, q_step)
        qm = np.meshgrid(*([q_ax] * d), indexing="ij")
        q_pts = np.stack([m.ravel() for m in qm], axis=1)

    field = np.empty(w_pts.shape[0])
    for s in range(0, w_pts.shape[0], 512):
        diff = w_pts[s:s + 512, None, :] - xs[None, :, :]
        dist = np.sqrt(np.sum(diff * diff, axis=-1))
        field[s:s + 512] = c0 * np.sum(mass[None, :] * dist ** (-k), axis=1)

    inner = np.empty(q_pts.shape[0])
    for s in range(0, q_pts.shape[0], 256):
        qd = q_pts[s:s + 256, None, :] - w_pts[None, :, :]
        cost = field[None, :] + np.sqrt(np.sum(qd * qd, axis=-1)) ** theta
        best = np.min(cost, axis=1)
        # w = q itself when q lies outside the support
        qs = q_pts[s:s + 256]
        outside = np.max(np.abs(qs), axis=1) > sup_r
        if outside.any():
            diff = qs[outside, None, :] - xs[None, :, :]
            own = c0 * np.sum(mass[None, :] * np.sqrt(np.sum(diff * diff, axis=-1)) ** (-k), axis=1)
            best[outside] = np.minimum(best[outside], own)
        inner[s:s + 256] = best
    potential_term = float(np.sum(inner)) * q_step**d
    rho = q_extent - sup_r * math.sqrt(d)
    tail = c0 * SPHERE_AREA[d] * rho ** (d - k) / (k - d) * (q_extent / rho) ** (d - 1)
    value = kinetic + potential_term + tail
    if return_parts:
        return value, {"kinetic": kinetic, "potential": potential_term, "tail": tail}
    return value


def optimize_k0_width(h: float, theta: float, c0: float, d: int = 1, *,
                      sigmas=None, points_per_unit: int = 200, iters: int = 20,
                      **kw) -> tuple[float, float, dict]:
    """Scan the width of the cosine profile, then refine by golden section.

    Returns (best sigma, objective value, scan record).  The value is an
    upper bound on K0(h, c0) up to discretization error.
    """
    if sigmas is None:
        sigmas = np.geomspace(0.2, 8.0, 17)
    sigmas = np.asarray(sigmas, dtype=float)

    def obj(sig):
        return k0_objective(h, theta, c0, cosine_profile(d, sig, points_per_unit), **kw)

    vals = np.array([obj(s) for s in sigmas])
    i = int(np.argmin(vals))
    a = sigmas[max(i - 1, 0)]
    b = sigmas[min(i + 1, len(sigmas) - 1)]
    best_s, best_v = float(sigmas[i]), float(vals[i])
    x1, x2 = b - GOLDEN * (b - a), a + GOLDEN * (b - a)
    f1, f2 = obj(x1), obj(x2)
    for _ in range(iters):
        if f1 < f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - GOLDEN * (b - a)
            f1 = obj(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + GOLDEN * (b - a)
            f2 = obj(x2)
    for s_, v_ in ((x1, f1), (x2, f2)):
        if v_ < best_v:
            best_s, best_v = float(s_), float(v_)
    return best_s, best_v, {"sigmas": sigmas.tolist(), "values": vals.tolist()}


# -- bundle -----------------------------------------------------------------

@dataclass(frozen=True)
class AsymptoticConstants:
    kappa: float
    mu: float
    gamma: float
    pastur_k: float
    lifshitz_1d: float
    c1: float
    neg_coeff: float

    def to_dict(self) -> dict:
        return asdict(self)


def compute_constants(d: int, theta: float, alpha: float, c0: float, h: float = 1.0,
                      u0: float = 1.0) -> AsymptoticConstants:
    if not alpha > d:
        raise ConfigError(f"alpha must exceed d={d}", field="spec.alpha")
    return AsymptoticConstants(
        kappa=kappa(d, theta, alpha), mu=mu_exponent(d, alpha),
        gamma=gamma_exponent(d, theta, alpha), pastur_k=pastur_constant(d, theta, alpha, c0),
        lifshitz_1d=lifshitz_1d_constant(theta, h), c1=negative_constant(d, theta),
        neg_coeff=neg_laplace_coefficient(d, theta, u0))
