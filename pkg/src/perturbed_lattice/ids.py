"""Integrated density of states and its Laplace-Stieltjes transforms.

Estimators
----------
* ``empirical_ids`` / ``negative_ids``: E[#eigenvalues <= lambda] / R^d over
  sampled configurations, by Sturm counting.
* ``classical_ids``: phase-space volume of {|p|^2 + V <= lambda} per volume.
* ``laplace_from_ids``: Stieltjes sums of an IDS curve, with lower and upper
  bracketing sums.
* ``n1_quadrature`` (d = 1): E over the field of exp(-t V) averaged over the
  unit cell, using independence across sites and a per-site quadrature.
* ``n1_mc``: the same quantity by Monte Carlo in any dimension.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import special
from scipy.optimize import isotonic_regression

from .errors import ConfigError, DomainError, NumericalError, ResourceError
from .operator import GridSpec, assemble
from .randfield import (BALL_VOLUME, SPHERE_AREA, ModelParams, PotentialSpec, displacements_from_uniforms,
                        field_v, lattice_box, normalizer, potential_u, radial_moment, sample_configuration,
                        site_uniforms, stream_key)
from .spectra import counting_curve

N1_MC_STREAM = 1


@dataclass(eq=False)
class IdsCurve:
    """Monte Carlo estimate of N(lambda) on a fixed energy grid.

    ``per_replicate`` keeps each replicate's normalized counting function so
    that derived transforms get honest error bars.
    """

    lambda_grid: np.ndarray
    n_hat: np.ndarray
    stderr: np.ndarray
    replicates: int
    per_replicate: Optional[np.ndarray] = None
    lambda1: Optional[np.ndarray] = None
    total_density: float = math.nan
    sign: int = 1
    meta: dict = field(default_factory=dict)


@dataclass(eq=False)
class LaplaceCurve:
    """log of a Laplace-type transform on a grid of t.

    For ``from_ids`` curves ``log_values`` is the lower Stieltjes sum and
    ``log_upper`` the matching upper sum including the truncation remainder.
    """

    t_grid: np.ndarray
    log_values: np.ndarray
    kind: str
    stderr: Optional[np.ndarray] = None
    log_upper: Optional[np.ndarray] = None
    remainder: Optional[np.ndarray] = None
    flagged: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)


def _summation(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard error over axis 0 with compensated, order-fixed sums."""
    n = rows.shape[0]
    mean = np.array([math.fsum(col) / n for col in rows.T])
    dev = rows - mean
    var = np.array([math.fsum(col) for col in (dev * dev).T]) / (n - 1)
    return mean, np.sqrt(var / n)


def _replicate_counts(args):
    params, spec, grid, lambda_grid, replicate, sign, tail_tol = args
    if spec.u_max == 0 and spec.obstacle_rho == 0:
        config = None
    else:
        config = sample_configuration(params, spec, grid.box_r, replicate, tail_tol=tail_tol)
    op = assemble(grid, config, spec, sign, h=params.h)
    summary = counting_curve(op, lambda_grid)
    return summary.counts.astype(float), summary.lambda1, summary.dim


def _run_replicates(params: ModelParams, spec: PotentialSpec, grid: GridSpec, lambda_grid,
                    replicates: int, sign: int, tail_tol: float) -> IdsCurve:
    if replicates < 2:
        raise ConfigError("replicates must be >= 2", field="replicates")
    if grid.d != params.d:
        raise ConfigError("grid dimension differs from params.d", field="grid.d")
    spec.check_dimension(params.d)
    lambda_grid = np.asarray(lambda_grid, dtype=float)
    jobs = [(params, spec, grid, lambda_grid, r, sign, tail_tol) for r in range(replicates)]
    if params.workers > 1:
        with ProcessPoolExecutor(max_workers=params.workers) as pool:
            results = list(pool.map(_replicate_counts, jobs))
    else:
        results = [_replicate_counts(job) for job in jobs]
    volume = grid.box_r**grid.d
    rows = np.stack([res[0] for res in results]) / volume
    lambda1 = np.array([res[1] for res in results])
    dims = np.array([res[2] for res in results])
    mean, se = _summation(rows)
    meta = {"box_r": grid.box_r, "dx": grid.dx, "n_per_side": grid.n_per_side, "bc": grid.bc,
            "d": grid.d, "theta": params.theta, "h": params.h, "seed": params.seed,
            "tail_tol": tail_tol}
    return IdsCurve(lambda_grid=lambda_grid, n_hat=mean, stderr=se, replicates=replicates,
                    per_replicate=rows, lambda1=lambda1, total_density=float(dims.max() / volume),
                    sign=sign, meta=meta)


def empirical_ids(params: ModelParams, spec: PotentialSpec, grid: GridSpec, lambda_grid,
                  replicates: int, *, tail_tol: float = 1e-6) -> IdsCurve:
    """N(lambda) for H = -h Laplacian + V with Dirichlet conditions on the box."""
    if spec.sign != 1:
        raise ConfigError("empirical_ids needs sign = +1; use negative_ids", field="spec.sign")
    if grid.bc != "dirichlet":
        raise ConfigError("the IDS is defined through Dirichlet boxes", field="grid.bc")
    return _run_replicates(params, spec, grid, lambda_grid, replicates, 1, tail_tol)


def negative_ids(params: ModelParams, spec: PotentialSpec, grid: GridSpec, lambda_grid,
                 replicates: int, *, tail_tol: float = 1e-6) -> IdsCurve:
    """N^-(lambda) for H = -h Laplacian - V (bounded u, no obstacles)."""
    if spec.sign != -1:
        raise ConfigError("negative_ids needs sign = -1", field="spec.sign")
    if spec.obstacle_rho != 0:
        raise ConfigError("negative potential requires obstacle_rho = 0", field="spec.obstacle_rho")
    if not math.isfinite(spec.u_cap):
        raise ConfigError("negative potential requires a finite u_cap", field="spec.u_cap")
    return _run_replicates(params, spec, grid, lambda_grid, replicates, -1, tail_tol)


def classical_ids(params: ModelParams, spec: PotentialSpec, lambda_grid, replicates: int, *,
                  box_r: float = 8.0, points_per_unit: int = 16,
                  tail_tol: float = 1e-6) -> IdsCurve:
    """Classical IDS: omega_d (2 pi sqrt h)^-d R^-d E int (lambda - V)_+^{d/2} dx.

    The x integral uses the midpoint rule with ``points_per_unit`` cells per
    unit length on each axis.
    """
    if spec.sign != 1:
        raise ConfigError("classical_ids needs sign = +1", field="spec.sign")
    if replicates < 2:
        raise ConfigError("replicates must be >= 2", field="replicates")
    d = params.d
    lam = np.asarray(lambda_grid, dtype=float)
    m = max(1, int(round(box_r * points_per_unit)))
    ax = -box_r / 2 + (np.arange(m) + 0.5) * box_r / m
    mesh = np.meshgrid(*([ax] * d), indexing="ij")
    x = np.stack([g.ravel() for g in mesh], axis=1)
    cell = (box_r / m) ** d
    pref = BALL_VOLUME[d] * (2 * math.pi * math.sqrt(params.h)) ** (-d) / box_r**d
    free = spec.u_max == 0
    rows = []
    for r in range(replicates):
        if free:
            v = np.zeros(x.shape[0])
        else:
            cfg = sample_configuration(params, spec, box_r, r, tail_tol=tail_tol)
            v = field_v(cfg, spec, x)
        gap = np.maximum(lam[:, None] - v[None, :], 0.0)
        rows.append(pref * cell * np.sum(gap ** (d / 2), axis=1))
    rows = np.stack(rows)
    mean, se = _summation(rows)
    return IdsCurve(lambda_grid=lam, n_hat=mean, stderr=se, replicates=replicates, per_replicate=rows,
                    sign=1, meta={"kind": "classical", "box_r": box_r,
                                  "points_per_unit": points_per_unit, "d": d,
                                  "theta": params.theta, "h": params.h, "seed": params.seed})


# -- Laplace transforms of IDS curves ---------------------------------------

def isotonic(values) -> np.ndarray:
    """Pool-adjacent-violators nondecreasing fit."""
    return np.asarray(isotonic_regression(np.asarray(values, dtype=float)).x)


def _stieltjes_bounds(lam, n_vals, t, floor, total):
    """(log lower, log upper) Stieltjes sums of a nondecreasing step curve at time t."""
    mass = np.diff(np.concatenate([[0.0], n_vals]))
    mass = np.maximum(mass, 0.0)
    lower = special.logsumexp(-t * lam, b=mass) if mass.any() else -np.inf
    left = np.concatenate([[floor], lam[:-1]])
    tail = max(total - n_vals[-1], 0.0)
    exps = np.concatenate([-t * left, [-t * lam[-1]]])
    weights = np.concatenate([mass, [tail]])
    upper = special.logsumexp(exps, b=weights) if weights.any() else -np.inf
    return float(lower), float(upper)


def laplace_from_ids(curve: IdsCurve, t_grid) -> LaplaceCurve:
    """Stieltjes transform of an IDS curve: integral of exp(-t lambda) dN(lambda).

    Lower sums put each increment at the right end of its cell; upper sums
    put it at the left end, the mass below the grid at the smallest observed
    eigenvalue, and the mass above the grid at the grid end, which bounds the
    truncation remainder by exp(-t lambda_max) times the total state density.
    """
    t = np.asarray(t_grid, dtype=float)
    if np.any(t <= 0):
        raise DomainError("t must be positive")
    lam = np.asarray(curve.lambda_grid, dtype=float)
    if curve.lambda1 is not None and len(curve.lambda1):
        floor = float(np.min(curve.lambda1))
    else:
        floor = 0.0 if curve.sign == 1 else float(lam[0])
    floor = min(floor, float(lam[0]))
    total = curve.total_density if math.isfinite(curve.total_density) else float(curve.n_hat[-1])
    mean_curve = isotonic(curve.n_hat)
    lower = np.empty_like(t)
    upper = np.empty_like(t)
    for i, ti in enumerate(t):
        lower[i], upper[i] = _stieltjes_bounds(lam, mean_curve, ti, floor, total)
    remainder = np.exp(-t * lam[-1]) * total
    if curve.per_replicate is not None and curve.per_replicate.shape[0] >= 2:
        reps = np.array([[_stieltjes_bounds(lam, isotonic(row), ti, floor, total)[0] for ti in t]
                         for row in curve.per_replicate])
        finite = np.isfinite(lower)
        rel = np.full(t.shape, np.inf)
        if finite.any():
            ratios = np.exp(reps[:, finite] - lower[finite])
            rel[finite] = np.std(ratios, axis=0, ddof=1) / math.sqrt(reps.shape[0])
        stderr = rel
    else:
        stderr = _propagated_log_stderr(lam, curve.stderr, t, lower)
    return LaplaceCurve(t_grid=t, log_values=lower, kind="from_ids" if curve.sign == 1 else "negative",
                        stderr=stderr, log_upper=upper, remainder=remainder,
                        meta=dict(curve.meta, floor=floor))


def _propagated_log_stderr(lam, se, t, log_lower):
    """Error of the lower sum from pointwise standard errors, assumed independent."""
    out = np.empty_like(t)
    for i, ti in enumerate(t):
        w = np.exp(-ti * lam)
        dw = w - np.concatenate([w[1:], [0.0]])
        var = np.sum((dw * se) ** 2)
        out[i] = math.sqrt(var) / math.exp(log_lower[i]) if np.isfinite(log_lower[i]) else np.inf
    return out


# -- unit-cell Laplace transform, d = 1 quadrature --------------------------

def _gl(order: int):
    nodes, weights = np.polynomial.legendre.leggauss(order)
    return nodes, weights


def _tail_sf(theta: float, y):
    """P(xi > y) for y >= 0 in d = 1."""
    return 0.5 * special.gammaincc(1.0 / theta, np.asarray(y, dtype=float) ** theta)


def _log_factor_compact(z, st, theta, spec):
    """log E exp(-st u(z - xi)) for the compact variant, exactly via the CDF."""
    a = z - spec.compact_r
    b = z + spec.compact_r
    s_a = _tail_sf(theta, np.abs(a))
    s_b = _tail_sf(theta, np.abs(b))
    # z >= 0 here, so b > 0
    straddle = a < 0
    p_in = np.where(straddle, 1.0 - s_a - s_b, s_a - s_b)
    p_out = np.where(straddle, s_a + s_b, 1.0 - s_a + s_b)
    with np.errstate(divide="ignore"):
        return np.logaddexp(np.log(p_out), -st * spec.u_cap + np.log(np.maximum(p_in, 0.0)))


def _decay_exponent(y, z, st, theta, spec):
    """G(y) = |y|^theta + st u(z - y) (d = 1)."""
    r = np.abs(z - y)
    with np.errstate(divide="ignore"):
        uu = spec.c0 / np.maximum(r, spec.r0) ** spec.alpha
    uu = np.minimum(uu, spec.u_cap)
    return np.abs(y) ** theta + st * uu


def _decay_panels(z, st, theta, spec, level):
    """Per-z panel breakpoints (rows sorted) for the decay-variant integral over y."""
    nz = z.shape[0]
    probe_r = np.geomspace(1e-3, 1e4, 200)
    cand = np.concatenate([np.zeros((nz, 1)), z[:, None], z[:, None] + probe_r, z[:, None] - probe_r], axis=1)
    g_up = np.min(_decay_exponent(cand, z[:, None], st, theta, spec), axis=1)
    lift = st * spec.u_max if st < 0 else 0.0
    slack = 50.0
    y_max = (np.maximum(g_up - lift, 0.0) + slack) ** (1.0 / theta)

    refine = 2**level
    n_uniform = refine * int(max(64, math.ceil(np.max(g_up - lift) + slack)))
    uni = -1.0 + 2.0 * np.arange(n_uniform + 1) / n_uniform
    geo0 = 0.5 ** np.arange(1, 40)
    pieces = [uni[None, :] * y_max[:, None],
              geo0[None, :] * y_max[:, None], -geo0[None, :] * y_max[:, None], np.zeros((nz, 1))]

    r_eff = spec.core_radius
    a = abs(st) * spec.c0
    if a > 0:
        r_lo = np.maximum((a / (np.abs(g_up) + slack)) ** (1.0 / spec.alpha), r_eff)
        r_hi = np.maximum(2.0 * r_lo, (2.0 * a) ** (1.0 / spec.alpha))
        ratio = 1.05 ** (1.0 / refine)
        count = int(min(4000, math.ceil(np.max(np.log(r_hi / r_lo)) / math.log(ratio)) + 1))
        frac = np.linspace(0.0, 1.0, count + 1)
        radii = r_lo[:, None] * (r_hi / r_lo)[:, None] ** frac[None, :]
        pieces += [z[:, None] + radii, z[:, None] - radii]
    if r_eff > 0:
        pieces += [z[:, None] + r_eff, z[:, None] - r_eff]
    pieces.append(z[:, None])
    bp = np.concatenate(pieces, axis=1)
    bp = np.clip(bp, -y_max[:, None], y_max[:, None])
    return np.sort(bp, axis=1)


def _log_integral(bp, z, st, theta, spec, order):
    nodes, weights = _gl(order)
    lo, hi = bp[:, :-1], bp[:, 1:]
    half = 0.5 * (hi - lo)
    y = (0.5 * (hi + lo))[:, :, None] + half[:, :, None] * nodes[None, None, :]
    w = half[:, :, None] * weights[None, None, :]
    g = _decay_exponent(y, z[:, None, None], st, theta, spec)
    nzr = y.shape[0]
    return special.logsumexp(-g.reshape(nzr, -1), b=w.reshape(nzr, -1), axis=1)


def _log_factor_decay(z, st, theta, spec, *, tol=1e-9, max_level=3, chunk=256):
    """log E exp(-st u(z - xi)) for the decay variant by composite Gauss-Legendre.

    Each z gets panels graded towards the kinks of the integrand; a 12- and a
    20-point rule are compared and the panels are refined until they agree.
    """
    log_z = math.log(normalizer(1, theta))
    out = np.empty_like(z)
    trace = []
    for s in range(0, z.shape[0], chunk):
        zc = z[s:s + chunk]
        for level in range(max_level + 1):
            bp = _decay_panels(zc, st, theta, spec, level)
            lo = _log_integral(bp, zc, st, theta, spec, 12)
            hi = _log_integral(bp, zc, st, theta, spec, 20)
            err = float(np.max(np.abs(hi - lo)))
            trace.append({"t": st, "z_range": [float(zc.min()), float(zc.max())], "level": level,
                          "panels": int(bp.shape[1] - 1), "max_log_error": err})
            if err <= tol:
                break
        else:
            raise NumericalError("per-site quadrature did not converge", trace=trace[-(max_level + 1):])
        out[s:s + chunk] = hi - log_z
    return out, trace


def _far_field_log(x, st, theta, spec, z_cut):
    """Sum over sites with |x - q| > z_cut of log E exp(-st u(x - q - xi)).

    Uses the expansion in xi/(x-q): -a(1 + b s2/z^2) + a^2 alpha^2 s2/(2 z^2),
    a = st c0 |z|^-alpha, summed in closed form with Hurwitz zeta functions.
    """
    alpha = spec.alpha
    s2 = radial_moment(1, theta, 2)
    beta = alpha * (alpha + 1) / 2
    q_a = np.ceil(x - z_cut)
    q_b = np.floor(x + z_cut)
    right0 = q_b + 1 - x
    left0 = x - q_a + 1

    def lattice_sum(p):
        return special.zeta(p, right0) + special.zeta(p, left0)

    a = st * spec.c0
    return (-a * (lattice_sum(alpha) + beta * s2 * lattice_sum(alpha + 2))
            + 0.5 * a * a * alpha * alpha * s2 * lattice_sum(2 * alpha + 2))


def _n1_cutoff(theta: float, st: float, spec: PotentialSpec) -> float:
    if spec.compact:
        return spec.compact_r + (800.0) ** (1.0 / theta) + 1.0
    return max(60.0, 2.0 * 40.0 ** (1.0 / theta), (abs(st) * spec.c0) ** (1.0 / spec.alpha))


MIN_X_NODES = 16
MAX_X_NODES = 4096


def _n1_fixed_nodes(spec: PotentialSpec, theta: float, st: float, n_x: int, tol: float):
    z_cut = _n1_cutoff(theta, st, spec)
    # |x_j - q| = (m + 1/2)/n_x for integer m >= 0
    m_max = int(math.floor(z_cut * n_x - 0.5))
    z_abs = (np.arange(m_max + 1) + 0.5) / n_x
    trace: list = []
    if spec.compact:
        log_f = _log_factor_compact(z_abs, st, theta, spec)
    else:
        log_f, trace = _log_factor_decay(z_abs, st, theta, spec, tol=tol)
    j = np.arange(n_x)
    x = (j + 0.5) / n_x - 0.5
    ell = np.empty(n_x)
    for jj in j:
        q = np.arange(math.ceil(x[jj] - z_cut), math.floor(x[jj] + z_cut) + 1)
        k = jj - n_x // 2 - n_x * q
        m = np.where(k >= 0, k, -k - 1)
        inside = m <= m_max
        ell[jj] = math.fsum(log_f[m[inside]])
    if not spec.compact:
        ell += _far_field_log(x, st, theta, spec, z_cut)
    return float(special.logsumexp(ell) - math.log(n_x)), trace


def n1_quadrature(params: ModelParams, spec: PotentialSpec, t: float, *, n_x: Optional[int] = None,
                  tol: float = 1e-9, return_trace: bool = False):
    """log of the unit-cell average of E exp(-sign t V(x)) in d = 1.

    The expectation factorizes over sites.  Each site factor is a 1-D
    integral against the displacement density; the x average over the
    unit cell uses the periodic trapezoidal rule (the integrand is
    1-periodic in x).  With ``n_x=None`` the node count doubles from 16
    until two successive values agree to ``tol`` relative to max(1, |value|);
    kinks of compact potentials make the rule only second order, so those
    need many more nodes than smooth decaying ones.
    """
    if params.d != 1:
        raise ConfigError("n1_quadrature is the d = 1 path; use n1_mc for d >= 2", field="params.d")
    if t < 0:
        raise DomainError("t must be >= 0")
    if n_x is not None and (n_x < 2 or n_x % 2):
        raise ConfigError("n_x must be even and >= 2", field="n_x")
    spec.check_dimension(1)
    if t == 0 or spec.u_max == 0:
        return (0.0, []) if return_trace else 0.0
    theta = params.theta
    st = spec.sign * float(t)
    if n_x is not None:
        value, trace = _n1_fixed_nodes(spec, theta, st, int(n_x), tol)
        return (value, trace) if return_trace else value
    nodes = MIN_X_NODES
    prev, trace = _n1_fixed_nodes(spec, theta, st, nodes, tol)
    history = [(nodes, prev)]
    while True:
        nodes *= 2
        if nodes > MAX_X_NODES:
            raise NumericalError("cell average did not converge in the number of x nodes",
                                 trace={"t": float(t), "history": history, "site_trace": trace})
        value, trace = _n1_fixed_nodes(spec, theta, st, nodes, tol)
        history.append((nodes, value))
        if abs(value - prev) <= tol * max(1.0, abs(value)):
            break
        prev = value
    out_trace = [{"x_nodes": history}] + list(trace)
    return (value, out_trace) if return_trace else value


def n1_quadrature_curve(params: ModelParams, spec: PotentialSpec, t_grid, **kw) -> LaplaceCurve:
    t = np.asarray(t_grid, dtype=float)
    vals = np.array([n1_quadrature(params, spec, ti, **kw) for ti in t])
    return LaplaceCurve(t_grid=t, log_values=vals, kind="N1_quadrature",
                        stderr=np.zeros_like(t), meta={"d": 1, "theta": params.theta})


# -- unit-cell Laplace transform, Monte Carlo --------------------------------

def _cell_nodes(d: int, n_per_axis: int):
    nodes, weights = _gl(n_per_axis)
    nodes, weights = nodes / 2.0, weights / 2.0
    mesh = np.meshgrid(*([nodes] * d), indexing="ij")
    wmesh = np.meshgrid(*([weights] * d), indexing="ij")
    x = np.stack([m.ravel() for m in mesh], axis=1)
    w = np.prod(np.stack([m.ravel() for m in wmesh], axis=1), axis=1)
    return x, w


def _mc_cutoff(d: int, t_max: float, spec: PotentialSpec, theta: float) -> int:
    reach = spec.compact_r * math.sqrt(d) if spec.compact else spec.core_radius
    # sites whose displacement must exceed their distance to reach the cell
    jump = reach + 1.0 + 12.0 ** (1.0 / theta)
    if spec.sign == -1:
        jump = reach + 1.0 + (t_max * spec.u_max + 40.0) ** (1.0 / theta)
    if spec.compact:
        return int(math.ceil(jump))
    # first-order tail is accurate once t u < 1e-3 per site
    return int(math.ceil(max(jump, (1e3 * t_max * spec.c0) ** (1.0 / spec.alpha))))


def _far_tail_first_order(x, d, st, spec, cut):
    """-st * c0 * sum over |q|_inf > cut of |x - q|^-alpha (lattice-sum estimate)."""
    if spec.compact:
        return np.zeros(x.shape[0])
    if d == 1:
        right0 = (cut + 1) - x[:, 0]
        left0 = (cut + 1) + x[:, 0]
        s = special.zeta(spec.alpha, right0) + special.zeta(spec.alpha, left0)
    else:
        r = cut + 0.5
        s = np.full(x.shape[0], SPHERE_AREA[d] * r ** (d - spec.alpha) / (spec.alpha - d))
    return -st * spec.c0 * s


DEFAULT_CELL_NODES = {1: 16, 2: 6, 3: 4}


def _mc_site_chunks(params, spec, sites, x, m, chunk_elems):
    """Yield (slice, potential samples (nq, m, nx), log importance weights (nq, m))."""
    d, theta = params.d, params.theta
    key = stream_key(params.seed, 0, N1_MC_STREAM)
    reach = spec.compact_r * math.sqrt(d) if spec.compact else 2.0 * spec.core_radius
    half_box = 0.5 + reach
    per_site = max(1, chunk_elems // max(m * x.shape[0] * d, 1))
    for s0 in range(0, sites.shape[0], per_site):
        sq = sites[s0:s0 + per_site]
        nq = sq.shape[0]
        u = site_uniforms(key, sq, n_draws=3 * m).reshape(nq * m, 3)
        xi = displacements_from_uniforms(d, theta, u).reshape(nq, m, d)
        logw = np.zeros((nq, m))
        if spec.sign == -1:
            mix_key = stream_key(params.seed, 0, N1_MC_STREAM + 1)
            mix = site_uniforms(mix_key, sq, n_draws=(d + 1) * m).reshape(nq, m, d + 1)
            use_uniform = mix[..., 0] < 0.5
            unif = -sq[:, None, :] + (2.0 * mix[..., 1:] - 1.0) * half_box
            xi = np.where(use_uniform[..., None], unif, xi)
            log_dens = -np.sqrt(np.sum(xi * xi, axis=-1)) ** theta - math.log(normalizer(d, theta))
            in_box = np.all(np.abs(xi + sq[:, None, :]) <= half_box, axis=-1)
            prop = 0.5 * np.exp(log_dens) + 0.5 * in_box / (2 * half_box) ** d
            logw = log_dens - np.log(prop)
        diff = x[None, None, :, :] - sq[:, None, None, :] - xi[:, :, None, :]
        yield slice(s0, s0 + nq), potential_u(spec, diff), logw


def n1_mc(params: ModelParams, spec: PotentialSpec, t_grid, replicates: int, *,
          n_x: Optional[int] = None, chunk_elems: int = 4_000_000,
          max_sites: int = 200_000) -> LaplaceCurve:
    """Monte Carlo estimate of log of the unit-cell average of E exp(-sign t V).

    Every site q gets ``replicates`` displacement samples shared by all x
    nodes and all t.  The per-site sample means multiply to an unbiased
    estimate of the product; its relative variance follows from the
    influence of each site (delta method).  For sign = -1 the samples come
    from a defensive mixture of the displacement law and the uniform law on
    the region from which the site reaches the unit cell.
    """
    if replicates < 2:
        raise ConfigError("replicates must be >= 2", field="replicates")
    d, theta = params.d, params.theta
    t = np.asarray(t_grid, dtype=float)
    if np.any(t < 0):
        raise DomainError("t must be >= 0")
    spec.check_dimension(d)
    sign = spec.sign
    if sign == -1 and not math.isfinite(spec.u_cap):
        raise ConfigError("negative potential requires a finite u_cap", field="spec.u_cap")
    n_x = DEFAULT_CELL_NODES[d] if n_x is None else int(n_x)
    x, wx = _cell_nodes(d, n_x)
    nt, nxn, m = t.shape[0], x.shape[0], int(replicates)
    if spec.u_max == 0 or t.max() == 0:
        return LaplaceCurve(t_grid=t, log_values=np.zeros_like(t), kind="N1_mc",
                            stderr=np.zeros_like(t), flagged=np.zeros(t.shape, dtype=bool))
    cut = _mc_cutoff(d, float(t.max()), spec, theta)
    if (2 * cut + 1) ** d > max_sites:
        raise ResourceError(f"{(2 * cut + 1) ** d} sites exceed the n1_mc budget {max_sites}")
    sites = lattice_box(d, cut)

    # pass 1: per-site self-normalized means sum_i w_i g_i / sum_i w_i
    log_fhat = np.zeros((nt, sites.shape[0], nxn))
    ess_min = np.full((nt, nxn), np.inf)
    for sl, uu, logw in _mc_site_chunks(params, spec, sites, x, m, chunk_elems):
        log_wsum = special.logsumexp(logw, axis=1)[:, None]
        for it, ti in enumerate(t):
            expo = -sign * ti * uu + logw[:, :, None]
            lf = special.logsumexp(expo, axis=1) - log_wsum
            log_fhat[it, sl] = lf
            r = np.exp(expo - lf[:, None, :])
            ess_min[it] = np.minimum(ess_min[it], np.min(m / np.mean(r * r, axis=1), axis=0))

    log_values = np.empty(nt)
    pis = np.empty((nt, nxn))
    flagged = np.zeros(nt, dtype=bool)
    for it, ti in enumerate(t):
        log_terms = np.log(wx) + np.sum(log_fhat[it], axis=0) + _far_tail_first_order(x, d, sign * ti, spec, cut)
        log_values[it] = special.logsumexp(log_terms)
        pis[it] = np.exp(log_terms - log_values[it])
        flagged[it] = ess_min[it, int(np.argmax(pis[it]))] < 10

    # pass 2: influence of each site on the log estimate,
    # Var_i(sum_j pi_j w_i (g_qj(i) - fhat_qj) / (wbar fhat_qj)) / m
    rel_var = np.zeros(nt)
    for sl, uu, logw in _mc_site_chunks(params, spec, sites, x, m, chunk_elems):
        log_wbar = (special.logsumexp(logw, axis=1) - math.log(m))[:, None, None]
        wn = np.exp(logw[:, :, None] - log_wbar)
        for it, ti in enumerate(t):
            g_rel = np.exp(-sign * ti * uu - log_fhat[it, sl][:, None, :])
            infl = (wn * (g_rel - 1.0)) @ pis[it]
            rel_var[it] += math.fsum(np.var(infl, axis=1, ddof=1)) / m
    return LaplaceCurve(t_grid=t, log_values=log_values, kind="N1_mc", stderr=np.sqrt(rel_var),
                        flagged=flagged, meta={"d": d, "theta": theta, "replicates": m, "n_x": n_x,
                                               "site_cutoff": cut, "seed": params.seed})
