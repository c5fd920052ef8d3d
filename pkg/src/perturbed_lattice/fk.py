"""Feynman-Kac Monte Carlo for annealed survival and growth functionals.

Paths are Brownian motions with generator h*Laplacian, so each Euler step
adds a centred Gaussian with variance 2 h dt per axis.  The time integral
of the potential uses the trapezoidal rule and killing is checked at the
discrete path points.  Both environments (configurations) and paths are
drawn from counter-keyed streams, so results depend only on the seed, the
configuration index and the path index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import special
from scipy.interpolate import RegularGridInterpolator
from scipy.spatial import cKDTree

from .errors import ConfigError, DomainError
from .ids import LaplaceCurve
from .randfield import ModelParams, PotentialSpec, field_v, sample_configuration

FK_STREAM = 2
PATH_BLOCK = 512


@dataclass(eq=False)
class PathEstimate:
    t_grid: np.ndarray
    log_s: np.ndarray
    stderr: np.ndarray
    x: np.ndarray
    n_paths: int
    dt: float
    n_configs: int
    kind: str = "survival"
    flagged: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)


def _step_indices(t_grid: np.ndarray, dt: float) -> np.ndarray:
    steps = np.rint(t_grid / dt).astype(np.int64)
    if np.any(np.abs(steps * dt - t_grid) > 1e-9 * np.maximum(1.0, t_grid)):
        raise ConfigError("every t in t_grid must be a multiple of dt", field="dt")
    return steps


class _Environment:
    """Potential and obstacle lookups for one configuration."""

    def __init__(self, params, spec, config, sign, table_dx, frozen):
        self.frozen = frozen
        self.spec = spec
        self.d = params.d
        self.sign = sign
        if frozen is not None or config is None:
            self.tree = None
            self.kind = "constant"
            return
        pos = config.positions
        half = config.box_r / 2
        near = np.all(np.abs(pos) <= half + max(spec.obstacle_rho, 0.0) + 1.0, axis=1)
        self.tree = cKDTree(pos[near]) if spec.obstacle_rho > 0 and near.any() else None
        if spec.u_max == 0:
            self.kind = "zero"
        elif spec.compact and self.d == 1:
            self.kind = "compact1d"
            self.sorted_pos = np.sort(pos[:, 0])
        else:
            self.kind = "table"
            n = int(math.ceil(config.box_r / table_dx)) + 1
            axis = np.linspace(-half, half, n)
            if self.d == 1:
                self.axis = axis
                self.table = field_v(config, spec, axis[:, None])
            else:
                mesh = np.meshgrid(*([axis] * self.d), indexing="ij")
                pts = np.stack([m.ravel() for m in mesh], axis=1)
                vals = field_v(config, spec, pts).reshape((n,) * self.d)
                self.interp = RegularGridInterpolator((axis,) * self.d, vals)

    def potential(self, pts: np.ndarray) -> np.ndarray:
        """V at points of shape (..., d)."""
        shape = pts.shape[:-1]
        if self.kind == "constant":
            return np.full(shape, 0.0 if self.frozen is None else float(self.frozen))
        if self.kind == "zero":
            return np.zeros(shape)
        if self.kind == "compact1d":
            x = pts[..., 0]
            r2 = self.spec.compact_r
            count = (np.searchsorted(self.sorted_pos, x + r2, side="right")
                     - np.searchsorted(self.sorted_pos, x - r2, side="left"))
            return self.spec.u_cap * count
        if self.d == 1:
            return np.interp(pts[..., 0], self.axis, self.table)
        return self.interp(pts.reshape(-1, self.d)).reshape(shape)

    def blocked(self, pts: np.ndarray) -> np.ndarray:
        if self.tree is None:
            return np.zeros(pts.shape[:-1], dtype=bool)
        dist, _ = self.tree.query(pts.reshape(-1, self.d), k=1)
        return (dist <= self.spec.obstacle_rho).reshape(pts.shape[:-1])


def _path_block_logs(env, x0, steps, dt, h, key, n_block, sign):
    """Log path weights at each reporting step for one block of paths."""
    rng = np.random.Generator(np.random.Philox(key=key))
    n_steps = int(steps.max())
    d = x0.shape[0]
    inc = rng.standard_normal((n_block, n_steps, d)) * math.sqrt(2.0 * h * dt)
    path = np.concatenate([np.broadcast_to(x0, (n_block, 1, d)),
                           x0 + np.cumsum(inc, axis=1)], axis=1)
    v = env.potential(path)
    integral = np.concatenate([np.zeros((n_block, 1)),
                               np.cumsum(0.5 * dt * (v[:, 1:] + v[:, :-1]), axis=1)], axis=1)
    dead = np.logical_or.accumulate(env.blocked(path), axis=1)
    logw = -sign * integral
    logw = np.where(dead, -np.inf, logw)
    return logw[:, steps]


def _run(params: ModelParams, spec: PotentialSpec, x, t_grid, n_paths: int, n_configs: int,
         dt: float, sign: int, *, frozen_potential: Optional[float] = None,
         table_dx: Optional[float] = None, tail_tol: float = 1e-6, box_r: Optional[float] = None,
         kind: str = "survival") -> PathEstimate:
    d, h = params.d, params.h
    x0 = np.atleast_1d(np.asarray(x, dtype=float))
    if x0.shape != (d,):
        raise ConfigError(f"start point must have {d} coordinates", field="x")
    t = np.asarray(t_grid, dtype=float)
    if np.any(t < 0) or np.any(np.diff(t) <= 0):
        raise ConfigError("t_grid must be nonnegative and increasing", field="t_grid")
    if not dt > 0:
        raise ConfigError("dt must be positive", field="dt")
    if spec.obstacle_rho > 0 and dt > spec.obstacle_rho**2 / h:
        raise ConfigError("dt exceeds rho^2/h: paths could tunnel through obstacles", field="dt")
    if n_paths < 1 or n_configs < 1:
        raise ConfigError("n_paths and n_configs must be positive", field="n_paths")
    steps = _step_indices(t, dt)
    t_max = float(t.max())
    if box_r is None:
        box_r = 2.0 * (float(np.max(np.abs(x0))) + 8.0 * math.sqrt(2.0 * h * max(t_max, dt)) + 2.0)
        box_r = float(math.ceil(box_r))
    if table_dx is None:
        table_dx = min(0.01, spec.core_radius / 4.0) if not spec.compact else 0.01
        if d > 1:
            table_dx = max(table_dx, 0.05)
    need_env = frozen_potential is None and (spec.u_max > 0 or spec.obstacle_rho > 0)

    per_config = np.empty((n_configs, t.shape[0]))
    per_config_sq = np.empty((n_configs, t.shape[0]))
    for c in range(n_configs):
        config = sample_configuration(params, spec, box_r, c, tail_tol=tail_tol) if need_env else None
        env = _Environment(params, spec, config, sign, table_dx, frozen_potential)
        blocks = []
        for b, start in enumerate(range(0, n_paths, PATH_BLOCK)):
            n_block = min(PATH_BLOCK, n_paths - start)
            ss = np.random.SeedSequence(params.seed, spawn_key=(c, FK_STREAM, b))
            key = ss.generate_state(2, np.uint64)
            blocks.append(_path_block_logs(env, x0, steps, dt, h, key, n_block, sign))
        logw = np.concatenate(blocks, axis=0)
        per_config[c] = special.logsumexp(logw, axis=0) - math.log(n_paths)
        per_config_sq[c] = special.logsumexp(2.0 * logw, axis=0) - math.log(n_paths)

    log_s = special.logsumexp(per_config, axis=0) - math.log(n_configs)
    finite = np.isfinite(log_s)
    stderr = np.full(t.shape, np.inf)
    if n_configs >= 2:
        ratio = np.exp(per_config[:, finite] - log_s[finite])
        stderr[finite] = np.std(ratio, axis=0, ddof=1) / math.sqrt(n_configs)
    else:
        second = np.exp(per_config_sq[0, finite] - 2.0 * log_s[finite])
        stderr[finite] = np.sqrt(np.maximum(second - 1.0, 0.0) / max(n_paths - 1, 1))
    # effective sample size of the pooled weights
    log_sum = special.logsumexp(per_config, axis=0)
    log_sum_sq = special.logsumexp(per_config_sq, axis=0)
    with np.errstate(invalid="ignore"):
        ess = np.exp(2.0 * log_sum - log_sum_sq) * n_paths
    flagged = ~(ess >= 10)
    return PathEstimate(t_grid=t, log_s=log_s, stderr=stderr, x=x0, n_paths=int(n_paths), dt=float(dt),
                        n_configs=int(n_configs), kind=kind, flagged=flagged,
                        meta={"box_r": box_r, "table_dx": table_dx, "seed": params.seed,
                              "h": h, "d": d, "theta": params.theta, "ess": ess.tolist(),
                              "frozen_potential": frozen_potential})


def survival(params: ModelParams, spec: PotentialSpec, x, t_grid, n_paths: int, n_configs: int,
             dt: float, **kw) -> PathEstimate:
    """log of E[exp(-int_0^t V(B_s) ds); no obstacle hit before t]."""
    if spec.sign != 1:
        raise ConfigError("survival needs sign = +1; use growth", field="spec.sign")
    return _run(params, spec, x, t_grid, n_paths, n_configs, dt, 1, kind="survival", **kw)


def growth(params: ModelParams, spec: PotentialSpec, x, t_grid, n_paths: int, n_configs: int,
           dt: float, **kw) -> PathEstimate:
    """log of E[exp(+int_0^t V(B_s) ds)] for bounded u without obstacles."""
    if spec.sign != -1:
        raise ConfigError("growth needs sign = -1", field="spec.sign")
    if spec.obstacle_rho != 0:
        raise ConfigError("growth requires obstacle_rho = 0", field="spec.obstacle_rho")
    if not math.isfinite(spec.u_cap):
        raise ConfigError("growth requires a finite u_cap", field="spec.u_cap")
    return _run(params, spec, x, t_grid, n_paths, n_configs, dt, -1, kind="growth", **kw)


def lemma61_check(pathest: PathEstimate, laplace: LaplaceCurve, eps: float, *,
                  box_r: Optional[float] = None) -> dict:
    """Compare log S(t) with the prefactor-free log N_tilde(t - eps).

    The reference is L(t) = log N_tilde(t - eps) + (d/2) log(4 pi h (t - eps)),
    taken from the upper Stieltjes sum.  A time passes when
    log S <= L + 2 sigma + b, where sigma combines both error bars and b is
    the finite-box Dirichlet deficit d |log(1 - sqrt(pi h (t-eps))/R)|.
    Times whose error bar is at least the signal |log S| are INCONCLUSIVE.
    """
    if not eps > 0:
        raise DomainError("eps must be positive")
    h = float(pathest.meta.get("h", 1.0))
    d = int(pathest.meta.get("d", pathest.x.shape[0]))
    box = box_r if box_r is not None else laplace.meta.get("box_r")
    upper = laplace.log_upper if laplace.log_upper is not None else laplace.log_values
    rows = []
    for i, t in enumerate(pathest.t_grid):
        te = t - eps
        if te <= 0:
            continue
        j = np.nonzero(np.abs(laplace.t_grid - te) <= 1e-9 * max(1.0, te))[0]
        if j.size == 0:
            raise DomainError(f"Laplace curve has no point at t - eps = {te:g}")
        j = int(j[0])
        ref = float(upper[j]) + 0.5 * d * math.log(4.0 * math.pi * h * te)
        s_lap = float(laplace.stderr[j]) if laplace.stderr is not None else 0.0
        sigma = math.hypot(float(pathest.stderr[i]), s_lap)
        allowance = 0.0
        if box:
            ratio = math.sqrt(math.pi * h * te) / float(box)
            allowance = d * abs(math.log(max(1.0 - ratio, 1e-300)))
        lhs = float(pathest.log_s[i])
        if not (math.isfinite(lhs) and math.isfinite(ref) and math.isfinite(sigma)):
            status = "INCONCLUSIVE"
        elif sigma > 0 and 2.0 * sigma >= abs(lhs):
            status = "INCONCLUSIVE"
        elif lhs <= ref + 2.0 * sigma + allowance:
            status = "PASS"
        else:
            status = "FAIL"
        rows.append({"t": float(t), "log_s": lhs, "reference": ref, "sigma": sigma,
                     "allowance": allowance, "status": status})
    statuses = {r["status"] for r in rows}
    if "FAIL" in statuses:
        verdict = "FAIL"
    elif "PASS" in statuses:
        verdict = "PASS"
    else:
        verdict = "INCONCLUSIVE"
    return {"verdict": verdict, "eps": eps, "rows": rows}
