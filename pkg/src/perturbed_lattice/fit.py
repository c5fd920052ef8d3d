"""Decay-exponent fits for IDS and Laplace curves.

power_lambda:      log N(lambda) ~ -B lambda^-kappa      (exponent = kappa)
power_t:           log N~(t)     ~ -A t^gamma            (exponent = gamma)
log_corrected_2d:  log N(lambda) ~ -c lambda^(-1-theta/2) (log 1/lambda)^(-theta/2)

Fits are weighted least squares in doubly logarithmic coordinates.  Curves
with positive log values (growth transforms) are fitted through log|value|.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import DomainError
from .ids import IdsCurve, LaplaceCurve

MODELS = ("power_lambda", "power_t", "log_corrected_2d")
MIN_POINTS = 5
MIN_DEPTH = 10.0
MAX_REL_ERR = 0.2


@dataclass
class FitResult:
    model: str
    exponent: float
    coefficient: float
    stderr_exponent: float
    r_squared: float
    window: tuple
    n_points: int
    sign: int = -1
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["window"] = list(self.window)
        return out


def curve_arrays(curve) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(abscissa, log value, stderr of log value) for supported curve types."""
    if isinstance(curve, IdsCurve):
        x = np.asarray(curve.lambda_grid, dtype=float)
        n = np.asarray(curve.n_hat, dtype=float)
        se = np.asarray(curve.stderr, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            logv = np.log(n)
            se_log = np.where(n > 0, se / n, np.inf)
        return x, logv, se_log
    if isinstance(curve, LaplaceCurve):
        se = curve.stderr if curve.stderr is not None else np.zeros_like(curve.log_values)
        return (np.asarray(curve.t_grid, dtype=float), np.asarray(curve.log_values, dtype=float),
                np.asarray(se, dtype=float))
    x, logv, se = curve
    return np.asarray(x, dtype=float), np.asarray(logv, dtype=float), np.asarray(se, dtype=float)


def _select_window(x, logv, se_log, model, window):
    finite = np.isfinite(logv) & np.isfinite(x) & (x > 0)
    if window is not None:
        lo, hi = window
        keep = finite & (x >= lo) & (x <= hi)
        return keep
    depth = np.abs(logv)
    rel = np.where(np.isfinite(se_log), se_log, np.inf)
    ok = finite & (depth >= MIN_DEPTH) & (rel < MAX_REL_ERR)
    if not ok.any():
        return ok
    if model == "power_t":
        edge = x[ok].max()
        return ok & (x >= edge / 10.0)
    edge = x[ok].min()
    return ok & (x <= edge * 10.0)


def _weights(y_se):
    se = np.asarray(y_se, dtype=float)
    pos = np.isfinite(se) & (se > 0)
    if not pos.any():
        return np.ones_like(se)
    floor = se[pos].min()
    se = np.where(pos, se, floor)
    return 1.0 / se**2


def _wls(x, y, w):
    """Weighted straight-line fit; returns slope, intercept, slope stderr, r^2."""
    sw = np.sqrt(w)
    a = np.stack([x, np.ones_like(x)], axis=1) * sw[:, None]
    b = y * sw
    coef, *_ = np.linalg.lstsq(a, b, rcond=None)
    resid = b - a @ coef
    ss_res = float(resid @ resid)
    ybar = np.sum(w * y) / np.sum(w)
    ss_tot = float(np.sum(w * (y - ybar) ** 2))
    dof = max(len(x) - 2, 1)
    cov = np.linalg.inv(a.T @ a) * (ss_res / dof)
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), float(coef[1]), float(math.sqrt(max(cov[0, 0], 0.0))), float(min(max(r2, 0.0), 1.0))


def _signed_logs(logv, x):
    if np.all(logv < 0):
        return -1
    if np.all(logv > 0):
        return 1
    bad = [(float(a), float(b)) for a, b in zip(x, logv) if not b < 0]
    raise DomainError(f"log values must be strictly negative (or all positive); offending points {bad}")


def fit_power(curve, model: str = "power_lambda", *, window: Optional[tuple] = None) -> FitResult:
    """Fit log|log value| = intercept + slope * log(abscissa)."""
    if model not in ("power_lambda", "power_t"):
        raise DomainError(f"unknown power model {model!r}")
    x, logv, se_log = curve_arrays(curve)
    keep = _select_window(x, logv, se_log, model, window)
    if keep.sum() < MIN_POINTS:
        raise DomainError(f"insufficient data: {int(keep.sum())} points in window, need {MIN_POINTS}")
    xs, lv, se = x[keep], logv[keep], se_log[keep]
    sign = _signed_logs(lv, xs)
    y = np.log(np.abs(lv))
    slope, icpt, se_slope, r2 = _wls(np.log(xs), y, _weights(se / np.abs(lv)))
    exponent = -slope if model == "power_lambda" else slope
    return FitResult(model=model, exponent=exponent, coefficient=math.exp(icpt), stderr_exponent=se_slope,
                     r_squared=r2, window=(float(xs.min()), float(xs.max())), n_points=int(keep.sum()),
                     sign=sign)


def log_corrected_profile(lam, theta: float) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    return lam ** (-1.0 - theta / 2.0) * np.log(1.0 / lam) ** (-theta / 2.0)


def fit_log_corrected(curve, theta: float, *, window: Optional[tuple] = None) -> FitResult:
    """Fit only c in log N = -c lambda^(-1-theta/2) (log 1/lambda)^(-theta/2).

    ``extra`` reports the pure-power fit on the same points and the ratio
    of the two r^2 values.
    """
    x, logv, se_log = curve_arrays(curve)
    keep = _select_window(x, logv, se_log, "power_lambda", window)
    if keep.sum() < MIN_POINTS:
        raise DomainError(f"insufficient data: {int(keep.sum())} points in window, need {MIN_POINTS}")
    xs, lv, se = x[keep], logv[keep], se_log[keep]
    if np.any(xs >= 1.0):
        raise DomainError(f"log-corrected model needs lambda < 1; offending points {xs[xs >= 1].tolist()}")
    if not np.all(lv < 0):
        raise DomainError("log values must be strictly negative on the window")
    y = np.log(-lv)
    g = np.log(log_corrected_profile(xs, theta))
    w = _weights(se / np.abs(lv))
    log_c = float(np.sum(w * (y - g)) / np.sum(w))
    resid = y - g - log_c
    ybar = np.sum(w * y) / np.sum(w)
    ss_tot = float(np.sum(w * (y - ybar) ** 2))
    ss_res = float(np.sum(w * resid**2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    r2 = float(min(max(r2, 0.0), 1.0))
    n = len(xs)
    se_logc = math.sqrt(ss_res / max(n - 1, 1) / np.sum(w))
    _, _, _, r2_power = _wls(np.log(xs), y, w)
    return FitResult(model="log_corrected_2d", exponent=1.0 + theta / 2.0, coefficient=math.exp(log_c),
                     stderr_exponent=0.0, r_squared=r2, window=(float(xs.min()), float(xs.max())),
                     n_points=n, extra={"stderr_log_coefficient": se_logc, "r2_power": r2_power,
                                        "r2_ratio": r2 / r2_power if r2_power > 0 else math.inf})
