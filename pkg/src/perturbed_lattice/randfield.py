"""Randomly displaced lattice: displacement sampling and the superposed potential.

Each lattice site ``q`` carries an i.i.d. displacement with density
``exp(-|x|**theta) / Z(d, theta)``.  Displacements are generated by inversion
from counter-based uniforms keyed by ``(seed, replicate, q)``, so a site's
displacement does not depend on the box it was drawn in, on the enumeration
order, or on how replicates are distributed over workers.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit
from scipy import special

from .errors import ConfigError, DomainError, ResourceError

SPHERE_AREA = {1: 2.0, 2: 2.0 * math.pi, 3: 4.0 * math.pi}
BALL_VOLUME = {1: 2.0, 2: math.pi, 3: 4.0 * math.pi / 3.0}

MAX_SITES = 20_000_000
DEFAULT_TAIL_TOL = 1e-6

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


@dataclass(frozen=True)
class ModelParams:
    d: int = 1
    theta: float = 1.0
    h: float = 1.0
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ConfigError(f"d must be 1, 2 or 3, got {self.d!r}", field="params.d")
        if not self.theta > 0:
            raise ConfigError(f"theta must be positive, got {self.theta!r}", field="params.theta")
        if not self.h > 0:
            raise ConfigError(f"h must be positive, got {self.h!r}", field="params.h")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer", field="params.seed")
        if int(self.workers) < 1:
            raise ConfigError("workers must be >= 1", field="params.workers")


@dataclass(frozen=True)
class PotentialSpec:
    """Single-site potential.

    Decay variant: ``u(x) = min(u_cap, c0 / max(|x|, r0)**alpha)``.
    Compact variant (``compact_r`` set): ``u(x) = u_cap * 1{|x|_inf <= compact_r}``.
    ``obstacle_rho > 0`` adds a hard ball of that radius around every displaced site.
    """

    c0: float = 1.0
    alpha: float = 4.0
    r0: float = 0.0
    sign: int = 1
    compact_r: Optional[float] = None
    u_cap: float = math.inf
    obstacle_rho: float = 0.0

    def __post_init__(self):
        if self.sign not in (1, -1):
            raise ConfigError("sign must be +1 or -1", field="spec.sign")
        if not self.c0 > 0:
            raise ConfigError("c0 must be positive", field="spec.c0")
        if self.r0 < 0:
            raise ConfigError("r0 must be >= 0", field="spec.r0")
        if not self.u_cap >= 0:
            raise ConfigError("u_cap must be >= 0", field="spec.u_cap")
        if self.obstacle_rho < 0:
            raise ConfigError("obstacle_rho must be >= 0", field="spec.obstacle_rho")
        if self.compact_r is not None:
            if not self.compact_r > 0:
                raise ConfigError("compact_r must be positive", field="spec.compact_r")
            if math.isinf(self.u_cap):
                raise ConfigError("compact variant needs a finite u_cap", field="spec.u_cap")
        elif self.r0 == 0 and math.isinf(self.u_cap):
            raise ConfigError("decay variant is unbounded: set r0 > 0 or a finite u_cap",
                              field="spec.u_cap")
        if self.sign == -1:
            if self.obstacle_rho != 0:
                raise ConfigError("negative potential requires obstacle_rho = 0",
                                  field="spec.obstacle_rho")
            if math.isinf(self.u_cap):
                raise ConfigError("negative potential requires a finite u_cap", field="spec.u_cap")

    @property
    def compact(self) -> bool:
        return self.compact_r is not None

    @property
    def u_max(self) -> float:
        """sup u, attained at the origin."""
        if self.compact or self.u_cap == 0:
            return float(self.u_cap)
        if self.r0 == 0:
            return float(self.u_cap)
        return float(min(self.u_cap, self.c0 / self.r0**self.alpha))

    @property
    def core_radius(self) -> float:
        """Radius beyond which the decay variant is exactly ``c0 |x|^-alpha``."""
        if self.compact:
            return float(self.compact_r)
        if self.u_cap == 0:
            return math.inf
        cap_r = 0.0 if math.isinf(self.u_cap) else (self.c0 / self.u_cap) ** (1.0 / self.alpha)
        return max(self.r0, cap_r)

    def check_dimension(self, d: int) -> None:
        if not self.compact and not self.alpha > d:
            raise ConfigError(f"alpha must exceed d={d}, got {self.alpha}", field="spec.alpha")


def normalizer(d: int, theta: float) -> float:
    """Z(d, theta) = |S^{d-1}| Gamma(d/theta) / theta."""
    if not theta > 0:
        raise DomainError(f"theta must be positive, got {theta}")
    if d not in SPHERE_AREA:
        raise DomainError(f"only d <= 3 is supported, got {d}")
    return SPHERE_AREA[d] * math.gamma(d / theta) / theta


def radial_moment(d: int, theta: float, k: float) -> float:
    """E|xi|^k = Gamma((d+k)/theta) / Gamma(d/theta)."""
    return math.exp(math.lgamma((d + k) / theta) - math.lgamma(d / theta))


def radial_sf(d: int, theta: float, r):
    """P(|xi| > r)."""
    r = np.maximum(np.asarray(r, dtype=float), 0.0)
    return special.gammaincc(d / theta, r**theta)


def potential_u(spec: PotentialSpec, x) -> np.ndarray:
    """Single-site potential at displacement vectors ``x`` (last axis = coordinates).

    Always nonnegative; the sign is applied by consumers.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x[None]
    if spec.compact:
        inside = np.max(np.abs(x), axis=-1) <= spec.compact_r
        return np.where(inside, float(spec.u_cap), 0.0)
    if spec.u_cap == 0:
        return np.zeros(x.shape[:-1])
    r = np.sqrt(np.sum(x * x, axis=-1))
    with np.errstate(divide="ignore"):
        val = spec.c0 / np.maximum(r, spec.r0) ** spec.alpha
    return np.minimum(val, spec.u_cap)


# -- counter-based uniforms -------------------------------------------------

def _mix64(z):
    z = z ^ (z >> np.uint64(30))
    z = z * _M1
    z = z ^ (z >> np.uint64(27))
    z = z * _M2
    return z ^ (z >> np.uint64(31))


def stream_key(seed: int, replicate: int, stream: int = 0) -> np.uint64:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(replicate), int(stream)))
    return ss.generate_state(1, np.uint64)[0]


def site_uniforms(key, sites, n_draws: int = 3) -> np.ndarray:
    """Uniforms in (0, 1) addressed by (key, lattice site, draw index)."""
    sites = np.asarray(sites, dtype=np.int64)
    if sites.ndim == 1:
        sites = sites[:, None]
    with np.errstate(over="ignore"):
        h = np.full(sites.shape[0], np.uint64(key), dtype=np.uint64)
        for i in range(sites.shape[1]):
            zz = ((sites[:, i] << 1) ^ (sites[:, i] >> 63)).view(np.uint64)
            h = _mix64(h ^ (zz + _GOLDEN * np.uint64(i + 1)))
        out = np.empty((sites.shape[0], n_draws))
        for k in range(n_draws):
            z = _mix64(h + _GOLDEN * np.uint64(k + 1))
            out[:, k] = ((z >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return out


def displacements_from_uniforms(d: int, theta: float, u) -> np.ndarray:
    """Map uniforms of shape (n, 3) to displacements of shape (n, d) by inversion."""
    u = np.asarray(u, dtype=float)
    radius = special.gammaincinv(d / theta, u[:, 0]) ** (1.0 / theta)
    if d == 1:
        direction = np.where(u[:, 1] < 0.5, -1.0, 1.0)[:, None]
    elif d == 2:
        phi = 2.0 * math.pi * u[:, 1]
        direction = np.stack([np.cos(phi), np.sin(phi)], axis=1)
    else:
        z = 2.0 * u[:, 1] - 1.0
        phi = 2.0 * math.pi * u[:, 2]
        rho = np.sqrt(np.maximum(1.0 - z * z, 0.0))
        direction = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    return radius[:, None] * direction


def sample_displacement(params: ModelParams, rng=None, size: Optional[int] = None) -> np.ndarray:
    """Draw displacements from exp(-|x|^theta)/Z; shape (d,) or (size, d)."""
    if rng is None:
        rng = np.random.default_rng(params.seed)
    n = 1 if size is None else int(size)
    xi = displacements_from_uniforms(params.d, params.theta, rng.random((n, 3)))
    return xi[0] if size is None else xi


# -- configurations ----------------------------------------------------------

def tail_bound(d: int, spec: PotentialSpec, margin: float) -> float:
    """Deterministic bound on the potential from sites outside the margin window."""
    if spec.compact or spec.u_cap == 0:
        return 0.0
    return spec.c0 * SPHERE_AREA[d] * margin ** (d - spec.alpha) / (spec.alpha - d)


def truncation_margin(d: int, theta: float, spec: PotentialSpec,
                      tol: float = DEFAULT_TAIL_TOL) -> int:
    """Smallest window half-width (in lattice units) meeting the truncation budget.

    Decay variant: ``tail_bound <= tol * c0``.  Compact supports and hard
    obstacles: expected number of sites outside the window whose support can
    reach a point is ``<= tol``.
    """
    spec.check_dimension(d)
    margin = 1
    if not spec.compact and spec.u_cap > 0:
        gap = spec.alpha - d
        margin = max(margin, math.ceil((SPHERE_AREA[d] / (gap * tol)) ** (1.0 / gap)))
    reach = max(spec.compact_r or 0.0, spec.obstacle_rho)
    if reach > 0:
        start = math.ceil(reach) + 1
        ks = np.arange(start, start + 4000, dtype=float)
        shell = (2 * ks + 1) ** d - (2 * ks - 1) ** d
        terms = shell * radial_sf(d, theta, ks - reach)
        rest = np.cumsum(terms[::-1])[::-1]  # rest[i] = sum over k >= ks[i]
        ok = np.nonzero(rest <= tol)[0]
        m_jump = int(ks[ok[0]] - 1) if ok.size else int(ks[-1])
        margin = max(margin, m_jump)
    return int(margin)


@dataclass(eq=False)
class Configuration:
    """One sampled displacement field on the lattice sites of Lambda_{R + 2 margin}."""

    d: int
    theta: float
    box_r: float
    margin: int
    seed: int
    replicate: int
    sites: np.ndarray
    xi: np.ndarray
    tail_bound: float = 0.0

    @property
    def half_width(self) -> int:
        return int(np.max(np.abs(self.sites))) if len(self.sites) else 0

    @property
    def positions(self) -> np.ndarray:
        return self.sites + self.xi

    def __len__(self) -> int:
        return self.sites.shape[0]

    def __getitem__(self, q) -> np.ndarray:
        q = np.atleast_1d(np.asarray(q, dtype=np.int64))
        hw = self.half_width
        if q.shape != (self.d,) or np.any(np.abs(q) > hw):
            raise KeyError(tuple(q.tolist()))
        idx = np.ravel_multi_index(tuple(q + hw), (2 * hw + 1,) * self.d)
        return self.xi[idx]

    def to_dict(self) -> dict:
        return {
            "d": self.d, "theta": self.theta, "box_r": self.box_r, "margin": self.margin,
            "seed": int(self.seed), "replicate": int(self.replicate),
            "tail_bound": self.tail_bound,
            "displacements": [self.sites.tolist(), self.xi.tolist()],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "Configuration":
        sites, xi = data["displacements"]
        d = int(data["d"])
        return cls(d=d, theta=float(data["theta"]), box_r=float(data["box_r"]),
                   margin=int(data["margin"]), seed=int(data["seed"]),
                   replicate=int(data["replicate"]),
                   sites=np.asarray(sites, dtype=np.int64).reshape(-1, d),
                   xi=np.asarray(xi, dtype=float).reshape(-1, d),
                   tail_bound=float(data.get("tail_bound", 0.0)))

    @classmethod
    def from_json(cls, text: str) -> "Configuration":
        return cls.from_dict(json.loads(text))


def lattice_box(d: int, half_width: int) -> np.ndarray:
    axis = np.arange(-half_width, half_width + 1, dtype=np.int64)
    grids = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def sample_configuration(params: ModelParams, spec: PotentialSpec, box_r: float,
                         replicate: int, *, margin: Optional[int] = None,
                         tail_tol: float = DEFAULT_TAIL_TOL,
                         max_sites: int = MAX_SITES) -> Configuration:
    """Displacements for every site of Z^d in the closed box of side box_r + 2 margin."""
    if not box_r >= 1:
        raise DomainError(f"box_r must be >= 1, got {box_r}")
    spec.check_dimension(params.d)
    if margin is None:
        margin = truncation_margin(params.d, params.theta, spec, tail_tol)
    half_width = int(math.floor((box_r + 2 * margin) / 2 + 1e-9))
    n_sites = (2 * half_width + 1) ** params.d
    if n_sites > max_sites:
        raise ResourceError(
            f"{n_sites} lattice sites exceed the budget of {max_sites}; "
            "reduce box_r or loosen tail_tol")
    sites = lattice_box(params.d, half_width)
    u = site_uniforms(stream_key(params.seed, replicate), sites)
    xi = displacements_from_uniforms(params.d, params.theta, u)
    return Configuration(d=params.d, theta=params.theta, box_r=float(box_r), margin=int(margin),
                         seed=int(params.seed), replicate=int(replicate), sites=sites, xi=xi,
                         tail_bound=tail_bound(params.d, spec, margin))


def _box_half_width(sites: np.ndarray, d: int) -> Optional[int]:
    """Half width when ``sites`` is exactly ``lattice_box(d, hw)``, else None."""
    n = sites.shape[0]
    hw = int(round((n ** (1.0 / d) - 1) / 2))
    if (2 * hw + 1) ** d != n or not np.array_equal(sites, lattice_box(d, hw)):
        return None
    return hw


@njit(cache=True, error_model="numpy")
def _field_windowed(x, pos, d, hw, margin, compact, compact_r, u_cap, c0, alpha, r0, out):
    """Sum u over the sites of the window |q - x|_inf <= margin, padded to three axes."""
    side = 2 * hw + 1
    stride = np.ones(3, dtype=np.int64)
    for k in range(d - 2, -1, -1):
        stride[k] = stride[k + 1] * side
    lo = np.zeros(3, dtype=np.int64)
    hi = np.zeros(3, dtype=np.int64)
    r0sq = r0 * r0
    half_power = -0.5 * alpha
    for i in range(x.shape[0]):
        for k in range(3):
            if k < d:
                lo[k] = max(-hw, int(math.ceil(x[i, k] - margin)))
                hi[k] = min(hw, int(math.floor(x[i, k] + margin)))
            else:
                lo[k] = -hw
                hi[k] = -hw
        acc = 0.0
        for a in range(lo[0], hi[0] + 1):
            for b in range(lo[1], hi[1] + 1):
                for c in range(lo[2], hi[2] + 1):
                    j = (a + hw) * stride[0]
                    if d > 1:
                        j += (b + hw) * stride[1]
                    if d > 2:
                        j += (c + hw) * stride[2]
                    if compact:
                        far = 0.0
                        for k in range(d):
                            far = max(far, abs(x[i, k] - pos[j, k]))
                        if far <= compact_r:
                            acc += u_cap
                    elif u_cap != 0.0:
                        r2 = 0.0
                        for k in range(d):
                            r2 += (x[i, k] - pos[j, k]) ** 2
                        acc += min(c0 * max(r2, r0sq) ** half_power, u_cap)
        out[i] = acc


def field_v(config: Configuration, spec: PotentialSpec, x, *, chunk: int = 2_000_000) -> np.ndarray:
    """V(x) = sum over sites q with |q - x|_inf <= margin of u(x - q - xi_q).

    The truncation remainder is bounded by ``config.tail_bound`` and not included.
    """
    x = np.asarray(x, dtype=float)
    scalar = x.ndim <= 1 and (x.size == config.d)
    x = x.reshape(-1, config.d)
    if np.any(np.abs(x) > config.box_r / 2 + 1e-9):
        raise DomainError("evaluation point outside the box")
    out = np.zeros(x.shape[0])
    if spec.u_max == 0:
        return out[0] if scalar else out
    pos = config.positions
    hw = _box_half_width(config.sites, config.d)
    if hw is not None:
        xs = np.zeros((x.shape[0], 3))
        xs[:, :config.d] = x
        ps = np.zeros((pos.shape[0], 3))
        ps[:, :config.d] = pos
        _field_windowed(xs, ps, config.d, hw, config.margin, spec.compact,
                        0.0 if spec.compact_r is None else float(spec.compact_r),
                        float(spec.u_cap), float(spec.c0), float(spec.alpha), float(spec.r0), out)
        return out[0] if scalar else out
    sites = config.sites.astype(float)
    step = max(1, chunk // max(len(config), 1))
    for start in range(0, x.shape[0], step):
        xc = x[start:start + step]
        diff = xc[:, None, :] - pos[None, :, :]
        uu = potential_u(spec, diff)
        window = np.max(np.abs(xc[:, None, :] - sites[None, :, :]), axis=-1) <= config.margin
        out[start:start + step] = np.sum(np.where(window, uu, 0.0), axis=1)
    return out[0] if scalar else out


def max_gap_points(points, box_r: float) -> float:
    """Largest spacing among the points inside (-R/2, R/2), boundaries included."""
    pts = np.sort(np.asarray(points, dtype=float).ravel())
    pts = pts[(pts > -box_r / 2) & (pts < box_r / 2)]
    edges = np.concatenate([[-box_r / 2], pts, [box_r / 2]])
    return float(np.max(np.diff(edges)))


def max_gap(config: Configuration) -> float:
    """Maximal free interval of Lambda_R minus the displaced sites (d = 1 only)."""
    if config.d != 1:
        raise ConfigError("max_gap is only defined for d = 1", field="params.d")
    return max_gap_points(config.positions[:, 0], config.box_r)
