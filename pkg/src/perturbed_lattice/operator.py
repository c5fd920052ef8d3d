"""Finite-difference Hamiltonians -h*Laplacian + sign*V on a cubic box."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .errors import ConfigError, DegenerateDomainError, DomainError, ResourceError
from .randfield import Configuration, PotentialSpec, field_v

MAX_GRID_POINTS = 10_000_000
BOUNDARY_CONDITIONS = ("dirichlet", "neumann")


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid on the box [-R/2, R/2]^d.

    Dirichlet grids use the n interior nodes of n+1 equal cells; Neumann
    grids use the n cell centres.
    """

    d: int
    box_r: float
    n_per_side: int
    bc: str = "dirichlet"
    max_points: int = MAX_GRID_POINTS

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ConfigError("d must be 1, 2 or 3", field="grid.d")
        if not self.box_r > 0:
            raise ConfigError("box_r must be positive", field="grid.box_r")
        if int(self.n_per_side) < 2:
            raise ConfigError("n_per_side must be >= 2", field="grid.n_per_side")
        if self.bc not in BOUNDARY_CONDITIONS:
            raise ConfigError(f"bc must be one of {BOUNDARY_CONDITIONS}", field="grid.bc")
        if self.n_points > self.max_points:
            raise ResourceError(f"{self.n_points} grid points exceed the budget of {self.max_points}")

    @classmethod
    def from_spacing(cls, d: int, box_r: float, dx: float, bc: str = "dirichlet", **kw) -> "GridSpec":
        cells = int(round(box_r / dx))
        n = cells - 1 if bc == "dirichlet" else cells
        return cls(d=d, box_r=box_r, n_per_side=n, bc=bc, **kw)

    @property
    def dx(self) -> float:
        if self.bc == "dirichlet":
            return self.box_r / (self.n_per_side + 1)
        return self.box_r / self.n_per_side

    @property
    def n_points(self) -> int:
        return int(self.n_per_side) ** self.d

    @property
    def shape(self) -> tuple:
        return (int(self.n_per_side),) * self.d

    def axis(self) -> np.ndarray:
        i = np.arange(self.n_per_side, dtype=float)
        offset = 1.0 if self.bc == "dirichlet" else 0.5
        return -self.box_r / 2 + self.dx * (i + offset)

    def coords(self) -> np.ndarray:
        ax = self.axis()
        mesh = np.meshgrid(*([ax] * self.d), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass(frozen=True, eq=False)
class DiscreteOperator:
    """Symmetric (2d+1)-point operator restricted to the points kept after obstacle removal.

    ``rows``, ``cols``, ``vals`` hold the strictly upper off-diagonal entries in
    the kept-point numbering.
    """

    grid: GridSpec
    h: float
    diag: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    kept: np.ndarray
    coords: np.ndarray
    potential: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return int(self.diag.shape[0])

    @property
    def d(self) -> int:
        return self.grid.d

    def tridiagonal(self) -> tuple[np.ndarray, np.ndarray]:
        """Native (diag, off) form; only available in d = 1."""
        if self.d != 1:
            raise ConfigError("native tridiagonal form exists only for d = 1", field="grid.d")
        off = np.zeros(max(self.dim - 1, 0))
        off[self.rows] = np.where(self.cols == self.rows + 1, self.vals, 0.0)
        return self.diag.copy(), off

    def to_sparse(self) -> sparse.csr_matrix:
        n = self.dim
        r = np.concatenate([np.arange(n), self.rows, self.cols])
        c = np.concatenate([np.arange(n), self.cols, self.rows])
        v = np.concatenate([self.diag, self.vals, self.vals])
        return sparse.csr_matrix((v, (r, c)), shape=(n, n))

    def to_dense(self) -> np.ndarray:
        a = np.diag(self.diag)
        a[self.rows, self.cols] = self.vals
        a[self.cols, self.rows] = self.vals
        return a

    def gershgorin(self) -> tuple[float, float]:
        radius = np.zeros(self.dim)
        np.add.at(radius, self.rows, np.abs(self.vals))
        np.add.at(radius, self.cols, np.abs(self.vals))
        return float(np.min(self.diag - radius)), float(np.max(self.diag + radius))

    def write_coo(self, path) -> None:
        """Write all nonzeros as 'row col value' lines (0-based, both triangles)."""
        m = self.to_sparse().tocoo()
        order = np.lexsort((m.col, m.row))
        with open(path, "w") as fh:
            for i, j, v in zip(m.row[order], m.col[order], m.data[order]):
                fh.write(f"{i} {j} {v:.17g}\n")


def obstacle_mask(coords: np.ndarray, config: Configuration, rho: float) -> np.ndarray:
    """True where a grid point lies within distance rho of some displaced site."""
    if rho <= 0 or config is None:
        return np.zeros(coords.shape[0], dtype=bool)
    pos = config.positions
    half = np.max(np.abs(coords)) + rho + 1e-9
    pos = pos[np.all(np.abs(pos) <= half, axis=1)]
    if pos.shape[0] == 0:
        return np.zeros(coords.shape[0], dtype=bool)
    dist, _ = cKDTree(pos).query(coords, k=1)
    return dist <= rho


def assemble(grid: GridSpec, config: Optional[Configuration], spec: PotentialSpec,
             sign: Optional[int] = None, *, h: float = 1.0,
             potential: Optional[np.ndarray] = None) -> DiscreteOperator:
    """Assemble -h*Laplacian + sign*V_xi with obstacles removed as Dirichlet holes.

    ``config=None`` gives the free operator.  ``potential`` overrides V on the
    full grid (one value per grid point, C order) and is used by checks with
    frozen or synthetic fields.
    """
    if not h > 0:
        raise ConfigError("h must be positive", field="params.h")
    sign = spec.sign if sign is None else int(sign)
    if sign not in (1, -1):
        raise ConfigError("sign must be +1 or -1", field="spec.sign")
    if config is not None:
        if config.d != grid.d:
            raise DomainError("configuration and grid dimensions differ")
        if config.box_r + 1e-9 < grid.box_r:
            raise DomainError("configuration box does not cover the grid box")

    coords = grid.coords()
    removed = obstacle_mask(coords, config, spec.obstacle_rho)
    kept = ~removed
    if not kept.any():
        raise DegenerateDomainError("all grid points removed by obstacles")
    kept_coords = coords[kept]

    if potential is not None:
        v = np.asarray(potential, dtype=float).reshape(-1)
        if v.shape[0] != grid.n_points:
            raise DomainError("potential override must have one value per grid point")
        v = v[kept]
    elif config is None:
        v = np.zeros(kept_coords.shape[0])
    else:
        v = field_v(config, spec, kept_coords)

    w = h / grid.dx**2
    n = grid.n_per_side
    full_diag = np.full(grid.shape, 2.0 * grid.d * w)
    if grid.bc == "neumann":
        for ax in range(grid.d):
            lo = [slice(None)] * grid.d
            hi = [slice(None)] * grid.d
            lo[ax] = 0
            hi[ax] = n - 1
            full_diag[tuple(lo)] -= w
            full_diag[tuple(hi)] -= w
    diag = full_diag.ravel()[kept] + sign * v

    new_index = np.cumsum(kept) - 1
    idx = np.arange(grid.n_points).reshape(grid.shape)
    rows, cols = [], []
    for ax in range(grid.d):
        a = np.take(idx, np.arange(n - 1), axis=ax).ravel()
        b = np.take(idx, np.arange(1, n), axis=ax).ravel()
        both = kept[a] & kept[b]
        rows.append(new_index[a[both]])
        cols.append(new_index[b[both]])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    vals = np.full(rows.shape[0], -w)
    return DiscreteOperator(grid=grid, h=float(h), diag=diag, rows=rows, cols=cols, vals=vals,
                            kept=kept, coords=kept_coords, potential=v)


def curvature_proxy(spec: PotentialSpec) -> float:
    """Rough sup |second derivative of u| used by the discretization budget."""
    if spec.u_max == 0:
        return 0.0
    if spec.compact:
        return spec.u_cap / spec.compact_r**2
    r = spec.core_radius
    return spec.c0 * spec.alpha * (spec.alpha + 1) * r ** (-spec.alpha - 2)


def continuum_error_estimate(grid: GridSpec, spec: PotentialSpec, lam: Optional[float] = None,
                             h: float = 1.0) -> float:
    """Advisory O(dx^2) bound on |lambda_FD - lambda_continuum| near energy ``lam``.

    The second-order stencil error of a mode with energy lam is about
    lam^2 dx^2 / (12 h); a curvature proxy of the potential is added and the
    sum is doubled as a safety factor.
    """
    if lam is None:
        lam = grid.d * h * math.pi**2 / grid.box_r**2
    return grid.dx**2 / 6.0 * (lam**2 / h + curvature_proxy(spec))
