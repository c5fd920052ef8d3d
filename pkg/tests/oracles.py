"""Independent reference computations shared by the unit and acceptance tests."""
import importlib.util
import math
from pathlib import Path

import numpy as np
from scipy import optimize

# Frozen values of the brute-force minimum-plus oracle (scripts/pastur_oracle.py, step 1e-3).
PASTUR_ORACLE = {(1.0, 2.0, 1.0): 4.762203341238158,
                 (1.0, 3.0, 1.0): 3.4641018037547817,
                 (2.0, 3.0, 1.0): 3.0367276655721263}


def load_pastur_script():
    path = Path(__file__).resolve().parents[1] / "scripts" / "pastur_oracle.py"
    spec = importlib.util.spec_from_file_location("pastur_oracle", path)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def full_2d_inner(q, theta, alpha, c0):
    """min over y in R^2 of c0 |q + y|^-alpha + |y|^theta by polar scan plus simplex polish."""
    def f(y):
        r = math.hypot(q[0] + y[0], q[1] + y[1])
        return c0 * max(r, 1e-12) ** -alpha + math.hypot(y[0], y[1]) ** theta
    rho = np.linspace(0, np.linalg.norm(q) + 4, 161)
    phi = np.linspace(0, 2 * math.pi, 145, endpoint=False)
    pts = np.stack(np.meshgrid(rho, phi, indexing="ij"), -1).reshape(-1, 2)
    ys = np.stack([pts[:, 0] * np.cos(pts[:, 1]), pts[:, 0] * np.sin(pts[:, 1])], axis=1)
    vals = [f(y) for y in ys]
    y0 = ys[int(np.argmin(vals))]
    res = optimize.minimize(f, y0, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-13,
                                                                    "maxiter": 4000})
    return min(res.fun, min(vals))


def fd_dirichlet_eigenvalues(n: int, dx: float, h: float = 1.0) -> np.ndarray:
    k = np.arange(1, n + 1)
    return 2.0 * h * (1.0 - np.cos(k * math.pi / (n + 1))) / dx**2
