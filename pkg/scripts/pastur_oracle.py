"""Brute-force reference values of the Pastur functional in d = 1.

The inner minimum over the site position r is taken exhaustively over a
uniform grid on [0, L]; the outer integral over s uses the trapezoid rule on
the same grid.  Beyond s = L the integrand equals c0 s^-alpha to leading
order and is added in closed form.
"""
import argparse
import json
import math
import time

import numpy as np
from numba import njit


@njit(cache=True)
def min_plus_rows(a, b):
    """out[i] = min_j a[j] + b[|i - j|]."""
    n = a.shape[0]
    out = np.empty(n)
    for i in range(n):
        best = np.inf
        for j in range(n):
            k = i - j if i >= j else j - i
            v = a[j] + b[k]
            if v < best:
                best = v
        out[i] = best
    return out


def brute_force(theta, alpha, c0, length=100.0, step=1e-3):
    n = int(round(length / step)) + 1
    grid = np.arange(n) * step
    with np.errstate(divide="ignore"):
        a = c0 * grid ** (-alpha)
    b = grid**theta
    inner = min_plus_rows(a, b)
    body = 2.0 * step * (inner.sum() - 0.5 * (inner[0] + inner[-1]))
    tail = 2.0 * c0 * length ** (1 - alpha) / (alpha - 1)
    return body + tail


TRIPLES = [(1.0, 2.0, 1.0), (1.0, 3.0, 1.0), (2.0, 3.0, 1.0)]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--step", type=float, default=1e-3)
    ap.add_argument("--length", type=float, default=100.0)
    args = ap.parse_args()
    out = {}
    for theta, alpha, c0 in TRIPLES:
        t0 = time.time()
        val = brute_force(theta, alpha, c0, args.length, args.step)
        out[f"theta={theta},alpha={alpha},c0={c0}"] = val
        print(f"theta={theta} alpha={alpha} c0={c0}: {val:.10g}  ({time.time() - t0:.1f} s)")
    print(json.dumps(out))


if __name__ == "__main__":
    main()
