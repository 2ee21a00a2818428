"""Independent reference computations used by the tests.

Nothing here imports the package's solvers or closed forms; each oracle
derives its answer a different way (brute force, finite differences, or
elementary trigonometry).
"""

from itertools import permutations

import numpy as np


def brute_force_assignment(C):
    """Cheapest permutation of an n x n equal-mass problem by enumeration.

    Returns ``(perm, cost)`` with the cost averaged over rows (masses 1/n).
    Ties keep the lexicographically first permutation.
    """
    C = np.asarray(C, dtype=float)
    n = len(C)
    best, best_perm = np.inf, None
    rows = np.arange(n)
    for perm in permutations(range(n)):
        c = C[rows, perm].sum()
        if c < best - 1e-12:
            best, best_perm = c, perm
    return np.array(best_perm), best / n


def cost_direct(f, g, x, y):
    """Refraction cost for collimated light (foot point = x), from scratch."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    dz = g(y) - f(x)
    return float(np.sqrt(dz * dz + np.sum((x - y) ** 2)))


def fd_gradient(fun, z, step):
    """Central-difference gradient of a scalar function of a 2-vector."""
    z = np.asarray(z, float)
    out = np.zeros(2)
    for k in range(2):
        e = np.zeros(2)
        e[k] = step
        out[k] = (fun(z + e) - fun(z - e)) / (2 * step)
    return out


def fd_mixed_det(fun, x, y, step):
    """det of d^2 fun / dx dy by nested central differences."""
    H = np.zeros((2, 2))
    for i in range(2):
        ei = np.zeros(2)
        ei[i] = step
        for j in range(2):
            ej = np.zeros(2)
            ej[j] = step
            H[i, j] = (fun(x + ei, y + ej) - fun(x + ei, y - ej)
                       - fun(x - ei, y + ej) + fun(x - ei, y - ej)) / (4 * step * step)
    return float(np.linalg.det(H))


def snell_planar(incident, n1, n2):
    """Classical refraction through the plane z = 0 using angles only."""
    e = np.asarray(incident, float)
    sin1 = np.hypot(e[0], e[1])
    sin2 = n1 * sin1 / n2
    if sin2 >= 1:
        return None
    cos2 = np.sqrt(1 - sin2 * sin2)
    if sin1 == 0:
        return np.array([0.0, 0.0, 1.0])
    t = e[:2] / sin1
    return np.array([t[0] * sin2, t[1] * sin2, cos2])


def ray_line_distance(origin, direction, point):
    d = np.asarray(direction, float) / np.linalg.norm(direction)
    v = np.asarray(point, float) - np.asarray(origin, float)
    return float(np.linalg.norm(v - (v @ d) * d))
