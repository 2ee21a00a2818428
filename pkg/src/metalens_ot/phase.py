"""Phase-discontinuity gradients from a transport solution, and their integration.

Phases are in optical-path units (same units as the cost); multiply by the
free-space wavenumber for radians.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import cg
from scipy.spatial import cKDTree

from .cost import CostModel, grad_x_cost, grad_y_cost, projector
from .errors import DiffuseRow, NonInjectiveTargetSampling, SolverDiverged
from .geometry import Grid2, Surface
from .transport import TransportSolution

ROUTE_TOL = 1e-10
TARGET_SEPARATION = 1e-9


@dataclass
class PhaseField:
    """Phase gradient samples on one metasurface.

    ``points`` are the planar positions of the samples on the surface;
    ``sample_points`` are the coordinates the samples are indexed by
    (source nodes for S1, target positions for S2).
    """

    surface: str
    points: np.ndarray
    sample_points: np.ndarray
    grad2: np.ndarray
    grad3: np.ndarray
    scalar: np.ndarray | None = None
    curl_residual: np.ndarray | None = None
    regrid_distance: float = 0.0

    def gradient3(self) -> np.ndarray:
        return np.concatenate([self.grad2, self.grad3[:, None]], axis=1)


def _targets(sol: TransportSolution, targets: str) -> np.ndarray:
    if targets == "map":
        if np.any(sol.diffuse):
            raise DiffuseRow(f"{int(sol.diffuse.sum())} plan row(s) are diffuse; "
                             "use targets='barycentric' or a sharper plan")
        return sol.targets()
    if targets == "barycentric":
        return sol.barycentric_targets()
    raise ValueError(f"targets must be 'map' or 'barycentric', got {targets!r}")


def _first_surface(model: CostModel, x, T):
    """Common S1 terms: foot point, J^-T D psi, field, grad f."""
    p = model.phi(x)
    dpsi = grad_x_cost(model, x, T)
    if model.phi.is_identity:
        w = dpsi
    else:
        J = model.phi.jacobian(x)
        w = np.linalg.solve(np.swapaxes(J, -1, -2), dpsi[..., None])[..., 0]
    e = model.field.eval(x)
    df = model.f.grad(p)
    rhs = model.n2 * w + model.n1 * e[:, 2:3] * df + model.n1 * e[:, :2]
    grad2 = np.einsum("nij,nj->ni", projector(df), rhs)
    return p, w, df, grad2


def recover_phase_single(model: CostModel, sol: TransportSolution, targets: str = "map") -> PhaseField:
    """Phase gradient on S1 for a single metasurface focusing onto ``z = beta``."""
    if model.mode != "single":
        raise ValueError("recover_phase_single needs a single-mode cost model")
    x = sol.cost.row_points
    T = _targets(sol, targets)
    p, _, df, grad2 = _first_surface(model, x, T)
    return PhaseField("S1", p, x, grad2, np.sum(grad2 * df, axis=1))


def recover_phases_double(model: CostModel, sol: TransportSolution,
                          targets: str = "map") -> tuple[PhaseField, PhaseField]:
    """Phase gradients on S1 and S2 of a doublet whose output rays are vertical.

    The S2 gradient is computed twice, from the potential gradient plus the
    surface-mismatch correction and directly from ``D_y c``; the two must agree.
    """
    if model.mode != "double":
        raise ValueError("recover_phases_double needs a double-mode cost model")
    x = sol.cost.row_points
    T = _targets(sol, targets)
    if len(T) > 1:
        close = cKDTree(T).query_pairs(TARGET_SEPARATION)
        if close:
            raise NonInjectiveTargetSampling(
                f"{len(close)} pair(s) of sources map to coincident targets; S2 phase would be multivalued")
    p, w, df, grad2 = _first_surface(model, x, T)
    fp = model.f.eval(p)
    gT = model.g.eval(T)
    dg = model.g.grad(T)
    d = T - p
    c = np.sqrt((gT - fp) ** 2 + np.sum(d * d, axis=1))
    Pg = projector(dg)
    via_potential = (-model.n2 * w
                     + model.n2 * ((gT - fp) / c)[:, None] * (dg - df)
                     - model.n3 * dg)
    via_dy = model.n2 * grad_y_cost(model, x, T) - model.n3 * dg
    psi_a = np.einsum("nij,nj->ni", Pg, via_potential)
    psi_b = np.einsum("nij,nj->ni", Pg, via_dy)
    scale = max(1.0, float(np.abs(psi_b).max(initial=0.0)))
    gap = float(np.abs(psi_a - psi_b).max(initial=0.0))
    if gap > ROUTE_TOL * scale:
        raise RuntimeError(f"S2 phase routes disagree by {gap:.3e}")
    s1 = PhaseField("S1", p, x, grad2, np.sum(grad2 * df, axis=1))
    s2 = PhaseField("S2", T, T, psi_b, np.sum(psi_b * dg, axis=1))
    return s1, s2


def compose_surface_gradient(pf: PhaseField, h: Surface) -> np.ndarray:
    """Planar gradient of ``x -> Phi(x, h(x))``."""
    return pf.grad2 + pf.grad3[:, None] * h.grad(pf.points)


def _difference_ops(grid: Grid2):
    nx, ny = grid.nx, grid.ny
    dx = sparse.diags([-np.ones(nx - 1), np.ones(nx - 1)], [0, 1], shape=(nx - 1, nx)) / grid.hx
    dy = sparse.diags([-np.ones(ny - 1), np.ones(ny - 1)], [0, 1], shape=(ny - 1, ny)) / grid.hy
    Dx = sparse.kron(sparse.eye(ny), dx).tocsr()
    Dy = sparse.kron(dy, sparse.eye(nx)).tocsr()
    return Dx, Dy


def curl_residual(field, grid: Grid2) -> np.ndarray:
    """``d1 F2 - d2 F1`` per grid cell, shape ``(ny-1, nx-1)``."""
    F = np.asarray(field, dtype=float).reshape(grid.ny, grid.nx, 2)
    F1, F2 = F[..., 0], F[..., 1]
    d1F2 = ((F2[:-1, 1:] + F2[1:, 1:]) - (F2[:-1, :-1] + F2[1:, :-1])) / (2 * grid.hx)
    d2F1 = ((F1[1:, :-1] + F1[1:, 1:]) - (F1[:-1, :-1] + F1[:-1, 1:])) / (2 * grid.hy)
    return d1F2 - d2F1


def integrate_gradient(field, grid: Grid2, rtol: float = 1e-12):
    """Least-squares potential of a node vector field, normalised to zero mean.

    Edge differences of ``u`` are matched to the edge-averaged field; the
    normal equations (a Neumann Laplacian) are solved by conjugate gradients.
    Returns ``(u, curl)`` with ``u`` flattened row-major.
    """
    F = np.asarray(field, dtype=float).reshape(grid.size, 2)
    if not np.all(np.isfinite(F)):
        raise ValueError("gradient field has non-finite entries")
    Fg = F.reshape(grid.ny, grid.nx, 2)
    bx = 0.5 * (Fg[:, :-1, 0] + Fg[:, 1:, 0]).ravel()
    by = 0.5 * (Fg[:-1, :, 1] + Fg[1:, :, 1]).ravel()
    Dx, Dy = _difference_ops(grid)
    A = (Dx.T @ Dx + Dy.T @ Dy).tocsr()
    b = Dx.T @ bx + Dy.T @ by
    b -= b.mean()
    if np.linalg.norm(b) == 0:
        u = np.zeros(grid.size)
    else:
        u, info = cg(A, b, rtol=rtol, atol=0.0, maxiter=10 * grid.size)
        if info != 0:
            raise SolverDiverged(f"conjugate gradients stopped after {10 * grid.size} iterations")
    u = u - u.mean()
    curl = curl_residual(F, grid)
    limit = 0.1 * np.abs(np.linalg.norm(F, axis=1)).max() / grid.diameter
    if np.abs(curl).max(initial=0.0) > limit:
        warnings.warn(f"gradient field is not integrable: max |curl| {np.abs(curl).max():.3g} "
                      f"exceeds {limit:.3g}", RuntimeWarning, stacklevel=2)
    return u, curl


def regrid_nearest(sample_points, values, grid: Grid2) -> tuple[np.ndarray, float]:
    """Assign each grid node the value of its nearest sample; also return the largest distance."""
    dist, idx = cKDTree(np.asarray(sample_points)).query(grid.nodes)
    return np.asarray(values)[idx], float(dist.max())


def integrate_phase(pf: PhaseField, h: Surface, grid: Grid2, jacobian=None) -> PhaseField:
    """Fill ``pf.scalar`` and ``pf.curl_residual`` on ``grid``.

    The composed surface gradient is pulled back by ``jacobian`` (``J_phi`` at
    the sample points) when the samples are indexed by source coordinates.
    """
    comp = compose_surface_gradient(pf, h)
    if jacobian is not None:
        comp = np.einsum("nji,nj->ni", jacobian, comp)
    field, dist = regrid_nearest(pf.sample_points, comp, grid)
    u, curl = integrate_gradient(field, grid)
    pf.scalar, pf.curl_residual, pf.regrid_distance = u, curl, dist
    return pf
