"""Generalized Snell's law, forward ray tracing through designed metalenses,
and the pushforward/energy check of a design.

Surface normals are used unnormalised as ``(-grad h, 1)``; the Lagrange
multiplier ``lam`` absorbs the scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import LinearNDInterpolator, NearestNDInterpolator, RegularGridInterpolator

from .errors import (
    Evanescent,
    ExcessiveLoss,
    GridMismatch,
    MissedSurface,
    NonTangentialPhase,
    NoRealRoot,
)
from .geometry import DiscreteMeasure, Grid2, IncidentField, PhiMap, Surface, intersect_surface

TANGENT_TOL = 1e-9
MAX_LOSS = 0.01


@dataclass
class RefractionResult:
    direction: np.ndarray
    lam: np.ndarray
    degenerate: np.ndarray | bool = False


def _dot(a, b):
    return np.sum(a * b, axis=-1)


def _check_tangential(nu, grad_phi):
    nn = np.sqrt(_dot(nu, nu))
    if np.any(nn == 0):
        raise ValueError("surface normal must be non-zero")
    off = np.abs(_dot(nu, grad_phi)) / nn
    if np.any(off > TANGENT_TOL * np.maximum(1.0, np.sqrt(_dot(grad_phi, grad_phi)))):
        raise NonTangentialPhase(f"phase gradient has a normal component of {off.max():.3e}")


def _gsl_roots(w, nu, n_out):
    """Discriminant and pieces of ``|w - lam nu| = n_out``."""
    nn = _dot(nu, nu)
    wn = _dot(w, nu)
    disc = wn * wn - nn * (_dot(w, w) - n_out * n_out)
    return nn, wn, disc


def refract_many(incident, normal, grad_phi, n1, n2):
    """Vectorised refraction; returns ``(m, lam, ok)`` with NaN where evanescent."""
    e = np.asarray(incident, dtype=float)
    nu = np.asarray(normal, dtype=float)
    gp = np.asarray(grad_phi, dtype=float)
    w = n1 * e - gp
    nn, wn, disc = _gsl_roots(w, nu, n2)
    ok = disc > 0
    root = np.sqrt(np.where(ok, disc, np.nan))
    lam = (wn - root) / nn
    m = (w - lam[..., None] * nu) / n2
    return m, lam, ok


def refract(incident, normal, grad_phi, n1: float, n2: float) -> RefractionResult:
    """Solve ``n1 e - n2 m = lam nu + grad Phi`` for the transmitted unit ``m`` (``m . nu > 0``)."""
    nu = np.asarray(normal, dtype=float)
    gp = np.asarray(grad_phi, dtype=float)
    _check_tangential(nu, gp)
    m, lam, ok = refract_many(incident, nu, gp, n1, n2)
    if not np.all(ok):
        raise Evanescent("no transmitted direction: generalized total internal reflection")
    return RefractionResult(m, lam, False)


def reflect(incident, normal, grad_phi, n1: float) -> RefractionResult:
    """Solve ``n1 x - n1 r = lam nu + grad Phi`` with ``r`` on the incidence side.

    A ray tangent to the surface with no phase kick returns itself and is
    flagged ``degenerate``.
    """
    x = np.asarray(incident, dtype=float)
    nu = np.asarray(normal, dtype=float)
    gp = np.asarray(grad_phi, dtype=float)
    _check_tangential(nu, gp)
    w = n1 * x - gp
    nn, wn, disc = _gsl_roots(w, nu, n1)
    scale = n1 * n1 * nn
    if np.any(disc < -1e-14 * scale):
        raise NoRealRoot("phase gradient too large for a reflected ray")
    root = np.sqrt(np.maximum(disc, 0.0))
    side = np.sign(_dot(x, nu))
    lam = (wn + np.where(side >= 0, root, -root)) / nn
    r = (w - lam[..., None] * nu) / n1
    degenerate = root <= 1e-12 * np.sqrt(scale)
    return RefractionResult(r, lam, degenerate)


def _normal(grad_h):
    return np.concatenate([-grad_h, np.ones(grad_h.shape[:-1] + (1,))], axis=-1)


class GridVectorField:
    """Bilinear interpolation of a vector field sampled on grid nodes (clamped outside)."""

    def __init__(self, grid: Grid2, values):
        self.grid = grid
        self.values = np.asarray(values, dtype=float).reshape(grid.size, 2)
        self._interp = RegularGridInterpolator(
            (grid.ys, grid.xs), self.values.reshape(grid.ny, grid.nx, 2), method="linear")

    def __call__(self, x) -> np.ndarray:
        p = np.asarray(x, dtype=float)
        q = np.stack([np.clip(p[..., 1], self.grid.y_min, self.grid.y_max),
                      np.clip(p[..., 0], self.grid.x_min, self.grid.x_max)], axis=-1)
        return self._interp(q)


class ScatteredVectorField:
    """Piecewise-linear interpolation over a Delaunay triangulation of the samples,
    nearest sample outside their convex hull. Exact at the samples."""

    def __init__(self, points, values):
        self.points = np.asarray(points, dtype=float)
        self.values = np.asarray(values, dtype=float)
        self._linear = LinearNDInterpolator(self.points, self.values)
        self._nearest = NearestNDInterpolator(self.points, self.values)

    def __call__(self, x) -> np.ndarray:
        p = np.asarray(x, dtype=float)
        out = self._linear(p)
        bad = ~np.all(np.isfinite(out), axis=-1)
        if np.any(bad):
            out[bad] = self._nearest(p[bad])
        return out


@dataclass
class Design:
    """Everything needed to trace rays through a designed metalens.

    ``s1`` is indexed by source coordinates ``x`` (the ray from ``(x, 0)``
    meets S1 at ``phi(x)``); ``s2`` by planar position on S2.
    """

    mode: str
    field: IncidentField
    f: Surface
    beta: float
    n1: float
    n2: float
    s1: GridVectorField | ScatteredVectorField
    g: Surface | None = None
    n3: float = 1.0
    s2: ScatteredVectorField | GridVectorField | None = None
    scale: float = 1.0

    @property
    def phi(self) -> PhiMap:
        return PhiMap(self.field, self.f, self.scale)


@dataclass
class TraceResult:
    landing: np.ndarray
    direction: np.ndarray
    ok: np.ndarray
    reason: np.ndarray


# reason codes
OK, MISSED, EVANESCENT = 0, 1, 2


def trace_many(design: Design, xs) -> TraceResult:
    """Trace rays from source points ``xs`` to the plane ``z = beta``.

    Failed rays get NaN landings and a nonzero ``reason``.
    """
    x = np.asarray(xs, dtype=float).reshape(-1, 2)
    n = len(x)
    reason = np.zeros(n, dtype=int)
    e = design.field.eval(x)
    p, status = design.phi.hit(x)
    reason[status != 0] = MISSED
    p = np.where(status[:, None] == 0, p, x)
    fp = design.f.eval(p)
    df = design.f.grad(p)
    g2 = design.s1(x)
    grad_phi = np.concatenate([g2, _dot(g2, df)[:, None]], axis=1)
    m, _, ok = refract_many(e, _normal(df), grad_phi, design.n1, design.n2)
    reason[(reason == OK) & ~ok] = EVANESCENT
    start = np.concatenate([p, fp[:, None]], axis=1)
    direction = m
    if design.mode == "double":
        live = reason == OK
        t = np.full(n, np.nan)
        if np.any(live):
            zmax = design.g.zmax if design.g.zmax is not None else design.beta
            up = np.maximum(m[live, 2], 1e-300)
            t_max = 2.0 * np.maximum(zmax - fp[live], 1e-12) / up
            t_live, st = intersect_surface(start[live], m[live], design.g, t_max)
            t[live] = t_live
            miss = np.flatnonzero(live)[st != 0]
            reason[miss] = MISSED
        live = reason == OK
        q = start + np.where(live, t, 0.0)[:, None] * m
        dg = design.g.grad(q[:, :2])
        s2 = np.zeros((n, 2))
        if np.any(live):
            s2[live] = design.s2(q[live, :2])
        grad_psi = np.concatenate([s2, _dot(s2, dg)[:, None]], axis=1)
        m2, _, ok2 = refract_many(m, _normal(dg), grad_psi, design.n2, design.n3)
        reason[(reason == OK) & ~ok2] = EVANESCENT
        start, direction = q, m2
    live = reason == OK
    up = direction[:, 2]
    forward = live & (up > 0)
    reason[live & ~forward] = MISSED
    t = np.where(forward, (design.beta - start[:, 2]) / np.where(forward, up, 1.0), np.nan)
    landing = start[:, :2] + t[:, None] * direction[:, :2]
    return TraceResult(landing, direction, reason == OK, reason)


def trace(design: Design, x) -> np.ndarray:
    """Landing point on ``z = beta`` of the ray from ``(x, 0)``."""
    res = trace_many(design, np.asarray(x, dtype=float)[None, :])
    if res.reason[0] == EVANESCENT:
        raise Evanescent("ray is not transmitted")
    if res.reason[0] == MISSED:
        raise MissedSurface("ray does not reach the next surface")
    return res.landing[0]


def sample_rays(source: DiscreteMeasure, n_rays: int, rng: np.random.Generator) -> DiscreteMeasure:
    """Stratified ray sample: each node gets a share of ``n_rays`` proportional to
    its mass (largest remainder), drawn uniformly in the node's dual cell."""
    if source.grid is None:
        return source
    quota = source.masses * n_rays
    counts = np.floor(quota).astype(int)
    short = n_rays - counts.sum()
    if short > 0:
        order = np.argsort(-(quota - counts), kind="stable")
        counts[order[:short]] += 1
    keep = counts > 0
    node = np.repeat(source.indices[keep], counts[keep])
    lo, hi = source.grid.cell_bounds(node)
    pts = lo + rng.random(lo.shape) * (hi - lo)
    mass = np.repeat(source.masses[keep] / counts[keep], counts[keep])
    return DiscreteMeasure(pts, mass / mass.sum())


@dataclass
class Pushforward:
    measure: DiscreteMeasure | None
    binned: np.ndarray
    lost_mass: float
    rays: int


def pushforward(design: Design, source: DiscreteMeasure, target_grid: Grid2,
                max_loss: float = MAX_LOSS) -> Pushforward:
    """Trace every source point and deposit its mass in the target dual cell it lands in."""
    res = trace_many(design, source.points)
    cell, inside = target_grid.locate(res.landing)
    landed = res.ok & inside
    binned = np.zeros(target_grid.size)
    np.add.at(binned, cell[landed], source.masses[landed])
    lost = float(source.masses[~landed].sum())
    if lost > max_loss:
        raise ExcessiveLoss(f"{lost:.2%} of the mass misses the target domain")
    measure = DiscreteMeasure.from_dense(target_grid, binned) if binned.sum() > 0 else None
    return Pushforward(measure, binned, lost, len(source))


@dataclass
class EnergyReport:
    l1: float
    linf_cell: float
    lost_mass: float = 0.0
    rays: int = 0
    tol: float | None = None

    @property
    def passed(self) -> bool:
        return self.tol is None or self.l1 <= self.tol

    def format(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"l1={self.l1:.6g} linf_cell={self.linf_cell:.6g} "
                f"lost_mass={self.lost_mass:.6g} rays={self.rays} verdict={verdict}")


def verify_energy(push: DiscreteMeasure, target: DiscreteMeasure, tol: float | None = None,
                  lost_mass: float = 0.0, rays: int = 0) -> EnergyReport:
    """Total-variation distance between two measures binned on the same grid."""
    if push.grid is None or target.grid is None or push.grid != target.grid:
        raise GridMismatch("measures are not binned on the same grid")
    diff = push.dense() - target.dense()
    return EnergyReport(0.5 * float(np.abs(diff).sum()), float(np.abs(diff).max()),
                        lost_mass, rays, tol)
