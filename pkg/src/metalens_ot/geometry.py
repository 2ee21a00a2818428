"""Planar grids, graph surfaces, incident fields and the ray/surface map.

Arrays follow the convention that the last axis holds coordinates: points
are ``(..., 2)``, directions ``(..., 3)``. Grid nodes are stored row-major,
node ``k = iy * nx + ix``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    AllZeroDensity,
    InvalidSource,
    MultipleIntersections,
    NegativeDensity,
    NoIntersection,
)

DROP_RELATIVE = 1e-14
N_SCAN = 64
NEWTON_POLISH = 3


@dataclass(frozen=True)
class Grid2:
    """Node-centred rectangular grid with trapezoidal quadrature weights."""

    nx: int
    ny: int
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"grid needs at least 2x2 nodes, got {self.nx}x{self.ny}")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("grid bounds must satisfy x_min < x_max and y_min < y_max")

    @property
    def hx(self) -> float:
        return (self.x_max - self.x_min) / (self.nx - 1)

    @property
    def hy(self) -> float:
        return (self.y_max - self.y_min) / (self.ny - 1)

    @property
    def shape(self) -> tuple[int, int]:
        """Array shape ``(ny, nx)`` of node fields."""
        return (self.ny, self.nx)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def diameter(self) -> float:
        return float(np.hypot(self.x_max - self.x_min, self.y_max - self.y_min))

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.x_max, self.y_min, self.y_max)

    @cached_property
    def xs(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.nx)

    @cached_property
    def ys(self) -> np.ndarray:
        return np.linspace(self.y_min, self.y_max, self.ny)

    @cached_property
    def nodes(self) -> np.ndarray:
        X, Y = np.meshgrid(self.xs, self.ys)
        return np.stack([X.ravel(), Y.ravel()], axis=-1)

    @cached_property
    def weights(self) -> np.ndarray:
        wx = np.full(self.nx, self.hx)
        wx[[0, -1]] *= 0.5
        wy = np.full(self.ny, self.hy)
        wy[[0, -1]] *= 0.5
        return np.outer(wy, wx).ravel()

    def cell_bounds(self, k: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Lower/upper corners of the dual (Voronoi) cells of nodes ``k``."""
        k = np.asarray(k)
        centre = self.nodes[k]
        half = np.array([0.5 * self.hx, 0.5 * self.hy])
        lo = np.maximum(centre - half, [self.x_min, self.y_min])
        hi = np.minimum(centre + half, [self.x_max, self.y_max])
        return lo, hi

    def locate(self, points: np.ndarray, tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
        """Dual-cell index of each point and a mask of points inside the domain.

        ``tol`` (relative to the diameter) admits points a rounding error outside.
        """
        p = np.asarray(points, dtype=float)
        slack = tol * self.diameter
        inside = (
            (p[..., 0] >= self.x_min - slack)
            & (p[..., 0] <= self.x_max + slack)
            & (p[..., 1] >= self.y_min - slack)
            & (p[..., 1] <= self.y_max + slack)
        )
        with np.errstate(invalid="ignore"):
            ix = np.rint((p[..., 0] - self.x_min) / self.hx)
            iy = np.rint((p[..., 1] - self.y_min) / self.hy)
        ix = np.clip(np.nan_to_num(ix), 0, self.nx - 1).astype(int)
        iy = np.clip(np.nan_to_num(iy), 0, self.ny - 1).astype(int)
        return iy * self.nx + ix, inside

    def header_fields(self) -> str:
        return (
            f"nx={self.nx} ny={self.ny} x0={self.x_min!r} x1={self.x_max!r} "
            f"y0={self.y_min!r} y1={self.y_max!r}"
        )


def _as_points(x) -> np.ndarray:
    return np.asarray(x, dtype=float)


@dataclass(frozen=True)
class Surface:
    """Graph surface ``z = h(x)``.

    ``eval`` and ``grad`` map ``(..., 2)`` arrays to ``(...)`` and ``(..., 2)``.
    ``zmax`` bounds the heights over the working region and sizes the
    intersection bracket; it may be ``None`` only when rays are vertical or
    the surface is constant.
    """

    eval: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    kind: str
    zmax: float | None = None
    label: str = ""
    constant_value: float | None = None

    def __call__(self, x) -> np.ndarray:
        return self.eval(_as_points(x))

    @property
    def is_constant(self) -> bool:
        return self.constant_value is not None

    @classmethod
    def constant(cls, value: float) -> "Surface":
        value = float(value)

        def ev(x):
            return np.full(_as_points(x).shape[:-1], value)

        def gr(x):
            return np.zeros(_as_points(x).shape)

        return cls(ev, gr, "analytic", zmax=value, label=f"constant({value!r})", constant_value=value)

    @classmethod
    def plane(cls, z0: float, slope=(0.0, 0.0), zmax: float | None = None) -> "Surface":
        """``h(x) = z0 + slope . x``."""
        s = np.asarray(slope, dtype=float)
        if not np.any(s):
            return cls.constant(z0)

        def ev(x):
            return z0 + _as_points(x) @ s

        def gr(x):
            return np.broadcast_to(s, _as_points(x).shape).copy()

        return cls(ev, gr, "analytic", zmax=zmax, label=f"plane({z0!r},{s[0]!r},{s[1]!r})")

    @classmethod
    def paraboloid(cls, a: float, z0: float, center=(0.0, 0.0), zmax: float | None = None) -> "Surface":
        """``h(x) = z0 + a |x - center|^2``."""
        c = np.asarray(center, dtype=float)

        def ev(x):
            d = _as_points(x) - c
            return z0 + a * np.sum(d * d, axis=-1)

        def gr(x):
            return 2.0 * a * (_as_points(x) - c)

        return cls(ev, gr, "analytic", zmax=zmax, label=f"paraboloid({a!r},{z0!r},{c[0]!r},{c[1]!r})")

    @classmethod
    def from_samples(cls, grid: Grid2, heights) -> "Surface":
        """Bilinear interpolant of node heights; queries outside the grid are clamped."""
        H = np.asarray(heights, dtype=float).reshape(grid.shape)

        def _cell(x):
            p = _as_points(x)
            u = np.clip((p[..., 0] - grid.x_min) / grid.hx, 0.0, grid.nx - 1)
            v = np.clip((p[..., 1] - grid.y_min) / grid.hy, 0.0, grid.ny - 1)
            i = np.minimum(np.floor(u).astype(int), grid.nx - 2)
            j = np.minimum(np.floor(v).astype(int), grid.ny - 2)
            return u - i, v - j, i, j

        def ev(x):
            s, t, i, j = _cell(x)
            return (
                H[j, i] * (1 - s) * (1 - t)
                + H[j, i + 1] * s * (1 - t)
                + H[j + 1, i] * (1 - s) * t
                + H[j + 1, i + 1] * s * t
            )

        def gr(x):
            s, t, i, j = _cell(x)
            dx = ((H[j, i + 1] - H[j, i]) * (1 - t) + (H[j + 1, i + 1] - H[j + 1, i]) * t) / grid.hx
            dy = ((H[j + 1, i] - H[j, i]) * (1 - s) + (H[j + 1, i + 1] - H[j, i + 1]) * s) / grid.hy
            return np.stack([dx, dy], axis=-1)

        const = float(H.flat[0]) if np.all(H == H.flat[0]) else None
        return cls(ev, gr, "sampled-bilinear", zmax=float(H.max()), label="sampled", constant_value=const)

    @classmethod
    def load_csv(cls, path) -> "Surface":
        grid, values = read_grid_csv(path, "surface")
        return cls.from_samples(grid, values)


_HEADER = re.compile(r"^#\s*(\w+)\s+(.*)$")


def read_grid_csv(path, tag: str, columns: int = 1) -> tuple[Grid2, np.ndarray]:
    """Read a ``# <tag> nx= ny= x0= x1= y0= y1=`` file of row-major values.

    With ``columns > 1`` each line holds one node and the result has shape
    ``(size, columns)``.
    """
    text = Path(path).read_text().splitlines()
    m = _HEADER.match(text[0].strip()) if text else None
    if not m or m.group(1) != tag:
        raise ValueError(f"{path}: first line must be a '# {tag} ...' header")
    kv = dict(item.split("=", 1) for item in m.group(2).split())
    try:
        grid = Grid2(
            int(kv["nx"]), int(kv["ny"]),
            float(kv["x0"]), float(kv["x1"]), float(kv["y0"]), float(kv["y1"]),
        )
    except KeyError as exc:
        raise ValueError(f"{path}: header is missing {exc.args[0]}") from None
    body = ",".join(line for line in text[1:] if line.strip() and not line.startswith("#"))
    values = np.array([float(v) for v in body.replace("\n", ",").split(",") if v.strip()])
    if values.size != grid.size * columns:
        raise ValueError(f"{path}: expected {grid.size * columns} values, found {values.size}")
    return grid, (values if columns == 1 else values.reshape(grid.size, columns))


def write_grid_csv(path, tag: str, grid: Grid2, values, extra: str = "") -> None:
    """Write values row-major; a ``(size, k)`` array is written one node per line."""
    V = np.asarray(values, dtype=float)
    V = V.reshape(grid.shape) if V.ndim == 1 else V.reshape(grid.size, -1)
    head = f"# {tag} {extra + ' ' if extra else ''}{grid.header_fields()}\n"
    rows = "\n".join(",".join(f"{v:.17g}" for v in row) for row in V)
    Path(path).write_text(head + rows + "\n")


@dataclass(frozen=True)
class IncidentField:
    kind: str
    source: tuple[float, float, float] | None = None

    def __call__(self, x) -> np.ndarray:
        return self.eval(x)

    def eval(self, x) -> np.ndarray:
        p = _as_points(x)
        if self.kind == "collimated":
            out = np.zeros(p.shape[:-1] + (3,))
            out[..., 2] = 1.0
            return out
        p1, p2, p3 = self.source
        d = np.stack([p[..., 0] - p1, p[..., 1] - p2, np.full(p.shape[:-1], -p3)], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


def incident_field(kind: str, P=None) -> IncidentField:
    """Collimated field ``(0,0,1)`` or the unit field radiating from ``P`` (``p3 < 0``)."""
    if kind == "collimated":
        return IncidentField("collimated")
    if kind != "point-source":
        raise ValueError(f"unknown incident field kind {kind!r}")
    if P is None or len(P) != 3:
        raise InvalidSource("point-source field needs P=(p1,p2,p3)")
    P = tuple(float(v) for v in P)
    if not P[2] < 0:
        raise InvalidSource(f"source must lie below z=0, got p3={P[2]}")
    return IncidentField("point-source", P)


def intersect_surface(origins, directions, surface: Surface, t_max, n_scan: int = N_SCAN):
    """Ray parameters where ``origin + t*direction`` meets ``z = h(x)``.

    Scans ``h(t) = z(t) - surface(xy(t))`` on ``[0, t_max]`` for sign
    changes, bisects the bracket and polishes with a few Newton steps.
    Returns ``(t, status)`` with status 0 = ok, 1 = no crossing,
    2 = several crossings; ``t`` is NaN where status != 0.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=float))
    d = np.atleast_2d(np.asarray(directions, dtype=float))
    n = max(len(o), len(d))
    o = np.broadcast_to(o, (n, 3))
    d = np.broadcast_to(d, (n, 3))
    t_max = np.broadcast_to(np.asarray(t_max, dtype=float), (n,))

    def h(t):
        pts = o[..., :2] + t[..., None] * d[..., :2]
        return o[..., 2] + t * d[..., 2] - surface.eval(pts)

    ts = np.linspace(0.0, 1.0, n_scan + 1)[:, None] * t_max[None, :]
    hs = np.stack([h(t) for t in ts])
    sgn = np.sign(hs)
    changes = (sgn[:-1] * sgn[1:] < 0) | ((sgn[1:] == 0) & (sgn[:-1] != 0))
    count = changes.sum(axis=0)
    status = np.where(count == 1, 0, np.where(count == 0, 1, 2))
    first = np.argmax(changes, axis=0)
    cols = np.arange(n)
    lo = ts[first, cols].copy()
    hi = ts[first + 1, cols].copy()
    hlo = hs[first, cols]
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        hm = h(mid)
        left = np.sign(hm) == np.sign(hlo)
        lo = np.where(left, mid, lo)
        hlo = np.where(left, hm, hlo)
        hi = np.where(left, hi, mid)
        if np.all(hi - lo <= 1e-15 * np.maximum(1.0, np.abs(hi))):
            break
    t = 0.5 * (lo + hi)
    for _ in range(NEWTON_POLISH):
        pts = o[..., :2] + t[:, None] * d[..., :2]
        dh = d[..., 2] - np.sum(surface.grad(pts) * d[..., :2], axis=-1)
        step = np.where(np.abs(dh) > 1e-14, h(t) / np.where(dh == 0, 1.0, dh), 0.0)
        t_new = t - step
        # keep Newton inside the bracket
        t = np.where((t_new >= lo - 1e-12) & (t_new <= hi + 1e-12), t_new, t)
    return np.where(status == 0, t, np.nan), status


@dataclass(frozen=True)
class PhiMap:
    """Foot point ``phi(x)`` of the incident ray on ``z = f`` and its Jacobian.

    ``jacobian(x)[..., i, j] = d phi_i / d x_j``.
    """

    field: IncidentField
    surface: Surface
    scale: float = 1.0

    @property
    def is_identity(self) -> bool:
        return self.field.kind == "collimated"

    @property
    def is_analytic(self) -> bool:
        return self.is_identity or self.surface.is_constant

    def __call__(self, x) -> np.ndarray:
        p, status = self.hit(x)
        if np.any(status == 1):
            raise NoIntersection(f"{int(np.sum(status == 1))} ray(s) never reach the surface")
        if np.any(status == 2):
            raise MultipleIntersections(f"{int(np.sum(status == 2))} ray(s) cross the surface more than once")
        return p

    def hit(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Foot points and per-point status (0 ok, 1 no crossing, 2 several); NaN where failed."""
        x = _as_points(x)
        status = np.zeros(x.shape[:-1], dtype=int)
        if self.is_identity:
            return x.copy(), status
        e = self.field.eval(x)
        if self.surface.is_constant:
            return x + self.surface.constant_value / e[..., 2:3] * e[..., :2], status
        flat = x.reshape(-1, 2)
        t, st = self._hit(flat)
        ef = e.reshape(-1, 3)
        return (flat + t[:, None] * ef[:, :2]).reshape(x.shape), st.reshape(status.shape)

    def _hit(self, flat):
        e = self.field.eval(flat)
        zmax = self.surface.zmax
        if zmax is None:
            raise ValueError("surface.zmax is required to bracket non-vertical rays")
        t_max = 2.0 * max(zmax, 1e-300) / e[:, 2].min()
        origins = np.concatenate([flat, np.zeros((len(flat), 1))], axis=1)
        return intersect_surface(origins, e, self.surface, t_max)

    def jacobian(self, x) -> np.ndarray:
        x = _as_points(x)
        eye = np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)).copy()
        if self.is_identity:
            return eye
        if self.surface.is_constant:
            # point source: phi(x) = x + h (x - p) / (-p3)
            p3 = self.field.source[2]
            return eye * (1.0 + self.surface.constant_value / (-p3))
        step = 1e-4 * self.scale
        J = np.empty(x.shape[:-1] + (2, 2))
        for j in range(2):
            dx = np.zeros(2)
            dx[j] = step
            J[..., :, j] = (self(x + dx) - self(x - dx)) / (2 * step)
        return J


def compute_phi(field: IncidentField, f: Surface, x, scale: float = 1.0):
    """Return ``(phi(x), J_phi(x))`` for the ray from ``(x, 0)`` along ``field``."""
    pm = PhiMap(field, f, scale)
    return pm(x), pm.jacobian(x)


def phi_injectivity_gap(phi: PhiMap, points) -> float:
    """Smallest distance between images of distinct points (grid-resolution check)."""
    img = phi(points).reshape(-1, 2)
    if len(img) < 2:
        return float("inf")
    dist, _ = cKDTree(img).query(img, k=2)
    return float(dist[:, 1].min())


@dataclass
class DiscreteMeasure:
    """Weighted point cloud of total mass one.

    ``grid``/``indices`` are set when the points are nodes of a grid.
    """

    points: np.ndarray
    masses: np.ndarray
    grid: Grid2 | None = None
    indices: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        self.masses = np.asarray(self.masses, dtype=float).ravel()
        if len(self.points) != len(self.masses):
            raise ValueError("points and masses differ in length")
        if np.any(self.masses <= 0):
            raise ValueError("masses must be strictly positive")
        if abs(self.masses.sum() - 1.0) > 1e-12:
            raise ValueError(f"masses sum to {self.masses.sum()!r}, expected 1")

    def __len__(self) -> int:
        return len(self.masses)

    def dense(self) -> np.ndarray:
        """Mass per grid node (zeros where points were dropped)."""
        if self.grid is None:
            raise ValueError("measure is not attached to a grid")
        out = np.zeros(self.grid.size)
        np.add.at(out, self.indices, self.masses)
        return out

    @classmethod
    def from_dense(cls, grid: Grid2, mass: np.ndarray) -> "DiscreteMeasure":
        mass = np.asarray(mass, dtype=float).ravel()
        keep = np.flatnonzero(mass > 0)
        m = mass[keep] / mass[keep].sum()
        return cls(grid.nodes[keep], m, grid, keep)


def build_measure(grid: Grid2, density) -> DiscreteMeasure:
    """Discretise ``density dx`` on ``grid`` with trapezoidal weights.

    ``density`` is a callable on ``(N, 2)`` node arrays or an array of node values.
    """
    rho = density(grid.nodes) if callable(density) else density
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (grid.size,))
    if np.any(rho < 0):
        raise NegativeDensity(f"density is negative at {int(np.sum(rho < 0))} node(s)")
    if not np.any(rho > 0):
        raise AllZeroDensity("density vanishes on every node")
    keep = np.flatnonzero(rho > DROP_RELATIVE * rho.max())
    mass = rho[keep] * grid.weights[keep]
    return DiscreteMeasure(grid.nodes[keep], mass / mass.sum(), grid, keep)
