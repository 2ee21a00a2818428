"""Refraction transport costs and their derivatives.

For a foot point ``p = phi(x)`` on ``z = f`` and a target ``y``::

    c(x, y) = sqrt((g(y) - f(p))^2 + |p - y|^2)

with ``g`` the constant plane height ``beta`` for a single metasurface and
the second surface for a doublet. Every function broadcasts over leading
axes of ``x`` (``(..., 2)``) and ``y`` (``(..., 2)``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SingularA, SingularUpdate
from .geometry import IncidentField, PhiMap, Surface, incident_field

SINGULAR_TOL = 1e-12


@dataclass(frozen=True)
class CostModel:
    mode: str
    f: Surface
    g: Surface
    phi: PhiMap
    n1: float = 1.0
    n2: float = 1.0
    n3: float = 1.0

    def __post_init__(self):
        if self.mode not in ("single", "double"):
            raise ValueError(f"mode must be 'single' or 'double', got {self.mode!r}")
        if self.mode == "single" and not self.g.is_constant:
            raise ValueError("single mode needs a constant target plane z=beta")
        if min(self.n1, self.n2, self.n3) <= 0:
            raise ValueError("refractive indices must be positive")

    @classmethod
    def single(cls, f: Surface, beta: float, n1: float, n2: float,
               field: IncidentField | None = None, scale: float = 1.0) -> "CostModel":
        field = field or incident_field("collimated")
        return cls("single", f, Surface.constant(beta), PhiMap(field, f, scale), n1, n2, 1.0)

    @classmethod
    def double(cls, f: Surface, g: Surface, n1: float, n2: float, n3: float,
               field: IncidentField | None = None, scale: float = 1.0) -> "CostModel":
        field = field or incident_field("collimated")
        return cls("double", f, g, PhiMap(field, f, scale), n1, n2, n3)

    @property
    def beta(self) -> float:
        if self.mode != "single":
            raise AttributeError("beta is only defined in single mode")
        return self.g.constant_value

    @property
    def field(self) -> IncidentField:
        return self.phi.field


def _foot(model: CostModel, x):
    x = np.asarray(x, dtype=float)
    p = model.phi(x)
    return p, model.f.eval(p), model.f.grad(p)


def _parts(model: CostModel, x, y):
    y = np.asarray(y, dtype=float)
    p, fp, df = _foot(model, x)
    gy = model.g.eval(y)
    d = p - y
    c = np.sqrt((gy - fp) ** 2 + np.sum(d * d, axis=-1))
    return p, fp, df, gy, d, c


def cost_eval(model: CostModel, x, y) -> np.ndarray:
    return _parts(model, x, y)[-1]


def grad_x_cost(model: CostModel, x, y) -> np.ndarray:
    """Gradient in ``x``: ``J_phi^T (p - y - (g(y) - f(p)) grad f(p)) / c``."""
    p, fp, df, gy, d, c = _parts(model, x, y)
    inner = (d - (gy - fp)[..., None] * df) / c[..., None]
    if model.phi.is_identity:
        return inner
    J = model.phi.jacobian(np.asarray(x, dtype=float))
    return np.einsum("...ji,...j->...i", J, inner)


def grad_y_cost(model: CostModel, x, y) -> np.ndarray:
    """Gradient in ``y``: ``(y - p + (g(y) - f(p)) grad g(y)) / c``."""
    p, fp, df, gy, d, c = _parts(model, x, y)
    dg = model.g.grad(np.asarray(y, dtype=float))
    return (-d + (gy - fp)[..., None] * dg) / c[..., None]


def sm_inverse(u, v):
    """Inverse and determinant of ``Id + u v^T``."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    s = 1.0 + np.sum(u * v, axis=-1)
    if np.any(np.abs(s) < SINGULAR_TOL):
        raise SingularUpdate("1 + v.u vanishes")
    n = u.shape[-1]
    inv = np.eye(n) - u[..., :, None] * v[..., None, :] / s[..., None, None]
    return inv, s


def projector(grad_h) -> np.ndarray:
    """``(Id + grad h grad h^T)^-1 = Id - grad h grad h^T / (1 + |grad h|^2)``."""
    return sm_inverse(grad_h, grad_h)[0]


def mixed_hessian_det(model: CostModel, x, y) -> np.ndarray:
    """``det d2c/dxdy``: rank-one closed form at ``(phi(x), y)`` times ``det J_phi``."""
    p, fp, df, gy, d, c = _parts(model, x, y)
    dg = model.g.grad(np.asarray(y, dtype=float))
    a = 1.0 + np.sum(dg * df, axis=-1)
    if np.any(np.abs(a) < SINGULAR_TOL):
        raise SingularA("1 + grad g . grad f vanishes")
    u = ((fp - gy)[..., None] * dg + d) / c[..., None]
    v = ((gy - fp)[..., None] * df - d) / c[..., None]
    # det(A + u v^T) = (1 + v^T A^-1 u) det A; A is not symmetric, so the order matters
    vAu = np.sum(v * u, axis=-1) - np.sum(v * dg, axis=-1) * np.sum(df * u, axis=-1) / a
    det = (1.0 / c) ** 2 * (1.0 + vAu) * a
    if not model.phi.is_identity:
        det = det * np.linalg.det(model.phi.jacobian(np.asarray(x, dtype=float)))
    return det


@dataclass(frozen=True)
class CostMatrix:
    entries: np.ndarray
    row_points: np.ndarray
    col_points: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape


def cost_matrix(model: CostModel, xs, ys) -> CostMatrix:
    xs = np.asarray(xs, dtype=float).reshape(-1, 2)
    ys = np.asarray(ys, dtype=float).reshape(-1, 2)
    C = cost_eval(model, xs[:, None, :], ys[None, :, :])
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix has non-finite entries")
    return CostMatrix(C, xs, ys)
