"""Sufficient-condition checks on the refraction cost: twist and C3 bounds.

All extrema are taken over grid nodes, so they are inner approximations of
the continuum sup/min. A failed inequality only means the sufficient bound
does not certify the condition; the report says "inconclusive", not
"violated".
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .cost import CostModel, grad_x_cost, mixed_hessian_det
from .errors import InvalidAlpha, InvalidAlphas
from .geometry import Grid2

TWIST_SAMPLES = 50
TWIST_SEPARATION = 1e-9
DET_SIDE = 16


@dataclass(frozen=True)
class BoundConstants:
    G: float
    M0: float
    Mf: float
    Mg: float
    f_sup: float
    beta: float | None = None


@dataclass
class ConditionEntry:
    name: str
    lhs: float
    rhs: float
    strict: bool = False

    @property
    def margin(self) -> float:
        return self.rhs - self.lhs

    @property
    def passed(self) -> bool:
        return self.margin > 0 if self.strict else self.margin >= 0


@dataclass
class ConditionReport:
    constants: BoundConstants
    entries: list[ConditionEntry] = field(default_factory=list)
    empirical: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def extend(self, entries) -> "ConditionReport":
        self.entries.extend(entries)
        return self

    def format(self) -> str:
        c = self.constants
        rows = [("G", f"{c.G:.6g}"), ("M0", f"{c.M0:.6g}"), ("Mf", f"{c.Mf:.6g}"),
                ("Mg", f"{c.Mg:.6g}"), ("f_sup", f"{c.f_sup:.6g}")]
        if c.beta is not None:
            rows.append(("beta", f"{c.beta:.6g}"))
        for e in self.entries:
            op = "<" if e.strict else "<="
            verdict = "pass" if e.passed else "inconclusive"
            rows.append((e.name, f"lhs={e.lhs:.6g} {op} rhs={e.rhs:.6g} margin={e.margin:.6g} {verdict}"))
        for k, v in self.empirical.items():
            rows.append((k, f"{v:.6g}"))
        rows.append(("overall", "pass" if self.passed else "inconclusive"))
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}} : {v}" for k, v in rows) + "\n"


def _points(domain) -> np.ndarray:
    if isinstance(domain, Grid2):
        return domain.nodes
    return np.asarray(domain, dtype=float).reshape(-1, 2)


def _max_distance(a: np.ndarray, b: np.ndarray, chunk: int = 2048) -> float:
    best = 0.0
    for s in range(0, len(a), chunk):
        d = a[s:s + chunk, None, :] - b[None, :, :]
        best = max(best, float(np.sqrt(np.max(np.sum(d * d, axis=-1)))))
    return best


def _min_gap(a: np.ndarray, b: np.ndarray) -> float:
    """``min |a_i - b_j|`` over two value sets."""
    b = np.sort(b)
    k = np.clip(np.searchsorted(b, a), 1, len(b) - 1) if len(b) > 1 else np.zeros(len(a), int)
    lo = np.abs(a - b[np.maximum(k - 1, 0)])
    hi = np.abs(a - b[k])
    return float(min(lo.min(), hi.min()))


def bound_constants(model: CostModel, source, target) -> BoundConstants:
    """Twist/C3 constants over the nodes of ``source`` (mapped by phi) and ``target``.

    ``source`` and ``target`` may be grids or point arrays.
    """
    x = _points(source)
    y = _points(target)
    p = model.phi(x)
    fp = model.f.eval(p)
    gy = model.g.eval(y)
    return BoundConstants(
        G=_max_distance(p, y),
        M0=_min_gap(fp, gy),
        Mf=float(np.linalg.norm(model.f.grad(p), axis=1).max()),
        Mg=float(np.linalg.norm(model.g.grad(y), axis=1).max()),
        f_sup=float(np.abs(fp).max()),
        beta=model.beta if model.mode == "single" else None,
    )


def check_twist(model: CostModel, constants: BoundConstants, alpha: float = 0.9) -> list[ConditionEntry]:
    if not 0 < alpha < 1:
        raise InvalidAlpha(f"alpha must lie in (0, 1), got {alpha}")
    k = constants
    c0 = ConditionEntry("C0 separation M0>0", 0.0, k.M0, strict=True)
    if model.mode == "single":
        return [
            c0,
            ConditionEntry("C1 twist (flat target)", k.Mf ** 2 * (k.beta + k.f_sup) + 2 * k.Mf * k.G, k.M0),
            ConditionEntry("C2 injectivity of D_y c", 0.0, k.M0, strict=True),
        ]
    G_over = k.G / k.M0 if k.M0 > 0 else np.inf
    return [
        c0,
        ConditionEntry("twist Mf+G/M0<=alpha", k.Mf + G_over, alpha),
        ConditionEntry("twist Mg+G/M0<=alpha", k.Mg + G_over, alpha),
        ConditionEntry("twist (Mf+alpha)Mg<=1-alpha", (k.Mf + alpha) * k.Mg, 1 - alpha),
        ConditionEntry("twist (Mg+alpha)Mf<=1-alpha", (k.Mg + alpha) * k.Mf, 1 - alpha),
    ]


def check_c3(model: CostModel, constants: BoundConstants, alpha1: float = 0.25,
             alpha2: float = 1.0) -> list[ConditionEntry]:
    if not (alpha1 > 0 and alpha2 > 0 and 1 - alpha1 * (2 + alpha2 ** 2 + alpha1) > 0):
        raise InvalidAlphas(f"need alpha1, alpha2 > 0 and 1 - alpha1(2 + alpha2^2 + alpha1) > 0, "
                            f"got alpha1={alpha1}, alpha2={alpha2}")
    k = constants
    if model.mode == "single":
        # min(beta - f) over the mapped nodes
        return [ConditionEntry("C3 G*Mf<min(beta-f)", k.G * k.Mf, k.M0, strict=True)]
    return [
        ConditionEntry("C3 Mf+Mg<=alpha2", k.Mf + k.Mg, alpha2),
        ConditionEntry("C3 G*Mf<=alpha1*M0", k.G * k.Mf, alpha1 * k.M0),
        ConditionEntry("C3 G*Mg<=alpha1*M0", k.G * k.Mg, alpha1 * k.M0),
    ]


def _subsample(domain, side: int = DET_SIDE) -> np.ndarray:
    if isinstance(domain, Grid2):
        ix = np.unique(np.linspace(0, domain.nx - 1, side).round().astype(int))
        iy = np.unique(np.linspace(0, domain.ny - 1, side).round().astype(int))
        return domain.nodes[(iy[:, None] * domain.nx + ix[None, :]).ravel()]
    pts = _points(domain)
    idx = np.unique(np.linspace(0, len(pts) - 1, side * side).round().astype(int))
    return pts[idx]


def empirical_det(model: CostModel, source, target, side: int = DET_SIDE) -> dict[str, float]:
    """``mixed_hessian_det`` over a ``side^2 x side^2`` subsample of node pairs."""
    x = _subsample(source, side)
    y = _subsample(target, side)
    X = np.repeat(x, len(y), axis=0)
    Y = np.tile(y, (len(x), 1))
    det = mixed_hessian_det(model, X, Y)
    return {"det_min_abs": float(np.abs(det).min()),
            "det_min": float(det.min()), "det_max": float(det.max()),
            "det_sign_constant": float(det.min() > 0 or det.max() < 0)}


def empirical_twist(model: CostModel, source, target, n: int = TWIST_SAMPLES,
                    seed: int = 0) -> dict[str, float]:
    """Smallest distance between two values of ``y -> grad_x c(x, y)`` over target nodes,
    minimised over ``n`` random source nodes."""
    x = _points(source)
    y = _points(target)
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(x), size=min(n, len(x)), replace=False)
    gap = np.inf
    collisions = 0
    for i in pick:
        grads = grad_x_cost(model, np.broadcast_to(x[i], y.shape), y)
        tree = cKDTree(grads)
        collisions += len(tree.query_pairs(TWIST_SEPARATION))
        if len(y) > 1:
            d, _ = tree.query(grads, k=2)
            gap = min(gap, float(d[:, 1].min()))
    return {"twist_min_gap": float(gap), "twist_collisions": float(collisions)}


def check_conditions(model: CostModel, source, target, alpha: float = 0.9,
                     alpha1: float = 0.25, alpha2: float = 1.0, seed: int = 0) -> ConditionReport:
    """Full report: constants, twist and C3 inequalities, empirical corroboration."""
    k = bound_constants(model, source, target)
    report = ConditionReport(k)
    report.extend(check_twist(model, k, alpha))
    report.extend(check_c3(model, k, alpha1, alpha2))
    if k.M0 > 0:
        report.empirical.update(empirical_twist(model, source, target, seed=seed))
        report.empirical.update(empirical_det(model, source, target))
    return report
