"""Discrete Kantorovich solvers for the metalens cost.

``solve_exact`` runs network simplex on the transportation polytope and
serves as the correctness oracle for small instances; ``solve_sinkhorn``
is a log-domain entropic solver with epsilon scaling for design grids.
Both return c-concave potentials obtained by a double c-transform of the
raw duals.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

for _key in ("TENSORFLOW", "PYTORCH", "JAX", "CUPY"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_key}", "1")
import ot  # noqa: E402

from .cost import CostMatrix, CostModel, grad_x_cost
from .errors import DiffuseRow, NotConverged, SizeExceeded

log = logging.getLogger(__name__)

EXACT_CAP = 64
CONCENTRATION = 0.9
RELAXATION = 1.8


@dataclass
class TransportSolution:
    plan: np.ndarray
    map: np.ndarray
    diffuse: np.ndarray
    potential_psi: np.ndarray
    potential_psi_c: np.ndarray
    total_cost: float
    cost: CostMatrix
    mu: np.ndarray
    nu: np.ndarray
    epsilon: float | None = None
    iterations: int = 0
    marginal_error: float = 0.0

    @property
    def diffuse_fraction(self) -> float:
        """Source mass carried by rows that are not concentrated on one column."""
        return float(self.mu[self.diffuse].sum())

    @property
    def dual_value(self) -> float:
        return float(self.mu @ self.potential_psi + self.nu @ self.potential_psi_c)

    @property
    def duality_gap(self) -> float:
        return self.total_cost - self.dual_value

    def targets(self) -> np.ndarray:
        """Target point of each row under the extracted map."""
        return self.cost.col_points[self.map]

    def barycentric_targets(self) -> np.ndarray:
        """Plan-weighted mean target of each row."""
        P = self.plan
        return (P @ self.cost.col_points) / P.sum(axis=1, keepdims=True)


def c_transform(C: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """``psi^c(y_j) = min_i (C_ij - psi_i)``."""
    return np.min(C - psi[:, None], axis=0)


def tighten(C: np.ndarray, psi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Double c-transform; the result satisfies ``psi_i = min_j (C_ij - psi^c_j)``."""
    psi_c = c_transform(C, psi)
    psi = np.min(C - psi_c[None, :], axis=1)
    return psi, psi_c


def extract_map(plan: np.ndarray, threshold: float = CONCENTRATION):
    """Row-wise argmax column and the rows whose argmax holds < ``threshold`` of the row mass.

    Ties resolve to the lowest column index.
    """
    plan = np.asarray(plan)
    idx = np.argmax(plan, axis=1)
    top = plan[np.arange(len(plan)), idx]
    diffuse = top < threshold * plan.sum(axis=1)
    return idx, diffuse


def _check_masses(cost: CostMatrix, mu, nu):
    mu = np.asarray(mu, dtype=float).ravel()
    nu = np.asarray(nu, dtype=float).ravel()
    m, n = cost.shape
    if mu.shape != (m,) or nu.shape != (n,):
        raise ValueError(f"masses of shape {mu.shape}/{nu.shape} do not fit cost {cost.shape}")
    if abs(mu.sum() - 1) > 1e-9 or abs(nu.sum() - 1) > 1e-9:
        raise ValueError("source and target masses must each sum to 1")
    return mu, nu


def solve_exact(cost: CostMatrix, mu, nu, cap: int = EXACT_CAP) -> TransportSolution:
    """Optimal vertex coupling by network simplex."""
    mu, nu = _check_masses(cost, mu, nu)
    m, n = cost.shape
    if m > cap or n > cap:
        raise SizeExceeded(f"exact solver is capped at {cap} points per side, got {m}x{n}")
    C = np.ascontiguousarray(cost.entries, dtype=float)
    plan, info = ot.emd(mu, nu, C, numItermax=max(100_000, 50 * m * n), log=True)
    if info["result_code"] != 1:
        raise RuntimeError(f"network simplex failed: {info['warning']}")
    psi, psi_c = tighten(C, np.asarray(info["u"], dtype=float))
    idx, diffuse = extract_map(plan)
    return TransportSolution(
        plan=plan, map=idx, diffuse=diffuse, potential_psi=psi, potential_psi_c=psi_c,
        total_cost=float(np.sum(plan * C)), cost=cost, mu=mu, nu=nu,
        marginal_error=float(np.abs(plan.sum(1) - mu).sum() + np.abs(plan.sum(0) - nu).sum()),
    )


def _softmin(A: np.ndarray, axis: int) -> np.ndarray:
    """``-log sum exp(A)`` along ``axis``, stabilised."""
    M = A.max(axis=axis, keepdims=True)
    return -(np.log(np.exp(A - M).sum(axis=axis)) + np.squeeze(M, axis=axis))


def _marginal_error(C, f, g, eps, log_mu, log_nu, mu, nu) -> float:
    A = (f[:, None] + g[None, :] - C) / eps
    rows = np.exp(-_softmin(A + log_nu[None, :], axis=1) + log_mu)
    cols = np.exp(-_softmin(A + log_mu[:, None], axis=0) + log_nu)
    return float(np.abs(rows - mu).sum() + np.abs(cols - nu).sum())


def epsilon_schedule(mean_cost: float, target: float) -> list[float]:
    eps = 0.1 * mean_cost
    out = []
    while eps > target:
        out.append(eps)
        eps *= 0.5
    out.append(target)
    return out


def solve_sinkhorn(cost: CostMatrix, mu, nu, epsilon: float | None = None,
                   max_iter: int = 10_000, marginal_tol: float = 1e-6,
                   check_every: int = 10, relaxation: float = RELAXATION) -> TransportSolution:
    """Log-domain Sinkhorn with epsilon halving from ``0.1 * mean(cost)``.

    The default target is ``1e-3 * mean(cost)``. ``max_iter`` applies per
    epsilon level; only the final level must reach ``marginal_tol``, the
    summed L1 violation of both marginals. Each dual update is
    over-relaxed by ``relaxation`` (1 gives plain Sinkhorn), which cuts the
    iteration count at small epsilon several-fold.
    """
    if not 0 < relaxation < 2:
        raise ValueError("relaxation must lie in (0, 2)")
    mu, nu = _check_masses(cost, mu, nu)
    C = cost.entries
    mean = float(C.mean())
    if epsilon is None:
        epsilon = 1e-3 * mean
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    log_mu, log_nu = np.log(mu), np.log(nu)
    f = np.zeros(len(mu))
    g = np.zeros(len(nu))
    schedule = epsilon_schedule(mean, epsilon)
    total_iter = 0
    err = np.inf
    for level, eps in enumerate(schedule):
        final = level == len(schedule) - 1
        tol = marginal_tol if final else max(marginal_tol, 1e-3)
        err = np.inf
        w = relaxation
        for it in range(1, max_iter + 1):
            f_new = eps * _softmin((g[None, :] - C) / eps + log_nu[None, :], axis=1)
            f = f_new if w == 1 else (1 - w) * f + w * f_new
            g_new = eps * _softmin((f[:, None] - C) / eps + log_mu[:, None], axis=0)
            g = g_new if w == 1 else (1 - w) * g + w * g_new
            if it % check_every == 0 or it == max_iter:
                prev, err = err, _marginal_error(C, f, g, eps, log_mu, log_nu, mu, nu)
                if err <= tol:
                    break
                if err >= prev:
                    # over-relaxation stalled; finish the level with plain updates
                    w = 1.0
        total_iter += it
        log.debug("sinkhorn eps=%.3e iterations=%d marginal error=%.2e", eps, it, err)
        if final and err > tol:
            raise NotConverged(max_iter, err)
    eps = schedule[-1]
    plan = np.exp((f[:, None] + g[None, :] - C) / eps + log_mu[:, None] + log_nu[None, :])
    psi, psi_c = tighten(C, f)
    idx, diffuse = extract_map(plan)
    return TransportSolution(
        plan=plan, map=idx, diffuse=diffuse, potential_psi=psi, potential_psi_c=psi_c,
        total_cost=float(np.sum(plan * C)), cost=cost, mu=mu, nu=nu, epsilon=eps,
        iterations=total_iter, marginal_error=err,
    )


def potential_gradient(model: CostModel, sol: TransportSolution, x_index: int) -> np.ndarray:
    """Gradient of the c-concave potential at a source node: ``grad_x c(x, T x)``."""
    if sol.diffuse[x_index]:
        raise DiffuseRow(f"plan row {x_index} is not concentrated on a single target")
    x = sol.cost.row_points[x_index]
    return grad_x_cost(model, x, sol.cost.col_points[sol.map[x_index]])
