import numpy as np
import pytest

from metalens_ot.cost import CostMatrix, CostModel, cost_matrix, grad_x_cost
from metalens_ot.errors import DiffuseRow, NotConverged, SizeExceeded
from metalens_ot.geometry import Grid2, Surface, build_measure
from metalens_ot.transport import (
    c_transform,
    epsilon_schedule,
    extract_map,
    potential_gradient,
    solve_exact,
    solve_sinkhorn,
    tighten,
)
from oracles import brute_force_assignment

FLAT1 = CostModel.single(Surface.constant(0.0), 1.0, 1.0, 1.5)


def uniform(n):
    return np.full(n, 1.0 / n)


def grid_instance(nx, target=(0.0, 1.0), model=FLAT1):
    g0 = Grid2(nx, nx, 0, 1, 0, 1)
    g1 = Grid2(nx, nx, target[0], target[1], 0, 1)
    mu = build_measure(g0, lambda x: np.ones(len(x)))
    nu = build_measure(g1, lambda x: np.ones(len(x)))
    return cost_matrix(model, mu.points, nu.points), mu, nu


def test_two_point_identity():
    pts = np.array([[0.0, 0.0], [1.0, 0.0]])
    C = cost_matrix(FLAT1, pts, pts)
    sol = solve_exact(C, uniform(2), uniform(2))
    assert list(sol.map) == [0, 1]
    assert sol.total_cost == pytest.approx(1.0, abs=1e-15)


def test_one_by_one():
    C = cost_matrix(FLAT1, [[0.2, 0.3]], [[0.5, 0.1]])
    sol = solve_exact(C, [1.0], [1.0])
    np.testing.assert_array_equal(sol.plan, [[1.0]])
    assert sol.total_cost == C.entries[0, 0]


def test_three_points_monotone():
    x = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    C = cost_matrix(FLAT1, x, x + [0.7, 0.0])
    sol = solve_exact(C, uniform(3), uniform(3))
    perm, _ = brute_force_assignment(C.entries)
    assert list(sol.map) == [0, 1, 2] == list(perm)


def test_matches_brute_force(rng):
    model = CostModel.double(Surface.paraboloid(0.2, 0.0, zmax=0.5), Surface.plane(2.0, (0.1, 0.0), zmax=3.0),
                             1.0, 1.5, 1.0)
    for _ in range(20):
        n = rng.integers(2, 7)
        C = cost_matrix(model, rng.uniform(0, 1, (n, 2)), rng.uniform(0, 1, (n, 2)))
        sol = solve_exact(C, uniform(n), uniform(n))
        perm, cost = brute_force_assignment(C.entries)
        np.testing.assert_array_equal(sol.map, perm)
        assert abs(sol.total_cost - cost) < 1e-9
        assert not sol.diffuse.any()


def test_exact_cap():
    C = CostMatrix(np.ones((65, 2)), np.zeros((65, 2)), np.zeros((2, 2)))
    with pytest.raises(SizeExceeded):
        solve_exact(C, uniform(65), uniform(2))


def test_exact_duality_and_c_concavity():
    C, mu, nu = grid_instance(6, (0.3, 1.3))
    sol = solve_exact(C, mu.masses, nu.masses)
    assert abs(sol.duality_gap) <= 1e-9
    np.testing.assert_array_equal(sol.potential_psi, np.min(C.entries - sol.potential_psi_c[None, :], axis=1))
    slack = C.entries - sol.potential_psi[:, None] - sol.potential_psi_c[None, :]
    assert slack.min() >= -1e-12
    assert np.abs(slack[sol.plan > 0]).max() < 1e-9


def test_permutation_equivariance(rng):
    C, mu, nu = grid_instance(4, (0.2, 1.2))
    pr, pc = rng.permutation(16), rng.permutation(16)
    a = solve_exact(C, mu.masses, nu.masses)
    Cp = CostMatrix(C.entries[pr][:, pc], C.row_points[pr], C.col_points[pc])
    b = solve_exact(Cp, mu.masses[pr], nu.masses[pc])
    assert b.total_cost == pytest.approx(a.total_cost, abs=1e-12)
    np.testing.assert_allclose(b.plan, a.plan[pr][:, pc], atol=1e-12)


def test_collinear_map_never_crosses(rng):
    x = np.c_[np.sort(rng.uniform(0, 3, 12)), np.zeros(12)]
    y = np.c_[np.sort(rng.uniform(1, 4, 12)), np.zeros(12)]
    sol = solve_exact(cost_matrix(FLAT1, x, y), uniform(12), uniform(12))
    assert np.all(np.diff(sol.map) > 0)


def test_sinkhorn_two_by_two():
    pts = np.array([[0.0, 0.0], [1.0, 0.0]])
    C = cost_matrix(FLAT1, pts, pts)
    ex = solve_exact(C, uniform(2), uniform(2))
    sk = solve_sinkhorn(C, uniform(2), uniform(2))
    np.testing.assert_array_equal(sk.map, ex.map)
    assert abs(sk.total_cost / ex.total_cost - 1) < 0.01


def test_sinkhorn_large_epsilon_is_diffuse():
    pts = np.array([[0.0, 0.0], [0.1, 0.0]])
    C = cost_matrix(FLAT1, pts, pts)
    sk = solve_sinkhorn(C, uniform(2), uniform(2), epsilon=10 * C.entries.mean())
    assert sk.diffuse.all()


def test_sinkhorn_identity_map():
    C, mu, nu = grid_instance(5)
    sk = solve_sinkhorn(C, mu.masses, nu.masses)
    np.testing.assert_array_equal(sk.map, np.arange(25))


@pytest.mark.parametrize("target", [(0.0, 1.0), (0.5, 1.5)])
def test_sinkhorn_close_to_exact_8x8(target):
    C, mu, nu = grid_instance(8, target)
    ex = solve_exact(C, mu.masses, nu.masses)
    sk = solve_sinkhorn(C, mu.masses, nu.masses)
    assert abs(sk.total_cost / ex.total_cost - 1) < 0.01
    assert sk.marginal_error <= 1e-6
    assert sk.diffuse_fraction <= 0.05
    assert sk.duality_gap <= 5 * sk.epsilon * np.log(C.entries.size)
    np.testing.assert_array_equal(sk.potential_psi, np.min(C.entries - sk.potential_psi_c[None, :], axis=1))


def test_sinkhorn_pushforward_matches_target():
    C, mu, nu = grid_instance(8, (1.0, 2.0))
    sk = solve_sinkhorn(C, mu.masses, nu.masses)
    push = np.bincount(sk.map, weights=mu.masses, minlength=len(nu.masses))
    assert 0.5 * np.abs(push - nu.masses).sum() <= 1e-6 + sk.diffuse_fraction


def test_sinkhorn_not_converged():
    C, mu, nu = grid_instance(6, (0.5, 1.5))
    with pytest.raises(NotConverged) as info:
        solve_sinkhorn(C, mu.masses, nu.masses, max_iter=3, marginal_tol=1e-14)
    assert info.value.marginal_error > 0


def test_epsilon_schedule_halves():
    s = epsilon_schedule(1.0, 1e-3)
    assert s[0] == 0.1 and s[-1] == 1e-3
    assert all(b == a / 2 for a, b in zip(s[:-2], s[1:-1]))


def test_extract_map_ties_and_threshold():
    idx, diffuse = extract_map(np.array([[0.25, 0.25], [0.05, 0.45]]))
    assert list(idx) == [0, 1]
    assert list(diffuse) == [True, False]


def test_tighten_is_idempotent(rng):
    C = rng.uniform(1, 2, (5, 7))
    psi, psi_c = tighten(C, rng.normal(size=5))
    psi2, psi_c2 = tighten(C, psi)
    np.testing.assert_array_equal(psi, psi2)
    np.testing.assert_array_equal(psi_c, c_transform(C, psi))


def test_potential_gradient_examples():
    pts = np.array([[0.0, 0.0], [1.0, 0.0]])
    sol = solve_exact(cost_matrix(FLAT1, pts, pts), uniform(2), uniform(2))
    np.testing.assert_allclose(potential_gradient(FLAT1, sol, 0), [0, 0], atol=1e-15)
    sol = solve_exact(cost_matrix(FLAT1, pts, pts + [1.0, 0.0]), uniform(2), uniform(2))
    np.testing.assert_allclose(potential_gradient(FLAT1, sol, 0), [-1 / np.sqrt(2), 0], atol=1e-15)


def test_potential_gradient_diffuse_row():
    pts = np.array([[0.0, 0.0], [0.1, 0.0]])
    C = cost_matrix(FLAT1, pts, pts)
    sk = solve_sinkhorn(C, uniform(2), uniform(2), epsilon=10 * C.entries.mean())
    with pytest.raises(DiffuseRow):
        potential_gradient(FLAT1, sk, 0)


def test_potential_gradient_matches_discrete_potential():
    n = 32
    C, mu, nu = grid_instance(n, (1.0, 2.0))
    sol = solve_exact(C, mu.masses, nu.masses, cap=n * n)
    psi = sol.potential_psi.reshape(n, n)
    h = 1.0 / (n - 1)
    fd_x = (psi[1:-1, 2:] - psi[1:-1, :-2]) / (2 * h)
    fd_y = (psi[2:, 1:-1] - psi[:-2, 1:-1]) / (2 * h)
    inner = np.arange(n * n).reshape(n, n)[1:-1, 1:-1].ravel()
    grads = np.array([potential_gradient(FLAT1, sol, i) for i in inner])
    fd = np.stack([fd_x.ravel(), fd_y.ravel()], axis=1)
    rel = np.linalg.norm(grads - fd, axis=1) / np.linalg.norm(grads, axis=1)
    assert rel.max() < 0.05
    np.testing.assert_allclose(grads, grad_x_cost(FLAT1, C.row_points[inner], C.col_points[sol.map[inner]]))
