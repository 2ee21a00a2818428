import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metalens_ot.cost import (
    CostModel,
    cost_eval,
    cost_matrix,
    grad_x_cost,
    grad_y_cost,
    mixed_hessian_det,
    projector,
    sm_inverse,
)
from metalens_ot.errors import SingularA, SingularUpdate
from metalens_ot.geometry import Surface, incident_field
from oracles import cost_direct, fd_gradient, fd_mixed_det

FLAT = Surface.constant(0.0)


def single(f=FLAT, beta=4.0, **kw):
    return CostModel.single(f, beta, 1.0, 1.5, **kw)


def curved_double(field=None):
    f = Surface.paraboloid(0.15, 0.2, center=(0.3, 0.1), zmax=1.0)
    g = Surface.plane(2.5, (0.1, -0.05), zmax=3.0)
    return CostModel.double(f, g, 1.0, 1.5, 1.2, field=field)


def test_cost_examples():
    assert cost_eval(single(), [0, 0], [3, 0]) == pytest.approx(5.0, abs=1e-15)
    assert cost_eval(single(Surface.constant(1.0), 3.0), [0.4, 0.2], [0.4, 0.2]) == pytest.approx(2.0, abs=1e-15)
    m = single(Surface.plane(0.0, (0.1, 0.0), zmax=1.0), 2.0)
    assert cost_eval(m, [1, 0], [0, 0]) == pytest.approx(np.sqrt(1.9 ** 2 + 1), abs=1e-12)
    assert cost_eval(m, [1, 0], [0, 0]) == pytest.approx(2.147091, abs=1e-6)


def test_cost_matches_direct_oracle(rng):
    m = curved_double()
    for x, y in rng.uniform(0, 1, (20, 2, 2)):
        assert cost_eval(m, x, y) == pytest.approx(cost_direct(m.f.eval, m.g.eval, x, y), rel=1e-14)


def test_grad_examples():
    np.testing.assert_allclose(grad_x_cost(single(), [0, 0], [3, 0]), [-0.6, 0], atol=1e-15)
    np.testing.assert_allclose(grad_y_cost(single(), [0, 0], [3, 0]), [0.6, 0], atol=1e-15)
    np.testing.assert_allclose(grad_x_cost(single(), [0.3, 0.3], [0.3, 0.3]), [0, 0], atol=1e-15)
    m = single(Surface.plane(0.0, (0.1, 0.0), zmax=1.0), 2.0)
    np.testing.assert_allclose(grad_x_cost(m, [1, 0], [0, 0]), [0.377254, 0], atol=1e-6)
    md = CostModel.double(FLAT, Surface.plane(3.0, (0.0, 0.2), zmax=4.0), 1, 1, 1)
    np.testing.assert_allclose(grad_y_cost(md, [0, 0], [0, 1]), [0, 0.489170], atol=1e-6)


@pytest.mark.parametrize("mode", ["single", "double"])
def test_gradients_match_finite_differences(mode, rng):
    if mode == "single":
        m = single(Surface.paraboloid(0.2, 0.5, center=(0.5, 0.5), zmax=1.0), 3.0)
    else:
        m = curved_double()
    step = 1e-5 * np.sqrt(2)
    worst = 0.0
    for x, y in rng.uniform(0, 1, (100, 2, 2)):
        gx = grad_x_cost(m, x, y)
        gy = grad_y_cost(m, x, y)
        fx = fd_gradient(lambda z: cost_direct(m.f.eval, m.g.eval, z, y), x, step)
        fy = fd_gradient(lambda z: cost_direct(m.f.eval, m.g.eval, x, z), y, step)
        worst = max(worst, np.linalg.norm(gx - fx) / np.linalg.norm(fx), np.linalg.norm(gy - fy) / np.linalg.norm(fy))
    assert worst < 1e-5


def test_point_source_chain_rule(rng):
    field = incident_field("point-source", (0.4, 0.5, -2.0))
    m = CostModel.double(Surface.paraboloid(0.1, 0.3, center=(0.5, 0.5), zmax=0.5),
                         Surface.constant(2.0), 1.0, 1.5, 1.0, field=field)
    step = 1e-5
    for x, y in rng.uniform(0, 1, (10, 2, 2)):
        fx = fd_gradient(lambda z: float(cost_eval(m, z, y)), x, step)
        assert np.linalg.norm(grad_x_cost(m, x, y) - fx) / np.linalg.norm(fx) < 1e-5


def test_sm_inverse_examples():
    inv, det = sm_inverse([0, 0], [0, 0])
    np.testing.assert_array_equal(inv, np.eye(2))
    assert det == 1
    inv, det = sm_inverse([1, 0], [1, 0])
    np.testing.assert_allclose(inv, np.diag([0.5, 1.0]), atol=1e-16)
    assert det == 2
    inv, det = sm_inverse([1, 0], [0, 1])
    np.testing.assert_allclose(inv, [[1, -1], [0, 1]], atol=1e-16)
    assert det == 1
    with pytest.raises(SingularUpdate):
        sm_inverse([1, 0], [-1, 0])


def test_sm_inverse_random(rng):
    n = 0
    while n < 100:
        u, v = rng.normal(size=(2, 2))
        if abs(1 + v @ u) <= 0.1:
            continue
        inv, det = sm_inverse(u, v)
        A = np.eye(2) + np.outer(u, v)
        np.testing.assert_allclose(A @ inv, np.eye(2), atol=1e-12)
        assert det == pytest.approx(np.linalg.det(A), rel=1e-12)
        n += 1


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5))
def test_projector_inverts_rank_one(a, b):
    h = np.array([a, b])
    P = projector(h)
    np.testing.assert_allclose(P @ (np.eye(2) + np.outer(h, h)), np.eye(2), atol=1e-12)


def test_mixed_det_examples():
    for beta in (1.0, 2.5):
        assert mixed_hessian_det(single(beta=beta), [0.2, 0.1], [0.2, 0.1]) == pytest.approx(1 / beta ** 2, rel=1e-14)
    assert mixed_hessian_det(single(), [0, 0], [3, 0]) == pytest.approx(16 / 625, rel=1e-14)


@pytest.mark.parametrize("mode", ["single", "double"])
def test_mixed_det_matches_finite_differences(mode, rng):
    if mode == "single":
        m = single(Surface.paraboloid(0.2, 0.5, center=(0.5, 0.5), zmax=1.0), 3.0)
    else:
        m = curved_double()
    c = lambda x, y: cost_direct(m.f.eval, m.g.eval, x, y)  # noqa: E731
    for x, y in rng.uniform(0, 1, (100, 2, 2)):
        ref = fd_mixed_det(c, x, y, 1e-4)
        assert abs(mixed_hessian_det(m, x, y) - ref) / abs(ref) < 1e-4


def test_mixed_det_point_source_flat(rng):
    field = incident_field("point-source", (0.0, 0.0, -1.0))
    m = CostModel.single(Surface.constant(0.5), 3.0, 1.0, 1.5, field=field)
    for x, y in rng.uniform(0, 1, (10, 2, 2)):
        ref = fd_mixed_det(lambda a, b: float(cost_eval(m, a, b)), x, y, 1e-4)
        assert abs(mixed_hessian_det(m, x, y) - ref) / abs(ref) < 1e-4


def test_singular_a():
    m = CostModel.double(Surface.plane(0.0, (1.0, 0.0), zmax=2.0), Surface.plane(5.0, (-1.0, 0.0), zmax=6.0), 1, 1, 1)
    with pytest.raises(SingularA):
        mixed_hessian_det(m, [0.5, 0.5], [0.5, 0.5])


def test_swapped_roles(rng):
    f = Surface.paraboloid(0.1, 0.0, zmax=0.5)
    g = Surface.plane(2.0, (0.1, 0.2), zmax=3.0)
    a = CostModel.double(f, g, 1, 1, 1)
    b = CostModel.double(g, f, 1, 1, 1)
    x, y = rng.uniform(0, 1, (2, 30, 2))
    np.testing.assert_allclose(cost_eval(a, x, y), cost_eval(b, y, x), rtol=1e-15)


def test_cost_matrix_bounds(unit_grid):
    m = single(beta=2.0)
    C = cost_matrix(m, unit_grid.nodes[::7], unit_grid.nodes[::5])
    assert C.entries.min() >= 2.0
    assert C.entries.max() <= np.sqrt(4 + 2) + 1e-12


def test_single_mode_needs_constant_target():
    with pytest.raises(ValueError):
        CostModel("single", FLAT, Surface.plane(1.0, (0.1, 0.0), zmax=2.0), single().phi)
