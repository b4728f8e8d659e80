import numpy as np
import pytest

from waypoint_opt.auglag import AugLagOptions, make_fused_from_parts, solve_auglag
from waypoint_opt.errors import SolverFailureError

BIG = 1e10


def test_inequality_active_at_solution():
    # min (x-2)^2 s.t. x <= 1  ->  x* = 1
    fused = make_fused_from_parts(
        lambda z: ((z[0] - 2.0) ** 2, np.array([2 * (z[0] - 2.0)])),
        None,
        lambda z: (np.array([z[0] - 1.0]), np.array([[1.0]])),
    )
    res = solve_auglag(fused, np.array([0.0]), (np.array([-BIG]), np.array([BIG])), 0, 1)
    assert res.converged
    assert abs(res.z[0] - 1.0) < 1e-5
    assert res.y_in[0] > 0  # active constraint has a positive multiplier


def test_equality_on_circle():
    # min x + y s.t. x^2 + y^2 = 1  ->  (-sqrt(0.5), -sqrt(0.5))
    fused = make_fused_from_parts(
        lambda z: (z[0] + z[1], np.array([1.0, 1.0])),
        lambda z: (np.array([z @ z - 1.0]), 2 * z[None, :]),
        None,
    )
    res = solve_auglag(fused, np.array([1.0, 0.5]), (np.full(2, -BIG), np.full(2, BIG)), 1, 0)
    assert res.converged
    assert np.allclose(res.z, [-np.sqrt(0.5), -np.sqrt(0.5)], atol=1e-5)


def test_box_bound_only_rosenbrock():
    def obj(z):
        x, y = z
        f = (1 - x) ** 2 + 100 * (y - x * x) ** 2
        g = np.array([-2 * (1 - x) - 400 * x * (y - x * x), 200 * (y - x * x)])
        return f, g

    fused = make_fused_from_parts(obj, None, None)
    res = solve_auglag(fused, np.array([-1.2, 1.0]), (np.full(2, -5.0), np.full(2, 5.0)), 0, 0,
                       AugLagOptions(inner_maxiter=500))
    assert res.converged
    assert np.allclose(res.z, [1.0, 1.0], atol=1e-4)


def test_warm_start_terminates_immediately():
    fused = make_fused_from_parts(
        lambda z: (z[0] + z[1], np.array([1.0, 1.0])),
        lambda z: (np.array([z @ z - 1.0]), 2 * z[None, :]),
        None,
    )
    bounds = (np.full(2, -BIG), np.full(2, BIG))
    first = solve_auglag(fused, np.array([1.0, 0.5]), bounds, 1, 0)
    second = solve_auglag(fused, first.z, bounds, 1, 0, y_eq0=first.y_eq, rho0=first.rho)
    assert second.converged
    assert second.n_outer <= 2
    assert np.max(np.abs(second.z - first.z)) < 1e-6


def test_nan_objective_raises():
    fused = make_fused_from_parts(
        lambda z: (float("nan"), np.array([0.0])),
        None,
        None,
    )
    with pytest.raises(SolverFailureError):
        solve_auglag(fused, np.array([0.0]), (np.array([-1.0]), np.array([1.0])), 0, 0)
