import math

import numpy as np
import pytest

from waypoint_opt.dynamics import (
    ControlInput,
    QuadParams,
    QuadState,
    RateThrustCmd,
    dynamics_deriv,
    euler_to_quat,
    f_batch,
    hover_input,
    jac_batch,
    quat_normalize,
    quat_to_euler,
    quat_to_rotmat,
    rate_loop,
    rk4_sens_batch,
    rk4_step,
)
from waypoint_opt.errors import InvalidInputError


def default_params(**kw):
    return QuadParams(**kw)


def random_state(rng, rate_scale=6.0):
    q = quat_normalize(rng.normal(size=4))
    return QuadState(rng.uniform(-3, 3, 3), rng.uniform(-6, 6, 3), q, rng.uniform(-1, 1, 3) * rate_scale)


def random_input(rng, params):
    return ControlInput(
        rng.uniform(params.thrust_min, params.thrust_max),
        rng.uniform(-params.torque_max, params.torque_max, 3),
    )


class TestDeriv:
    def test_hover_equilibrium(self):
        params = default_params()
        state = QuadState.hover([0.5, -1.0, 1.2])
        d = dynamics_deriv(state, hover_input(params), params)
        assert np.allclose(d.dp, 0) and np.allclose(d.dv, 0, atol=1e-14)
        assert np.allclose(d.dq, 0) and np.allclose(d.domega, 0)

    def test_drag_term_isolated(self):
        params = default_params(drag_diag=np.array([0.3, 0.3, 0.1]))
        state = QuadState(np.zeros(3), np.array([1.0, 0, 0]), np.array([1.0, 0, 0, 0]), np.zeros(3))
        d = dynamics_deriv(state, hover_input(params), params)
        assert np.allclose(d.dv, [-0.3, 0.0, 0.0], atol=1e-12)

    def test_body_rate_deriv_vs_scalar_oracle(self):
        # Independent componentwise expansion of the Euler rotation equations
        # for diagonal inertia: Jx wx_dot = tau_x - (Jz - Jy) wy wz, etc.
        params = default_params()
        rng = np.random.default_rng(7)
        Jx, Jy, Jz = params.inertia_diag
        for _ in range(50):
            state = random_state(rng)
            inp = random_input(rng, params)
            wx, wy, wz = state.omega
            tx, ty, tz = inp.torque
            oracle = np.array(
                [
                    (tx - (Jz - Jy) * wy * wz) / Jx,
                    (ty - (Jx - Jz) * wz * wx) / Jy,
                    (tz - (Jy - Jx) * wx * wy) / Jz,
                ]
            )
            d = dynamics_deriv(state, inp, params)
            assert np.max(np.abs(d.domega - oracle)) < 1e-10

    def test_nonfinite_rejected(self):
        params = default_params()
        state = QuadState.hover([0, 0, 0])
        state.v = np.array([np.nan, 0, 0])
        with pytest.raises(InvalidInputError):
            dynamics_deriv(state, hover_input(params), params)

    def test_deterministic_pure(self):
        params = default_params()
        rng = np.random.default_rng(3)
        state = random_state(rng)
        inp = random_input(rng, params)
        a = dynamics_deriv(state, inp, params).as_vector()
        b = dynamics_deriv(state, inp, params).as_vector()
        assert np.array_equal(a, b)


class TestJacobians:
    def test_jacobians_match_finite_differences(self):
        params = default_params()
        rng = np.random.default_rng(11)
        X = np.stack([random_state(rng).as_vector() for _ in range(5)])
        U = np.stack([random_input(rng, params).as_vector() for _ in range(5)])
        A, B = jac_batch(X, U, params)
        h = 1e-6
        for i in range(13):
            dX = np.zeros(13)
            dX[i] = h
            fd = (f_batch(X + dX, U, params) - f_batch(X - dX, U, params)) / (2 * h)
            assert np.max(np.abs(A[:, :, i] - fd)) < 1e-6
        for i in range(4):
            dU = np.zeros(4)
            dU[i] = h
            fd = (f_batch(X, U + dU, params) - f_batch(X, U - dU, params)) / (2 * h)
            assert np.max(np.abs(B[:, :, i] - fd)) < 1e-6

    def test_rk4_sensitivities_match_finite_differences(self):
        params = default_params()
        rng = np.random.default_rng(13)
        X = np.stack([random_state(rng).as_vector() for _ in range(3)])
        U = np.stack([random_input(rng, params).as_vector() for _ in range(3)])
        dt = 0.02
        from waypoint_opt.dynamics import rk4_batch

        _, A, B, dXdh = rk4_sens_batch(X, U, dt, params)
        h = 1e-6
        for i in range(13):
            dX = np.zeros(13)
            dX[i] = h
            fd = (rk4_batch(X + dX, U, dt, params) - rk4_batch(X - dX, U, dt, params)) / (2 * h)
            assert np.max(np.abs(A[:, :, i] - fd)) < 1e-6
        for i in range(4):
            dU = np.zeros(4)
            dU[i] = h
            fd = (rk4_batch(X, U + dU, dt, params) - rk4_batch(X, U - dU, dt, params)) / (2 * h)
            assert np.max(np.abs(B[:, :, i] - fd)) < 1e-6
        fd = (rk4_batch(X, U, dt + h, params) - rk4_batch(X, U, dt - h, params)) / (2 * h)
        assert np.max(np.abs(dXdh - fd)) < 1e-6


class TestRk4:
    def test_hover_fixed_point(self):
        params = default_params()
        state = QuadState.hover([1.0, 2.0, 3.0])
        nxt = rk4_step(state, hover_input(params), 0.37, params)
        assert np.max(np.abs(nxt.as_vector() - state.as_vector())) < 1e-12

    def test_free_fall_ballistic(self):
        params = default_params(drag_diag=np.zeros(3))
        state = QuadState.hover([0, 0, 10.0])
        nxt = rk4_step(state, ControlInput(0.0, np.zeros(3)), 0.1, params)
        assert abs(nxt.p[2] - (10.0 - 0.04905)) < 1e-12
        assert abs(nxt.v[2] + 0.981) < 1e-12

    def test_quaternion_norm_preserved(self):
        params = default_params()
        rng = np.random.default_rng(5)
        state = random_state(rng)
        for _ in range(200):
            state = rk4_step(state, random_input(rng, params), 0.01, params)
            assert abs(np.linalg.norm(state.q) - 1.0) < 1e-9

    def _fly(self, params, dt, substeps, schedule):
        # Integrate a fixed physical input schedule; each schedule entry is
        # held for its slot duration regardless of the integrator step.
        state = QuadState.hover([0, 0, 1.0])
        for inp in schedule:
            h = dt / substeps
            for _ in range(substeps):
                state = rk4_step(state, inp, h, params)
        return state.as_vector()

    def test_convergence_order(self):
        # Halving dt must shrink the terminal-state error by >= 12x
        # (empirical order >= 3.5) on a 1 s aggressive maneuver.
        params = default_params()
        rng = np.random.default_rng(17)
        slot = 0.1
        schedule = [
            ControlInput(
                rng.uniform(0.3 * params.thrust_max, params.thrust_max),
                rng.uniform(-0.4, 0.4, 3) * params.torque_max,
            )
            for _ in range(10)
        ]
        oracle = self._fly(params, slot, 512, schedule)
        errs = [np.linalg.norm(self._fly(params, slot, n, schedule) - oracle) for n in (1, 2, 4)]
        assert errs[0] / errs[1] >= 12.0
        assert errs[1] / errs[2] >= 12.0

    def test_energy_balance_thrust_work(self):
        # With zero drag and zero torque, d(KE + PE)/dt equals thrust power;
        # verified against a fine-step quadrature oracle over one coarse step.
        params = default_params(drag_diag=np.zeros(3))
        rng = np.random.default_rng(23)
        state = random_state(rng, rate_scale=2.0)
        inp = ControlInput(0.8 * params.thrust_max, np.zeros(3))
        m, g = params.mass, params.gravity
        J = params.inertia_diag

        def energy(s):
            return 0.5 * m * s.v @ s.v - m * g @ s.p + 0.5 * s.omega @ (J * s.omega)

        dt, n = 0.02, 400
        h = dt / n
        fine = state.copy()
        work = 0.0
        for _ in range(n):
            z0 = quat_to_rotmat(fine.q)[:, 2]
            p0 = inp.thrust * z0 @ fine.v
            nxt = rk4_step(fine, inp, h, params)
            z1 = quat_to_rotmat(nxt.q)[:, 2]
            p1 = inp.thrust * z1 @ nxt.v
            work += 0.5 * h * (p0 + p1)
            fine = nxt
        dE_fine = energy(fine) - energy(state)
        assert abs(dE_fine - work) < 1e-9 * max(1.0, abs(work))

        coarse = rk4_step(state, inp, dt, params)
        dE_coarse = energy(coarse) - energy(state)
        assert abs(dE_coarse - work) < 1e-6 * max(1.0, abs(work))


class TestEuler:
    def test_identity(self):
        e = quat_to_euler(np.array([1.0, 0, 0, 0]))
        assert e.roll == 0 and e.pitch == 0 and e.yaw == 0 and not e.gimbal_lock

    def test_yaw_90_maps_body_x_to_world_y(self):
        q = euler_to_quat(0.0, 0.0, math.pi / 2)
        R = quat_to_rotmat(q)
        assert np.allclose(R @ np.array([1.0, 0, 0]), [0, 1, 0], atol=1e-12)

    def test_round_trip_bulk(self):
        rng = np.random.default_rng(29)
        q = quat_normalize(rng.normal(size=(100_000, 4)))
        e = quat_to_euler(q)
        ok = ~e.gimbal_lock
        q2 = euler_to_quat(e.roll[ok], e.pitch[ok], e.yaw[ok])
        # Round trip recovers the quaternion up to global sign.
        err = np.minimum(
            np.max(np.abs(q2 - q[ok]), axis=1),
            np.max(np.abs(q2 + q[ok]), axis=1),
        )
        assert np.max(err) < 1e-9

    def test_gimbal_lock_flag(self):
        q = euler_to_quat(0.3, math.pi / 2, -0.2)
        e = quat_to_euler(q)
        assert e.gimbal_lock


class TestRateLoop:
    def test_zero_error_zero_torque(self):
        params = default_params()
        cmd = RateThrustCmd(np.array([1.0, -2.0, 0.5]), params.hover_thrust)
        out = rate_loop(cmd, np.array([1.0, -2.0, 0.5]), np.array([20.0, 20.0, 8.0]), params)
        assert np.allclose(out.torque, 0)

    def test_linear_formula(self):
        params = default_params(inertia_diag=np.array([1e-3, 1e-3, 1e-3]), torque_max=1.0)
        cmd = RateThrustCmd(np.array([1.0, 0, 0]), params.hover_thrust)
        out = rate_loop(cmd, np.zeros(3), np.array([20.0, 20.0, 8.0]), params)
        assert abs(out.torque[0] - 0.02) < 1e-15

    def test_saturation_clamps_exactly(self):
        params = default_params()
        cmd = RateThrustCmd(np.array([1e6, -1e6, 1e6]), 1e9)
        out = rate_loop(cmd, np.zeros(3), np.array([20.0, 20.0, 8.0]), params)
        assert np.array_equal(np.abs(out.torque), np.full(3, params.torque_max))
        assert out.thrust == params.thrust_max
