"""Quadrotor rigid-body model with linear aerodynamic drag.

Conventions used throughout the package:

* World frame is z-up; gravity is a world-frame vector, default
  ``(0, 0, -9.81)`` m/s^2.
* Quaternions are scalar-first ``(w, x, y, z)`` and rotate body -> world.
* Euler angles follow the Z-Y-X (yaw-pitch-roll) convention:
  ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.  This is also the layout used
  in dataset files, so it is part of the file-format contract.
* Control input is a collective thrust along body z plus a body torque.

State vectors are packed as ``[p(3), v(3), q(4), omega(3)]`` (13 floats).
The continuous dynamics are

    p_dot = v
    v_dot = g + R(q) e3 T / m - R(q) D R(q)^T v
    q_dot = 0.5 * q (x) (0, omega)
    w_dot = J^-1 (tau - omega x J omega)

with diagonal drag matrix D and diagonal inertia J.  The module exposes a
scalar dataclass API and a batched array API (``f_batch``, ``rk4_batch``,
``rk4_sens_batch``); the batched functions skip validation and do not
renormalize quaternions, which is what the trajectory optimizer needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InvalidInputError

# Slices into the packed 13-dim state vector.
SP = slice(0, 3)
SV = slice(3, 6)
SQ = slice(6, 10)
SW = slice(10, 13)
STATE_DIM = 13
INPUT_DIM = 4

GIMBAL_LOCK_MARGIN = 1e-6


@dataclass
class QuadParams:
    """Physical parameters of the vehicle (SI units).

    Defaults describe a sub-200 g racer with a thrust-to-weight ratio of
    about 2.2.  Inertia, drag, and torque limits are plausible config
    defaults, not measured values; experiments should sweep them.
    """

    mass: float = 0.19
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    inertia_diag: np.ndarray = field(default_factory=lambda: np.array([1.2e-4, 1.2e-4, 2.0e-4]))
    drag_diag: np.ndarray = field(default_factory=lambda: np.array([0.3, 0.3, 0.15]))
    thrust_max: float = 0.19 * 9.81 * 2.2
    thrust_min: float = 0.0
    omega_max: float = 10.0
    torque_max: float = 0.05

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=float)
        self.inertia_diag = np.asarray(self.inertia_diag, dtype=float)
        self.drag_diag = np.asarray(self.drag_diag, dtype=float)
        if self.mass <= 0:
            raise InvalidInputError("mass must be positive")
        if np.any(self.inertia_diag <= 0):
            raise InvalidInputError("inertia_diag components must be positive")
        if not 0 <= self.thrust_min < self.thrust_max:
            raise InvalidInputError("need 0 <= thrust_min < thrust_max")

    @property
    def g_mag(self) -> float:
        return float(np.linalg.norm(self.gravity))

    @property
    def hover_thrust(self) -> float:
        return self.mass * self.g_mag

    def to_dict(self) -> dict:
        return {
            "mass": self.mass,
            "gravity": self.gravity.tolist(),
            "inertia_diag": self.inertia_diag.tolist(),
            "drag_diag": self.drag_diag.tolist(),
            "thrust_max": self.thrust_max,
            "thrust_min": self.thrust_min,
            "omega_max": self.omega_max,
            "torque_max": self.torque_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuadParams":
        from .errors import ConfigError

        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown quad config keys: {sorted(unknown)}")
        kwargs = dict(d)
        for key in ("gravity", "inertia_diag", "drag_diag"):
            if key in kwargs:
                kwargs[key] = np.asarray(kwargs[key], dtype=float)
        return cls(**kwargs)


@dataclass
class QuadState:
    """Full rigid-body state: world position/velocity, attitude, body rates."""

    p: np.ndarray
    v: np.ndarray
    q: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        self.omega = np.asarray(self.omega, dtype=float)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.v, self.q, self.omega])

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "QuadState":
        x = np.asarray(x, dtype=float)
        return cls(x[SP].copy(), x[SV].copy(), x[SQ].copy(), x[SW].copy())

    @classmethod
    def hover(cls, p, yaw: float = 0.0) -> "QuadState":
        return cls(np.asarray(p, dtype=float), np.zeros(3), euler_to_quat(0.0, 0.0, yaw), np.zeros(3))

    def copy(self) -> "QuadState":
        return QuadState(self.p.copy(), self.v.copy(), self.q.copy(), self.omega.copy())


@dataclass
class StateDeriv:
    dp: np.ndarray
    dv: np.ndarray
    dq: np.ndarray
    domega: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.dp, self.dv, self.dq, self.domega])


@dataclass
class ControlInput:
    """Collective thrust [N] along body z and body torque [N m]."""

    thrust: float
    torque: np.ndarray

    def __post_init__(self):
        self.torque = np.asarray(self.torque, dtype=float)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.thrust], self.torque])


@dataclass
class RateThrustCmd:
    """Body-rate and collective-thrust command for the inner rate loop."""

    omega_cmd: np.ndarray
    thrust_cmd: float

    def __post_init__(self):
        self.omega_cmd = np.asarray(self.omega_cmd, dtype=float)


class EulerAngles(NamedTuple):
    roll: float
    pitch: float
    yaw: float
    gimbal_lock: bool = False


# ---------------------------------------------------------------------------
# Quaternion helpers
# ---------------------------------------------------------------------------

def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix (body -> world) for scalar-first quaternion(s).

    Accepts shape (4,) or (..., 4); returns (3, 3) or (..., 3, 3).
    Uses the unit-quaternion formula; callers keep q normalized.
    """
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a (x) b, scalar-first."""
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    out = np.array(q, dtype=float, copy=True)
    out[..., 1:] *= -1.0
    return out


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise InvalidInputError("cannot normalize near-zero quaternion")
    return q / n


def euler_to_quat(roll, pitch, yaw) -> np.ndarray:
    """Z-Y-X Euler angles [rad] to scalar-first quaternion (vectorized)."""
    roll, pitch, yaw = np.asarray(roll, float), np.asarray(pitch, float), np.asarray(yaw, float)
    cr, sr = np.cos(roll / 2), np.sin(roll / 2)
    cp, sp = np.cos(pitch / 2), np.sin(pitch / 2)
    cy, sy = np.cos(yaw / 2), np.sin(yaw / 2)
    return np.stack(
        [
            cr * cp * cy + sr * sp * sy,
            sr * cp * cy - cr * sp * sy,
            cr * sp * cy + sr * cp * sy,
            cr * cp * sy - sr * sp * cy,
        ],
        axis=-1,
    )


def quat_to_euler(q: np.ndarray) -> EulerAngles:
    """Quaternion to Z-Y-X Euler angles (vectorized over leading axes).

    ``gimbal_lock`` is set when |pitch| is within 1e-6 rad of pi/2; the
    returned roll/yaw are then still usable but not unique.
    """
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    roll = np.arctan2(2 * (w * x + y * z), 1 - 2 * (x * x + y * y))
    sinp = np.clip(2 * (w * y - z * x), -1.0, 1.0)
    pitch = np.arcsin(sinp)
    yaw = np.arctan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))
    lock = (np.pi / 2 - np.abs(pitch)) <= GIMBAL_LOCK_MARGIN
    if q.ndim == 1:
        return EulerAngles(float(roll), float(pitch), float(yaw), bool(lock))
    return EulerAngles(roll, pitch, yaw, lock)


def quat_yaw(q: np.ndarray) -> np.ndarray:
    """Yaw component only (vectorized); cheaper than the full conversion."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.arctan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    out = np.arctan2(np.sin(a), np.cos(a))
    # arctan2 maps pi to pi but -pi to -pi; fold -pi onto +pi.
    out = np.where(out <= -np.pi + 0.0, np.pi, out)
    if out.ndim == 0:
        return float(out)
    return out


# ---------------------------------------------------------------------------
# Batched dynamics and sensitivities
# ---------------------------------------------------------------------------

def f_batch(X: np.ndarray, U: np.ndarray, params: QuadParams) -> np.ndarray:
    """Continuous dynamics for packed states X (..., 13) and inputs U (..., 4)."""
    v = X[..., SV]
    q = X[..., SQ]
    om = X[..., SW]
    T = U[..., 0]
    tau = U[..., 1:4]

    R = quat_to_rotmat(q)
    Rt_v = (R * v[..., :, None]).sum(axis=-2)
    drag = (R * (params.drag_diag * Rt_v)[..., None, :]).sum(axis=-1)
    dv = params.gravity + (T[..., None] / params.mass) * R[..., :, 2] - drag

    w_, x_, y_, z_ = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    wx, wy, wz = om[..., 0], om[..., 1], om[..., 2]

    J = params.inertia_diag
    Jw0, Jw1, Jw2 = J[0] * wx, J[1] * wy, J[2] * wz

    out = np.empty_like(X)
    out[..., SP] = v
    out[..., SV] = dv
    out[..., 6] = 0.5 * (-x_ * wx - y_ * wy - z_ * wz)
    out[..., 7] = 0.5 * (w_ * wx + y_ * wz - z_ * wy)
    out[..., 8] = 0.5 * (w_ * wy - x_ * wz + z_ * wx)
    out[..., 9] = 0.5 * (w_ * wz + x_ * wy - y_ * wx)
    out[..., 10] = (tau[..., 0] - (wy * Jw2 - wz * Jw1)) / J[0]
    out[..., 11] = (tau[..., 1] - (wz * Jw0 - wx * Jw2)) / J[1]
    out[..., 12] = (tau[..., 2] - (wx * Jw1 - wy * Jw0)) / J[2]
    return out


def _drot_stack(q: np.ndarray) -> np.ndarray:
    """dR/dq_i for i in (w, x, y, z); returns (..., 4, 3, 3)."""
    w, x, y, z = 2 * q[..., 0], 2 * q[..., 1], 2 * q[..., 2], 2 * q[..., 3]
    dR = np.zeros(q.shape[:-1] + (4, 3, 3))

    dR[..., 0, 0, 1] = -z
    dR[..., 0, 0, 2] = y
    dR[..., 0, 1, 0] = z
    dR[..., 0, 1, 2] = -x
    dR[..., 0, 2, 0] = -y
    dR[..., 0, 2, 1] = x

    dR[..., 1, 0, 1] = y
    dR[..., 1, 0, 2] = z
    dR[..., 1, 1, 0] = y
    dR[..., 1, 1, 1] = -2 * x
    dR[..., 1, 1, 2] = -w
    dR[..., 1, 2, 0] = z
    dR[..., 1, 2, 1] = w
    dR[..., 1, 2, 2] = -2 * x

    dR[..., 2, 0, 0] = -2 * y
    dR[..., 2, 0, 1] = x
    dR[..., 2, 0, 2] = w
    dR[..., 2, 1, 0] = x
    dR[..., 2, 1, 2] = z
    dR[..., 2, 2, 0] = -w
    dR[..., 2, 2, 1] = z
    dR[..., 2, 2, 2] = -2 * y

    dR[..., 3, 0, 0] = -2 * z
    dR[..., 3, 0, 1] = -w
    dR[..., 3, 0, 2] = x
    dR[..., 3, 1, 0] = w
    dR[..., 3, 1, 1] = -2 * z
    dR[..., 3, 1, 2] = y
    dR[..., 3, 2, 0] = x
    dR[..., 3, 2, 1] = y
    return dR


def f_jac_batch(X: np.ndarray, U: np.ndarray, params: QuadParams):
    """Dynamics value and Jacobians in one pass (shares R and dR/dq).

    Returns ``(f, A, B)`` with shapes (..., 13), (..., 13, 13), (..., 13, 4).
    """
    v = X[..., SV]
    q = X[..., SQ]
    om = X[..., SW]
    T = U[..., 0]
    tau = U[..., 1:4]

    R = quat_to_rotmat(q)
    dR = _drot_stack(q)
    D = params.drag_diag
    J = params.inertia_diag
    w_, x_, y_, z_ = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    wx, wy, wz = om[..., 0], om[..., 1], om[..., 2]
    Jw0, Jw1, Jw2 = J[0] * wx, J[1] * wy, J[2] * wz

    Rt_v = (R * v[..., :, None]).sum(axis=-2)
    Dw = D * Rt_v
    drag = (R * Dw[..., None, :]).sum(axis=-1)

    f = np.empty_like(X)
    f[..., SP] = v
    f[..., SV] = params.gravity + (T[..., None] / params.mass) * R[..., :, 2] - drag
    f[..., 6] = 0.5 * (-x_ * wx - y_ * wy - z_ * wz)
    f[..., 7] = 0.5 * (w_ * wx + y_ * wz - z_ * wy)
    f[..., 8] = 0.5 * (w_ * wy - x_ * wz + z_ * wx)
    f[..., 9] = 0.5 * (w_ * wz + x_ * wy - y_ * wx)
    f[..., 10] = (tau[..., 0] - (wy * Jw2 - wz * Jw1)) / J[0]
    f[..., 11] = (tau[..., 1] - (wz * Jw0 - wx * Jw2)) / J[1]
    f[..., 12] = (tau[..., 2] - (wx * Jw1 - wy * Jw0)) / J[2]

    A = np.zeros(X.shape[:-1] + (13, 13))
    B = np.zeros(X.shape[:-1] + (13, 4))

    # dp/dv
    A[..., 0, 3] = 1.0
    A[..., 1, 4] = 1.0
    A[..., 2, 5] = 1.0

    # dv/dv = -R D R^T
    A[..., SV, SV] = -(R * D) @ np.swapaxes(R, -1, -2)

    # dv/dq: (T/m) dR_i e3 - dR_i D R^T v - R D dR_i^T v
    term1 = (T[..., None, None] / params.mass) * dR[..., :, :, 2]
    term2 = (dR @ Dw[..., None, :, None])[..., 0]
    dRt_v = (np.swapaxes(dR, -1, -2) @ v[..., None, :, None])[..., 0]
    term3 = (R[..., None, :, :] @ (D * dRt_v)[..., None])[..., 0]
    A[..., SV, SQ] = np.moveaxis(term1 - term2 - term3, -2, -1)

    # dq/dq = 0.5 * Omega(omega)
    A[..., 6, 7] = -0.5 * wx
    A[..., 6, 8] = -0.5 * wy
    A[..., 6, 9] = -0.5 * wz
    A[..., 7, 6] = 0.5 * wx
    A[..., 7, 8] = 0.5 * wz
    A[..., 7, 9] = -0.5 * wy
    A[..., 8, 6] = 0.5 * wy
    A[..., 8, 7] = -0.5 * wz
    A[..., 8, 9] = 0.5 * wx
    A[..., 9, 6] = 0.5 * wz
    A[..., 9, 7] = 0.5 * wy
    A[..., 9, 8] = -0.5 * wx

    # dq/domega = 0.5 * Xi(q)
    A[..., 6, 10] = -0.5 * x_
    A[..., 6, 11] = -0.5 * y_
    A[..., 6, 12] = -0.5 * z_
    A[..., 7, 10] = 0.5 * w_
    A[..., 7, 11] = -0.5 * z_
    A[..., 7, 12] = 0.5 * y_
    A[..., 8, 10] = 0.5 * z_
    A[..., 8, 11] = 0.5 * w_
    A[..., 8, 12] = -0.5 * x_
    A[..., 9, 10] = -0.5 * y_
    A[..., 9, 11] = 0.5 * x_
    A[..., 9, 12] = 0.5 * w_

    # domega/domega, from w_dot_x = (tau_x - (J2 - J1) wy wz) / J0 etc.
    A[..., 10, 11] = (J[1] - J[2]) * wz / J[0]
    A[..., 10, 12] = (J[1] - J[2]) * wy / J[0]
    A[..., 11, 10] = (J[2] - J[0]) * wz / J[1]
    A[..., 11, 12] = (J[2] - J[0]) * wx / J[1]
    A[..., 12, 10] = (J[0] - J[1]) * wy / J[2]
    A[..., 12, 11] = (J[0] - J[1]) * wx / J[2]

    # inputs
    B[..., SV, 0] = R[..., :, 2] / params.mass
    B[..., 10, 1] = 1.0 / J[0]
    B[..., 11, 2] = 1.0 / J[1]
    B[..., 12, 3] = 1.0 / J[2]
    return f, A, B


def jac_batch(X: np.ndarray, U: np.ndarray, params: QuadParams):
    """Jacobians of f_batch: (A, B) with shapes (..., 13, 13) and (..., 13, 4)."""
    _, A, B = f_jac_batch(X, U, params)
    return A, B


def rk4_batch(X: np.ndarray, U: np.ndarray, h: float, params: QuadParams) -> np.ndarray:
    """One classic RK4 step, input held constant; no quaternion renorm."""
    k1 = f_batch(X, U, params)
    k2 = f_batch(X + 0.5 * h * k1, U, params)
    k3 = f_batch(X + 0.5 * h * k2, U, params)
    k4 = f_batch(X + h * k3, U, params)
    return X + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def rk4_sens_batch(X: np.ndarray, U: np.ndarray, h: float, params: QuadParams):
    """RK4 step with sensitivities.

    Returns ``(X_next, A, B, dX_dh)`` where A = dX_next/dX (..., 13, 13),
    B = dX_next/dU (..., 13, 4), and dX_dh = dX_next/dh (..., 13).
    """
    eye = np.eye(STATE_DIM)

    k1, J1, G1 = f_jac_batch(X, U, params)
    x2 = X + 0.5 * h * k1
    k2, J2, G2 = f_jac_batch(x2, U, params)
    x3 = X + 0.5 * h * k2
    k3, J3, G3 = f_jac_batch(x3, U, params)
    x4 = X + h * k3
    k4, J4, G4 = f_jac_batch(x4, U, params)

    K1 = J1
    K2 = J2 @ (eye + 0.5 * h * K1)
    K3 = J3 @ (eye + 0.5 * h * K2)
    K4 = J4 @ (eye + h * K3)
    A = eye + (h / 6.0) * (K1 + 2 * K2 + 2 * K3 + K4)

    B1 = G1
    B2 = G2 + 0.5 * h * (J2 @ B1)
    B3 = G3 + 0.5 * h * (J3 @ B2)
    B4 = G4 + h * (J4 @ B3)
    B = (h / 6.0) * (B1 + 2 * B2 + 2 * B3 + B4)

    dk1 = np.zeros_like(k1)
    dk2 = np.einsum("...ij,...j->...i", J2, 0.5 * k1)
    dk3 = np.einsum("...ij,...j->...i", J3, 0.5 * k2 + 0.5 * h * dk2)
    dk4 = np.einsum("...ij,...j->...i", J4, k3 + h * dk3)
    dX_dh = (k1 + 2 * k2 + 2 * k3 + k4) / 6.0 + (h / 6.0) * (dk1 + 2 * dk2 + 2 * dk3 + dk4)

    X_next = X + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return X_next, A, B, dX_dh


# ---------------------------------------------------------------------------
# Scalar (dataclass) API
# ---------------------------------------------------------------------------

def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise InvalidInputError("non-finite value in dynamics argument")


def dynamics_deriv(state: QuadState, inp: ControlInput, params: QuadParams) -> StateDeriv:
    """Continuous-time state derivative; validates finiteness of all fields."""
    _check_finite(state.p, state.v, state.q, state.omega, inp.thrust, inp.torque)
    d = f_batch(state.as_vector(), inp.as_vector(), params)
    return StateDeriv(d[SP], d[SV], d[SQ], d[SW])


def rk4_step(state: QuadState, inp: ControlInput, dt: float, params: QuadParams) -> QuadState:
    """Classic RK4 step with the input held constant; renormalizes q."""
    if not dt > 0:
        raise InvalidInputError("dt must be positive")
    _check_finite(state.p, state.v, state.q, state.omega, inp.thrust, inp.torque)
    x = rk4_batch(state.as_vector(), inp.as_vector(), dt, params)
    x[SQ] = x[SQ] / np.linalg.norm(x[SQ])
    return QuadState.from_vector(x)


def rate_loop(cmd: RateThrustCmd, omega: np.ndarray, gains: np.ndarray, params: QuadParams) -> ControlInput:
    """Proportional body-rate loop: tau = J * K * (omega_cmd - omega), clamped."""
    gains = np.asarray(gains, dtype=float)
    if np.any(gains <= 0):
        raise InvalidInputError("rate-loop gains must be positive")
    torque = params.inertia_diag * gains * (cmd.omega_cmd - np.asarray(omega, float))
    torque = np.clip(torque, -params.torque_max, params.torque_max)
    thrust = float(np.clip(cmd.thrust_cmd, params.thrust_min, params.thrust_max))
    return ControlInput(thrust, torque)


def hover_input(params: QuadParams) -> ControlInput:
    return ControlInput(params.hover_thrust, np.zeros(3))
