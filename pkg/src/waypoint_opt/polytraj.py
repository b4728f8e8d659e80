"""Piecewise-quintic flat-output trajectories and the flatness map.

Shared by the transition planner (waypoint bridges, track baseline) and by
the trajectory optimizer (dynamically consistent initial guesses).  Each
segment is a quintic per axis; free junction derivatives are chosen by
minimizing the integral of squared jerk via a small KKT system, the same
construction as classic minimum-snap solvers but at jerk order.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np

from .dynamics import QuadParams
from .errors import PlanningError

_KJ = np.array([0.0, 0.0, 0.0, 6.0, 24.0, 60.0])  # d^3/dt^3 of t^i at t=... coefficients


def _deriv_row(order: int, tau: float, n: int = 6) -> np.ndarray:
    row = np.zeros(n)
    for j in range(order, n):
        row[j] = factorial(j) / factorial(j - order) * tau ** (j - order)
    return row


def _jerk_cost_block(T: float) -> np.ndarray:
    Q = np.zeros((6, 6))
    for i in range(3, 6):
        for j in range(3, 6):
            Q[i, j] = _KJ[i] * _KJ[j] * T ** (i + j - 5) / (i + j - 5)
    return Q


@dataclass
class PiecewisePoly:
    """Per-axis quintic coefficients (ascending powers) over M segments."""

    coeffs: np.ndarray      # (3, M, 6)
    durations: np.ndarray   # (M,)

    @property
    def total_time(self) -> float:
        return float(self.durations.sum())

    def _locate(self, t):
        edges = np.concatenate([[0.0], np.cumsum(self.durations)])
        t = np.clip(t, 0.0, edges[-1])
        seg = np.clip(np.searchsorted(edges, t, side="right") - 1, 0, len(self.durations) - 1)
        return seg, t - edges[seg]

    def eval(self, t):
        """Evaluate p, v, a, jerk at scalar or array times."""
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        seg, tau = self._locate(np.atleast_1d(t))
        powers = tau[:, None] ** np.arange(6)[None, :]
        c = self.coeffs[:, seg, :]                        # (3, S, 6)
        p = np.einsum("dsj,sj->sd", c, powers)
        dv = np.arange(6) * np.concatenate([np.zeros((len(tau), 1)), powers[:, :-1]], axis=1)
        v = np.einsum("dsj,sj->sd", c, dv)
        da = np.zeros_like(powers)
        for j in range(2, 6):
            da[:, j] = j * (j - 1) * tau ** (j - 2)
        a = np.einsum("dsj,sj->sd", c, da)
        dj = np.zeros_like(powers)
        for j in range(3, 6):
            dj[:, j] = j * (j - 1) * (j - 2) * tau ** (j - 3)
        jrk = np.einsum("dsj,sj->sd", c, dj)
        if scalar:
            return p[0], v[0], a[0], jrk[0]
        return p, v, a, jrk


def min_jerk_spline(
    points: np.ndarray,
    durations: np.ndarray,
    v_start=(0.0, 0.0, 0.0),
    a_start=(0.0, 0.0, 0.0),
    v_end=(0.0, 0.0, 0.0),
    a_end=(0.0, 0.0, 0.0),
) -> PiecewisePoly:
    """Quintic spline through ``points`` with min-jerk free junctions.

    Boundary velocity/acceleration are pinned at both ends; interior
    waypoint positions are hit exactly and junction v/a continuity is
    enforced, with the remaining freedom spent minimizing integral jerk^2.
    """
    points = np.asarray(points, dtype=float)
    durations = np.asarray(durations, dtype=float)
    M = len(durations)
    if points.shape[0] != M + 1:
        raise PlanningError("need len(points) == len(durations) + 1")
    if np.any(durations < 1e-4):
        raise PlanningError("degenerate segment duration")

    n = 6 * M
    Q = np.zeros((n, n))
    for i in range(M):
        Q[6 * i: 6 * i + 6, 6 * i: 6 * i + 6] = _jerk_cost_block(durations[i])

    rows = []
    rhs = []  # per-axis rhs assembled as (3,) rows

    def add(seg, order, tau, value3):
        row = np.zeros(n)
        row[6 * seg: 6 * seg + 6] = _deriv_row(order, tau)
        rows.append(row)
        rhs.append(np.asarray(value3, dtype=float))

    def add_continuity(seg, order):
        row = np.zeros(n)
        row[6 * seg: 6 * seg + 6] = _deriv_row(order, durations[seg])
        row[6 * (seg + 1): 6 * (seg + 1) + 6] = -_deriv_row(order, 0.0)
        rows.append(row)
        rhs.append(np.zeros(3))

    add(0, 0, 0.0, points[0])
    add(0, 1, 0.0, v_start)
    add(0, 2, 0.0, a_start)
    for i in range(M):
        add(i, 0, durations[i], points[i + 1])
        if i + 1 < M:
            add(i + 1, 0, 0.0, points[i + 1])
            add_continuity(i, 1)
            add_continuity(i, 2)
    add(M - 1, 1, durations[M - 1], v_end)
    add(M - 1, 2, durations[M - 1], a_end)

    A = np.asarray(rows)
    b = np.asarray(rhs)                               # (m, 3)
    m = A.shape[0]
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = 2.0 * Q + np.eye(n) * 1e-10
    kkt[:n, n:] = A.T
    kkt[n:, :n] = A
    full_rhs = np.zeros((n + m, 3))
    full_rhs[n:, :] = b
    try:
        sol = np.linalg.solve(kkt, full_rhs)
    except np.linalg.LinAlgError as exc:
        raise PlanningError(f"singular spline system: {exc}") from exc
    coeffs = sol[:n].T.reshape(3, M, 6)
    return PiecewisePoly(coeffs=coeffs, durations=durations.copy())


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix (..., 3, 3) to scalar-first quaternion, stable branch."""
    R = np.asarray(R, dtype=float)
    shape = R.shape[:-2]
    Rf = R.reshape(-1, 3, 3)
    q = np.empty((Rf.shape[0], 4))
    tr = np.einsum("...ii->...", Rf)
    for i in range(Rf.shape[0]):
        m = Rf[i]
        t = tr[i]
        if t > 0:
            s = np.sqrt(t + 1.0) * 2
            q[i] = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q[i] = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] >= m[2, 2]:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q[i] = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q[i] = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q.reshape(shape + (4,))


def flat_to_attitude(
    v: np.ndarray,
    a: np.ndarray,
    jerk: np.ndarray,
    yaw: np.ndarray,
    yaw_rate: np.ndarray,
    params: QuadParams,
    min_force: float = 0.1,
):
    """Map flat outputs to attitude, collective thrust, and body rates.

    Returns ``(q, thrust, omega_body)`` for inputs shaped (S, 3) / (S,).
    Drag is compensated with the world-frame approximation ``D * v``; the
    time derivative of the drag term is folded into the force derivative so
    the returned body rates are the exact angular velocity of the
    constructed attitude under that approximation.  Raises on the free-fall
    singularity ``|a - g| < min_force``.
    """
    v, a, jerk = np.atleast_2d(v), np.atleast_2d(a), np.atleast_2d(jerk)
    yaw = np.atleast_1d(np.asarray(yaw, dtype=float))
    yaw_rate = np.atleast_1d(np.asarray(yaw_rate, dtype=float))
    m = params.mass

    F = m * (a - params.gravity) + m * params.drag_diag * v
    Fn = np.linalg.norm(F, axis=1)
    if np.any(Fn < min_force * m):
        raise PlanningError("free-fall singularity: required force direction undefined")
    zb = F / Fn[:, None]

    cy, sy = np.cos(yaw), np.sin(yaw)
    xc = np.stack([cy, sy, np.zeros_like(cy)], axis=1)
    u = np.cross(zb, xc)
    un = np.linalg.norm(u, axis=1)
    if np.any(un < 1e-6):
        raise PlanningError("attitude singularity: body z parallel to yaw direction")
    yb = u / un[:, None]
    xb = np.cross(yb, zb)
    R = np.stack([xb, yb, zb], axis=2)
    q = rotmat_to_quat(R)
    thrust = Fn

    Fd = m * jerk + m * params.drag_diag * a
    zdot = (Fd - (np.sum(Fd * zb, axis=1)[:, None]) * zb) / Fn[:, None]
    xcdot = np.stack([-sy * yaw_rate, cy * yaw_rate, np.zeros_like(cy)], axis=1)
    udot = np.cross(zdot, xc) + np.cross(zb, xcdot)
    ydot = (udot - (np.sum(udot * yb, axis=1)[:, None]) * yb) / un[:, None]
    xdot = np.cross(ydot, zb) + np.cross(yb, zdot)
    Rdot = np.stack([xdot, ydot, zdot], axis=2)
    S = np.einsum("sji,sjk->sik", R, Rdot)
    omega = np.stack([S[:, 2, 1], S[:, 0, 2], S[:, 1, 0]], axis=1)
    return q, thrust, omega
