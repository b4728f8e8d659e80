"""Minimum-jerk transition phases through intermediate hover waypoints.

A policy trained on hover-terminated two-waypoint tasks decelerates to a
stop at every second waypoint.  The transition phase bridges that waypoint
with two quintic segments (entry -> waypoint -> predicted exit), entered
and left by velocity or acceleration thresholds depending on whether the
flight continues in the same or the opposite direction.  Junction velocity
and acceleration at the waypoint are free and chosen by jerk minimization,
so the vehicle carries speed through the waypoint instead of stopping.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import dynamics as dyn
from .dynamics import QuadParams
from .errors import ConfigError, DegenerateMissionError, PlanningError, PredictionTimeoutError
from .polytraj import PiecewisePoly, flat_to_attitude, min_jerk_spline

log = logging.getLogger(__name__)


class Mode(enum.Enum):
    SAME_DIRECTION = "same"
    OPPOSITE_DIRECTION = "opposite"


@dataclass
class FlatState:
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    jerk: Optional[np.ndarray] = None

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.a = np.asarray(self.a, dtype=float)
        if self.jerk is not None:
            self.jerk = np.asarray(self.jerk, dtype=float)

    @classmethod
    def rest(cls, p) -> "FlatState":
        return cls(np.asarray(p, dtype=float), np.zeros(3), np.zeros(3), np.zeros(3))


@dataclass
class PolySegment:
    """Per-axis quintic coefficients (ascending powers) over one duration."""

    coeffs: np.ndarray          # (3, 6)
    duration: float

    def eval(self, t) -> FlatState:
        poly = PiecewisePoly(self.coeffs[:, None, :], np.array([self.duration]))
        p, v, a, j = poly.eval(float(t))
        return FlatState(p, v, a, j)


@dataclass
class TransitionLimits:
    v_max: float = 8.0
    a_max: float = 10.0


@dataclass
class TransitionThresholds:
    v_in: float = 1.0
    v_out: float = 1.5
    a_in: float = -2.0
    a_out: float = 2.0


@dataclass
class TransitionConfig:
    thresholds: TransitionThresholds
    limits: TransitionLimits
    enabled: bool = True

    @classmethod
    def default(cls) -> "TransitionConfig":
        return cls(TransitionThresholds(), TransitionLimits())

    def to_dict(self) -> dict:
        return {
            "v_in": self.thresholds.v_in,
            "v_out": self.thresholds.v_out,
            "a_in": self.thresholds.a_in,
            "a_out": self.thresholds.a_out,
            "v_max": self.limits.v_max,
            "a_max": self.limits.a_max,
            "enabled": self.enabled,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransitionConfig":
        known = {"v_in", "v_out", "a_in", "a_out", "v_max", "a_max", "enabled"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown transition config keys: {sorted(unknown)}")
        thr = TransitionThresholds(
            v_in=d.get("v_in", 1.0), v_out=d.get("v_out", 1.5),
            a_in=d.get("a_in", -2.0), a_out=d.get("a_out", 2.0),
        )
        lim = TransitionLimits(v_max=d.get("v_max", 8.0), a_max=d.get("a_max", 10.0))
        return cls(thr, lim, enabled=d.get("enabled", True))


@dataclass
class TransitionPlan:
    mode: Mode
    entry_state: FlatState
    exit_state: FlatState
    segments: list               # two PolySegment
    total_time: float
    thresholds: TransitionThresholds

    def eval(self, t: float) -> FlatState:
        t = float(np.clip(t, 0.0, self.total_time))
        if t <= self.segments[0].duration:
            return self.segments[0].eval(t)
        return self.segments[1].eval(t - self.segments[0].duration)


# ---------------------------------------------------------------------------
# Direction classification and phase thresholds
# ---------------------------------------------------------------------------

def classify_direction(wp1, wp2, wp3) -> Mode:
    """Same-direction iff (wp2-wp1).(wp3-wp2) > 0; exact zero ties to same."""
    wp1, wp2, wp3 = (np.asarray(w, dtype=float) for w in (wp1, wp2, wp3))
    d1 = wp2 - wp1
    d2 = wp3 - wp2
    if np.linalg.norm(d1) < 1e-6 or np.linalg.norm(d2) < 1e-6:
        raise DegenerateMissionError("coincident waypoints in direction classification")
    dot = float(d1 @ d2)
    if dot < 0:
        return Mode.OPPOSITE_DIRECTION
    if dot == 0:
        log.info("perpendicular waypoint turn; tie-broken to same-direction")
    return Mode.SAME_DIRECTION


def should_enter(current: FlatState, wp2, mode: Mode, thresholds: TransitionThresholds) -> bool:
    """Entry test for the transition phase around waypoint ``wp2``.

    Same-direction: speed below v_in while actually closing on the
    waypoint.  Opposite-direction: along-track (current motion direction)
    acceleration below a_in, i.e. braking harder than the threshold.
    """
    wp2 = np.asarray(wp2, dtype=float)
    speed = float(np.linalg.norm(current.v))
    if mode is Mode.SAME_DIRECTION:
        closing = float((current.p - wp2) @ current.v) < 0.0
        return closing and speed < thresholds.v_in
    if speed < 1e-6:
        return False
    along = float(current.a @ (current.v / speed))
    return along < thresholds.a_in


def predict_exit(
    model,
    wp2,
    wp3,
    wp4,
    mode: Mode,
    thresholds: TransitionThresholds,
    params: QuadParams,
    sim_config,
    max_horizon: float = 5.0,
) -> FlatState:
    """Roll the policy out from hover at wp2 toward (wp3, wp4) and return
    the flat state at the exit-threshold crossing.

    Same-direction exits when speed reaches v_out; opposite-direction when
    acceleration along the outgoing leg reaches a_out.  A private simulator
    instance is used; the rollout never touches caller state.
    """
    from .sim import rollout_policy  # deferred: sim imports this module

    wp2 = np.asarray(wp2, dtype=float)
    wp3 = np.asarray(wp3, dtype=float)
    out_dir = wp3 - wp2
    nrm = np.linalg.norm(out_dir)
    if nrm < 1e-6:
        raise DegenerateMissionError("coincident waypoints in exit prediction")
    out_dir = out_dir / nrm

    if mode is Mode.SAME_DIRECTION:
        def crossed(state, accel):
            return float(np.linalg.norm(state.v)) >= thresholds.v_out
    else:
        def crossed(state, accel):
            return float(accel @ out_dir) >= thresholds.a_out

    start = dyn.QuadState.hover(wp2)
    result = rollout_policy(model, start, (wp3, np.asarray(wp4, dtype=float)), params, sim_config,
                            stop_fn=crossed, max_time=max_horizon)
    if result is None:
        raise PredictionTimeoutError(
            f"exit threshold not reached within {max_horizon} s of rollout"
        )
    state, accel = result
    return FlatState(state.p.copy(), state.v.copy(), accel.copy())


# ---------------------------------------------------------------------------
# Quintic segments
# ---------------------------------------------------------------------------

def solve_segment(b0: FlatState, b1: FlatState, T: float) -> PolySegment:
    """Unique per-axis quintic matching p, v, a at both ends (closed form)."""
    if T <= 1e-4:
        raise PlanningError(f"degenerate segment duration {T}")
    T2, T3, T4, T5 = T * T, T ** 3, T ** 4, T ** 5
    A = np.array([
        [T3, T4, T5],
        [3 * T2, 4 * T3, 5 * T4],
        [6 * T, 12 * T2, 20 * T3],
    ])
    coeffs = np.empty((3, 6))
    for ax in range(3):
        c0, c1, c2 = b0.p[ax], b0.v[ax], 0.5 * b0.a[ax]
        rhs = np.array([
            b1.p[ax] - (c0 + c1 * T + c2 * T2),
            b1.v[ax] - (c1 + 2 * c2 * T),
            b1.a[ax] - b0.a[ax],
        ])
        c345 = np.linalg.solve(A, rhs)
        coeffs[ax] = [c0, c1, c2, *c345]
    return PolySegment(coeffs, float(T))


def _sample_limits_ok(poly: PiecewisePoly, v_max: float, a_max: float, n_per_seg: int = 120) -> bool:
    ts = np.linspace(0.0, poly.total_time, n_per_seg * len(poly.durations))
    _, v, a, _ = poly.eval(ts)
    return bool(np.all(np.linalg.norm(v, axis=1) <= v_max) and np.all(np.linalg.norm(a, axis=1) <= a_max))


def plan_transition(
    entry: FlatState,
    wp2,
    exit_state: FlatState,
    limits: TransitionLimits,
    thresholds: Optional[TransitionThresholds] = None,
    mode: Mode = Mode.SAME_DIRECTION,
    bisect_iters: int = 12,
) -> TransitionPlan:
    """Two jointly solved quintics entry -> wp2 -> exit.

    The junction holds position exactly at wp2 with free velocity and
    acceleration chosen by jerk minimization; segment durations are a
    common scale factor over distance-proportional bases, minimized by
    bisection subject to sampled velocity/acceleration limits.
    """
    wp2 = np.asarray(wp2, dtype=float)
    if np.linalg.norm(entry.p - exit_state.p) < 1e-9 and np.linalg.norm(entry.p - wp2) < 1e-9:
        raise PlanningError("degenerate transition: entry, waypoint, and exit coincide")
    if float(np.linalg.norm(entry.v)) > limits.v_max or float(np.linalg.norm(exit_state.v)) > limits.v_max:
        raise PlanningError("infeasible limits: boundary velocity exceeds v_max")
    if float(np.linalg.norm(entry.a)) > limits.a_max or float(np.linalg.norm(exit_state.a)) > limits.a_max:
        raise PlanningError("infeasible limits: boundary acceleration exceeds a_max")

    d1 = max(float(np.linalg.norm(wp2 - entry.p)), 1e-3)
    d2 = max(float(np.linalg.norm(exit_state.p - wp2)), 1e-3)
    v_ref = max(0.5 * (np.linalg.norm(entry.v) + np.linalg.norm(exit_state.v)), 0.25 * limits.v_max, 0.1)
    base = np.array([d1, d2]) / v_ref
    points = np.vstack([entry.p, wp2, exit_state.p])

    def build(s: float) -> PiecewisePoly:
        return min_jerk_spline(
            points, s * base,
            v_start=entry.v, a_start=entry.a,
            v_end=exit_state.v, a_end=exit_state.a,
        )

    s_lo, s_hi = 0.25, 1.0
    poly_hi = build(s_hi)
    grow = 0
    while not _sample_limits_ok(poly_hi, limits.v_max, limits.a_max):
        s_hi *= 2.0
        grow += 1
        if grow > 12:
            raise PlanningError("infeasible limits: no feasible time scale (a_max/v_max too tight)")
        poly_hi = build(s_hi)
    for _ in range(bisect_iters):
        s_mid = 0.5 * (s_lo + s_hi)
        if _sample_limits_ok(build(s_mid), limits.v_max, limits.a_max):
            s_hi = s_mid
        else:
            s_lo = s_mid
    poly = build(s_hi)

    segments = [
        PolySegment(poly.coeffs[:, 0, :].copy(), float(poly.durations[0])),
        PolySegment(poly.coeffs[:, 1, :].copy(), float(poly.durations[1])),
    ]
    return TransitionPlan(
        mode=mode,
        entry_state=entry,
        exit_state=exit_state,
        segments=segments,
        total_time=poly.total_time,
        thresholds=thresholds or TransitionThresholds(),
    )


def plan_track_polynomial(points: np.ndarray, limits: TransitionLimits, bisect_iters: int = 12) -> PiecewisePoly:
    """Rest-to-rest minimum-jerk spline through a full waypoint track.

    Used as the polynomial flight baseline: exact waypoint traversal,
    jerk-optimal free junctions, durations time-scaled to the limits by the
    same bisection as single transitions.
    """
    points = np.asarray(points, dtype=float)
    seg_len = np.linalg.norm(np.diff(points, axis=0), axis=1)
    if np.any(seg_len < 1e-6):
        raise DegenerateMissionError("coincident consecutive track points")
    v_ref = max(0.5 * limits.v_max, 0.1)
    base = np.maximum(seg_len / v_ref, 0.05)

    def build(s: float) -> PiecewisePoly:
        return min_jerk_spline(points, s * base)

    s_lo, s_hi = 0.25, 1.0
    poly = build(s_hi)
    grow = 0
    while not _sample_limits_ok(poly, limits.v_max, limits.a_max):
        s_hi *= 2.0
        grow += 1
        if grow > 12:
            raise PlanningError("infeasible limits for track polynomial")
        poly = build(s_hi)
    for _ in range(bisect_iters):
        s_mid = 0.5 * (s_lo + s_hi)
        if _sample_limits_ok(build(s_mid), limits.v_max, limits.a_max):
            s_hi = s_mid
        else:
            s_lo = s_mid
    return build(s_hi)


# ---------------------------------------------------------------------------
# Flatness feedforward
# ---------------------------------------------------------------------------

def flatness_feedforward(flat: FlatState, yaw: float, params: QuadParams, yaw_rate: float = 0.0):
    """Desired attitude, collective thrust, and body rates for a flat state.

    Returns ``(q_des, T_des, omega_des)``.  Raises on the free-fall
    singularity where the required force direction is undefined.  Body
    rates are exact for drag-free flight; with drag they use the
    world-frame drag approximation (feedback absorbs the difference).
    """
    jerk = flat.jerk if flat.jerk is not None else np.zeros(3)
    q, thrust, omega = flat_to_attitude(
        flat.v[None, :], flat.a[None, :], jerk[None, :],
        np.array([yaw]), np.array([yaw_rate]), params,
    )
    return q[0], float(thrust[0]), omega[0]
