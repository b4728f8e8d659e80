"""Closed-loop flight simulation and metrics.

One simulation step = one control decision (policy or tracker), the
proportional rate loop, and one RK4 step of the rigid-body model.  The
policy always sees the state (and its own issued thrust) from
``delay_steps`` control periods ago via a ring buffer, reproducing the
measurement/processing latency the training pairs were shifted by.

Phases: ``POLICY`` (network commands toward the current waypoint pair) and
``TRANSITION`` (flatness-tracked quintic bridge through an intermediate
waypoint).  Multi-waypoint flights advance the target pair two waypoints at
a time: the network flies through the first of the pair and would hover at
the second, which is exactly where the transition (or, when disabled, the
stop-and-go arrival) hands over.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import dynamics as dyn
from . import policy as policy_mod
from . import transition as trans
from .cpc import CpcSolution
from .dynamics import QuadParams, QuadState
from .errors import ConfigError, InvalidInputError
from .polytraj import PiecewisePoly, flat_to_attitude

log = logging.getLogger(__name__)


class Phase(enum.IntEnum):
    POLICY = 0
    TRANSITION = 1


@dataclass
class SimConfig:
    dt: float = 0.025
    delay_steps: int = 1
    waypoint_tolerance: float = 0.2
    max_time: float = 30.0
    rate_gains: tuple = (40.0, 40.0, 20.0)
    pos_gains: tuple = (8.0, 8.0, 8.0)
    vel_gains: tuple = (5.0, 5.0, 5.0)
    att_gain: float = 8.0
    hover_dist: float = 0.3
    hover_speed: float = 0.2
    hover_hold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.dt <= 0 or self.delay_steps < 0 or self.waypoint_tolerance <= 0:
            raise ConfigError("invalid sim config (dt, delay, tolerance)")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        for k in ("rate_gains", "pos_gains", "vel_gains"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown sim config keys: {sorted(unknown)}")
        kwargs = dict(d)
        for k in ("rate_gains", "pos_gains", "vel_gains"):
            if k in kwargs:
                kwargs[k] = tuple(float(x) for x in kwargs[k])
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# Missions
# ---------------------------------------------------------------------------

@dataclass
class StaticWaypoint:
    p: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)

    def position(self, t: float) -> np.ndarray:
        return self.p

    def to_dict(self) -> dict:
        return {"type": "static", "position": self.p.tolist()}


@dataclass
class CircleWaypoint:
    """Moving waypoint on a horizontal circle:
    center + (r sin(w t + phase), r cos(w t + phase), 0)."""

    center: np.ndarray
    radius: float
    omega: float
    phase: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)

    def position(self, t) -> np.ndarray:
        ang = self.omega * np.asarray(t, dtype=float) + self.phase
        out = np.stack(
            [self.radius * np.sin(ang), self.radius * np.cos(ang), np.zeros_like(ang)], axis=-1
        )
        return self.center + out

    def to_dict(self) -> dict:
        return {
            "type": "circle",
            "center": self.center.tolist(),
            "radius": self.radius,
            "omega": self.omega,
            "phase": self.phase,
        }


def waypoint_from_dict(d: dict):
    kind = d.get("type", "static")
    if kind == "static":
        return StaticWaypoint(np.asarray(d["position"], dtype=float))
    if kind == "circle":
        return CircleWaypoint(
            np.asarray(d["center"], dtype=float),
            float(d["radius"]),
            float(d["omega"]),
            float(d.get("phase", 0.0)),
        )
    raise ConfigError(f"unknown waypoint type {kind!r}")


@dataclass
class Mission:
    start: np.ndarray
    waypoints: list
    end: np.ndarray
    headings: Optional[list] = None

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float)
        self.end = np.asarray(self.end, dtype=float)
        if len(self.waypoints) < 1:
            raise InvalidInputError("mission needs at least one waypoint")

    def to_dict(self) -> dict:
        return {
            "start": self.start.tolist(),
            "waypoints": [w.to_dict() for w in self.waypoints],
            "end": self.end.tolist(),
            "headings": self.headings,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mission":
        known = {"start", "waypoints", "end", "headings"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown mission keys: {sorted(unknown)}")
        return cls(
            start=np.asarray(d["start"], dtype=float),
            waypoints=[waypoint_from_dict(w) for w in d["waypoints"]],
            end=np.asarray(d["end"], dtype=float),
            headings=d.get("headings"),
        )


# ---------------------------------------------------------------------------
# Logs and metrics
# ---------------------------------------------------------------------------

@dataclass
class FlightEvent:
    kind: str
    t: float
    waypoint_index: int
    value: float = 0.0


@dataclass
class FlightLog:
    t: np.ndarray
    states: np.ndarray           # (S, 13)
    cmds: np.ndarray             # (S, 4): omega_cmd, thrust_cmd
    active_idx: np.ndarray
    phase: np.ndarray
    events: list = field(default_factory=list)
    latency_mean: float = 0.0    # wall-clock; excluded from CSV/equality

    def to_csv(self, path: str) -> None:
        cols = (
            "t,px,py,pz,vx,vy,vz,qw,qx,qy,qz,wx,wy,wz,"
            "omega_cmd_x,omega_cmd_y,omega_cmd_z,thrust_cmd,active_idx,phase"
        )
        with open(path, "w") as f:
            f.write(cols + "\n")
            for i in range(len(self.t)):
                row = [self.t[i], *self.states[i], self.cmds[i, 0], self.cmds[i, 1], self.cmds[i, 2], self.cmds[i, 3]]
                f.write(",".join(repr(float(v)) for v in row))
                f.write(f",{int(self.active_idx[i])},{int(self.phase[i])}\n")


@dataclass
class FlightMetrics:
    success: bool
    t_f: Optional[float]
    v_max: float
    waypoint_min_dist: np.ndarray
    waypoint_pass_time: list
    e_max: float
    terminal_miss: float
    processing_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "success": self.success,
            "t_f": self.t_f,
            "v_max": self.v_max,
            "waypoint_min_dist": self.waypoint_min_dist.tolist(),
            "waypoint_pass_time": self.waypoint_pass_time,
            "e_max": self.e_max,
            "terminal_miss": self.terminal_miss,
            "processing_time": self.processing_time,
        }


def compute_metrics(flight_log: FlightLog, mission: Mission, tolerance: float, config: SimConfig) -> FlightMetrics:
    """Arrival time, speed peak, and per-waypoint miss distances.

    Arrival is the start of the first window where the vehicle stays within
    ``hover_dist`` of the endpoint below ``hover_speed`` for ``hover_hold``
    seconds; success additionally requires every waypoint to have come
    within ``tolerance``.
    """
    if len(flight_log.t) == 0:
        raise InvalidInputError("empty flight log")
    t = flight_log.t
    p = flight_log.states[:, dyn.SP]
    v = flight_log.states[:, dyn.SV]
    speed = np.linalg.norm(v, axis=1)

    min_dist = np.empty(len(mission.waypoints))
    pass_time = []
    for j, wp in enumerate(mission.waypoints):
        wp_pos = wp.position(t)
        d = np.linalg.norm(p - np.atleast_2d(wp_pos), axis=1)
        min_dist[j] = float(d.min())
        hits = np.nonzero(d <= tolerance)[0]
        pass_time.append(float(t[hits[0]]) if hits.size else None)

    d_end = np.linalg.norm(p - mission.end, axis=1)
    ok = (d_end <= config.hover_dist) & (speed <= config.hover_speed)
    need = max(1, int(round(config.hover_hold / config.dt)))
    t_f = None
    run = 0
    for i, flag in enumerate(ok):
        run = run + 1 if flag else 0
        if run >= need:
            t_f = float(t[i - need + 1])
            break
    success = t_f is not None and all(pt is not None for pt in pass_time)
    return FlightMetrics(
        success=bool(success),
        t_f=t_f,
        v_max=float(speed.max()),
        waypoint_min_dist=min_dist,
        waypoint_pass_time=pass_time,
        e_max=float(min_dist.max()),
        terminal_miss=float(d_end.min()),
        processing_time=flight_log.latency_mean,
    )


# ---------------------------------------------------------------------------
# Delay buffer
# ---------------------------------------------------------------------------

class DelayBuffer:
    """History of (state vector, issued thrust) for delayed policy inputs.

    ``read(step, d)`` returns the entry recorded at control step ``step-d``,
    clamped to the initial entry for pre-start indices.  With d = 0 the
    current state is paired with the most recently issued thrust.
    """

    def __init__(self, initial_state: QuadState, hover_thrust: float):
        self._states = [initial_state.as_vector()]
        self._thrusts = [hover_thrust]

    def record(self, state: QuadState, thrust_cmd: float) -> None:
        self._states.append(state.as_vector())
        self._thrusts.append(thrust_cmd)

    def read(self, step: int, d: int, current: QuadState, last_thrust: float):
        if d == 0:
            return current, last_thrust
        idx = max(0, step - d + 1)
        return QuadState.from_vector(self._states[idx]), self._thrusts[idx]


# ---------------------------------------------------------------------------
# Rollout engines
# ---------------------------------------------------------------------------

def rollout_policy(
    model,
    start_state: QuadState,
    wp_pair,
    params: QuadParams,
    config: SimConfig,
    stop_fn: Callable[[QuadState, np.ndarray], bool],
    max_time: float,
):
    """Closed-loop policy rollout until ``stop_fn(state, accel)`` or timeout.

    Returns ``(state, accel)`` at the stop instant, or None on timeout.
    Used by the transition exit predictor; owns all of its state.
    """
    state = start_state.copy()
    buf = DelayBuffer(state, params.hover_thrust)
    last_thrust = params.hover_thrust
    gains = np.asarray(config.rate_gains)
    steps = int(math.ceil(max_time / config.dt))
    wp1 = np.asarray(wp_pair[0], dtype=float)
    wp2 = np.asarray(wp_pair[1], dtype=float)
    for k in range(steps):
        dstate, dthrust = buf.read(k, config.delay_steps, state, last_thrust)
        cmd = policy_mod.infer_command(model, dstate, (wp1, wp2), dthrust, params)
        inp = dyn.rate_loop(cmd, state.omega, gains, params)
        accel = dyn.f_batch(state.as_vector(), inp.as_vector(), params)[dyn.SV]
        if stop_fn(state, accel):
            return state, accel
        state = dyn.rk4_step(state, inp, config.dt, params)
        last_thrust = cmd.thrust_cmd
        buf.record(state, last_thrust)
    return None


class _Recorder:
    def __init__(self):
        self.rows_t = []
        self.states = []
        self.cmds = []
        self.active = []
        self.phase = []
        self.events = []
        self.latencies = []

    def add(self, t, state, cmd, active, phase):
        self.rows_t.append(t)
        self.states.append(state.as_vector())
        self.cmds.append(np.concatenate([cmd.omega_cmd, [cmd.thrust_cmd]]))
        self.active.append(active)
        self.phase.append(int(phase))

    def finish(self) -> FlightLog:
        return FlightLog(
            t=np.asarray(self.rows_t),
            states=np.asarray(self.states),
            cmds=np.asarray(self.cmds),
            active_idx=np.asarray(self.active, dtype=int),
            phase=np.asarray(self.phase, dtype=int),
            events=self.events,
            latency_mean=float(np.mean(self.latencies)) if self.latencies else 0.0,
        )


class _HoverDetector:
    def __init__(self, target: np.ndarray, config: SimConfig):
        self.target = target
        self.cfg = config
        self.need = max(1, int(round(config.hover_hold / config.dt)))
        self.run = 0

    def update(self, state: QuadState) -> bool:
        near = np.linalg.norm(state.p - self.target) <= self.cfg.hover_dist
        slow = np.linalg.norm(state.v) <= self.cfg.hover_speed
        self.run = self.run + 1 if (near and slow) else 0
        return self.run >= self.need


def run_two_waypoint(model, mission: Mission, config: SimConfig, params: QuadParams):
    """Policy flight through one (possibly moving) waypoint to a hover end.

    The waypoint position is re-evaluated every control step, so moving
    waypoints are handled with no future knowledge.
    """
    if len(mission.waypoints) != 1:
        raise InvalidInputError("run_two_waypoint expects exactly one waypoint")
    state = QuadState.hover(mission.start)
    buf = DelayBuffer(state, params.hover_thrust)
    last_thrust = params.hover_thrust
    gains = np.asarray(config.rate_gains)
    rec = _Recorder()
    hover = _HoverDetector(mission.end, config)
    steps = int(math.ceil(config.max_time / config.dt))
    wp = mission.waypoints[0]
    for k in range(steps):
        t = k * config.dt
        dstate, dthrust = buf.read(k, config.delay_steps, state, last_thrust)
        t0 = time.perf_counter()
        cmd = policy_mod.infer_command(model, dstate, (wp.position(t), mission.end), dthrust, params)
        rec.latencies.append(time.perf_counter() - t0)
        inp = dyn.rate_loop(cmd, state.omega, gains, params)
        rec.add(t, state, cmd, 0, Phase.POLICY)
        if hover.update(state):
            break
        state = dyn.rk4_step(state, inp, config.dt, params)
        last_thrust = cmd.thrust_cmd
        buf.record(state, last_thrust)
    flight_log = rec.finish()
    metrics = compute_metrics(flight_log, mission, config.waypoint_tolerance, config)
    return flight_log, metrics


def run_moving_waypoint(model, mission: Mission, config: SimConfig, params: QuadParams):
    """Alias engine for missions whose single waypoint moves."""
    return run_two_waypoint(model, mission, config, params)


def run_track(
    model,
    mission: Mission,
    transition_config: trans.TransitionConfig,
    config: SimConfig,
    params: QuadParams,
):
    """Multi-waypoint flight with the waypoint-switching state machine.

    Targets are the mission waypoints plus the endpoint; the policy flies
    pair (i, i+1) and the machine advances two targets at a time, bridging
    the pair's hover waypoint with a transition (or a logged stop-and-go
    when planning fails or transitions are disabled).
    """
    targets = [np.asarray(w.position(0.0), dtype=float) for w in mission.waypoints]
    for w in mission.waypoints:
        if not isinstance(w, StaticWaypoint):
            raise InvalidInputError("run_track requires static waypoints")
    targets.append(mission.end)
    m = len(targets)

    state = QuadState.hover(mission.start)
    buf = DelayBuffer(state, params.hover_thrust)
    last_thrust = params.hover_thrust
    gains = np.asarray(config.rate_gains)
    rec = _Recorder()
    hover = _HoverDetector(mission.end, config)
    thr = transition_config.thresholds
    limits = transition_config.limits

    i = 0
    passed_first = False
    fallback_logged = False
    plan: Optional[trans.TransitionPlan] = None
    plan_t = 0.0
    plan_yaw = 0.0
    steps = int(math.ceil(config.max_time / config.dt))

    for k in range(steps):
        t = k * config.dt
        wp_a = targets[i]
        wp_b = targets[min(i + 1, m - 1)]

        if plan is None:
            dstate, dthrust = buf.read(k, config.delay_steps, state, last_thrust)
            t0 = time.perf_counter()
            cmd = policy_mod.infer_command(model, dstate, (wp_a, wp_b), dthrust, params)
            rec.latencies.append(time.perf_counter() - t0)
            inp = dyn.rate_loop(cmd, state.omega, gains, params)
            phase = Phase.POLICY

            if not passed_first and np.linalg.norm(state.p - wp_a) <= config.waypoint_tolerance:
                passed_first = True
            bridgeable = transition_config.enabled and (i + 1 <= m - 2)
            if bridgeable and passed_first:
                accel = dyn.f_batch(state.as_vector(), inp.as_vector(), params)[dyn.SV]
                flat_now = trans.FlatState(state.p.copy(), state.v.copy(), accel.copy())
                mode = trans.classify_direction(targets[i], targets[i + 1], targets[i + 2])
                if trans.should_enter(flat_now, wp_b, mode, thr):
                    wp3 = targets[i + 2]
                    wp4 = targets[i + 3] if i + 3 < m else targets[i + 2]
                    try:
                        exit_state = trans.predict_exit(
                            model, wp_b, wp3, wp4, mode, thr, params, config
                        )
                        plan = trans.plan_transition(flat_now, wp_b, exit_state, limits, thr, mode)
                        plan_t = 0.0
                        plan_yaw = float(dyn.quat_yaw(state.q))
                        rec.events.append(FlightEvent("transition_enter", t, i + 1))
                        phase = Phase.TRANSITION
                    except Exception as exc:  # planning failure -> stop-and-go
                        if not fallback_logged:
                            log.warning("transition at waypoint %d failed (%s); stop-and-go", i + 1, exc)
                            fallback_logged = True
            if plan is None and i + 1 <= m - 2:
                # Stop-and-go switch: arrived (slow and close) at the hover target.
                near = np.linalg.norm(state.p - wp_b) <= config.hover_dist
                slow = np.linalg.norm(state.v) <= config.hover_speed
                if near and slow:
                    rec.events.append(FlightEvent("stop_and_go_switch", t, i + 1))
                    i += 2
                    passed_first = False
                    fallback_logged = False
        else:
            flat = plan.eval(plan_t)
            cmd = tracking_command(flat, plan_yaw, 0.0, state, config, params)
            inp = dyn.rate_loop(cmd, state.omega, gains, params)
            phase = Phase.TRANSITION
            plan_t += config.dt
            if plan_t >= plan.total_time:
                rec.events.append(FlightEvent("transition_exit", t, i + 1))
                plan = None
                i += 2
                passed_first = False
                fallback_logged = False

        rec.add(t, state, cmd, min(i, m - 1), phase)
        if i >= m - 2 and plan is None and hover.update(state):
            break
        state = dyn.rk4_step(state, inp, config.dt, params)
        last_thrust = cmd.thrust_cmd
        buf.record(state, last_thrust)

    flight_log = rec.finish()
    metrics = compute_metrics(flight_log, mission, config.waypoint_tolerance, config)
    return flight_log, metrics


# ---------------------------------------------------------------------------
# Reference tracking (flatness feedforward + PD feedback)
# ---------------------------------------------------------------------------

@dataclass
class TrajectoryRef:
    """Sampled reference with full flat outputs and attitude."""

    times: np.ndarray
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    jerk: np.ndarray
    q: np.ndarray
    omega: np.ndarray
    yaw: np.ndarray

    @property
    def duration(self) -> float:
        return float(self.times[-1])

    def eval(self, t: float):
        t = float(np.clip(t, 0.0, self.duration))
        i = int(np.searchsorted(self.times, t, side="right") - 1)
        i = min(max(i, 0), len(self.times) - 2)
        w = (t - self.times[i]) / max(self.times[i + 1] - self.times[i], 1e-12)
        lerp = lambda A: (1 - w) * A[i] + w * A[i + 1]
        q = (1 - w) * self.q[i] + w * self.q[i + 1]
        q = q / np.linalg.norm(q)
        return lerp(self.p), lerp(self.v), lerp(self.a), lerp(self.jerk), q, lerp(self.omega), float(lerp(self.yaw))

    @classmethod
    def from_cpc_solution(cls, sol: CpcSolution, params: QuadParams) -> "TrajectoryRef":
        X = sol.states
        U = sol.inputs
        f = dyn.f_batch(X, U, params)
        a = f[:, dyn.SV]
        times = sol.times
        jerk = np.gradient(a, sol.dt, axis=0)
        return cls(
            times=times,
            p=X[:, dyn.SP].copy(),
            v=X[:, dyn.SV].copy(),
            a=a,
            jerk=jerk,
            q=X[:, dyn.SQ].copy(),
            omega=X[:, dyn.SW].copy(),
            yaw=dyn.quat_yaw(X[:, dyn.SQ]),
        )

    @classmethod
    def from_poly(cls, poly: PiecewisePoly, params: QuadParams, yaw: float = 0.0, dt: float = 0.01) -> "TrajectoryRef":
        n = max(2, int(math.ceil(poly.total_time / dt)) + 1)
        times = np.linspace(0.0, poly.total_time, n)
        p, v, a, jerk = poly.eval(times)
        yaws = np.full(n, yaw)
        q, _, omega = flat_to_attitude(v, a, jerk, yaws, np.zeros(n), params)
        return cls(times=times, p=p, v=v, a=a, jerk=jerk, q=q, omega=omega, yaw=yaws)


def tracking_command(
    flat: trans.FlatState,
    yaw_ref: float,
    yaw_rate_ref: float,
    state: QuadState,
    config: SimConfig,
    params: QuadParams,
    q_ref: Optional[np.ndarray] = None,
    omega_ref: Optional[np.ndarray] = None,
) -> dyn.RateThrustCmd:
    """Flatness feedforward plus PD position/velocity and attitude feedback.

    When the commanded force direction degenerates (free-fall stretches of
    aggressive references) the reference attitude is held instead; feedback
    then recovers once thrust authority returns.
    """
    kp = np.asarray(config.pos_gains)
    kv = np.asarray(config.vel_gains)
    a_cmd = flat.a + kp * (flat.p - state.p) + kv * (flat.v - state.v)
    jerk = flat.jerk if flat.jerk is not None else np.zeros(3)

    R = dyn.quat_to_rotmat(state.q)
    z_body = R[:, 2]
    F_des = params.mass * (a_cmd - params.gravity) + params.mass * params.drag_diag * state.v
    try:
        q_des, _, omega_ff = flat_to_attitude(
            flat.v[None, :], a_cmd[None, :], jerk[None, :],
            np.array([yaw_ref]), np.array([yaw_rate_ref]), params, min_force=0.2,
        )
        q_des, omega_ff = q_des[0], omega_ff[0]
    except Exception:
        q_des = q_ref if q_ref is not None else state.q.copy()
        omega_ff = omega_ref if omega_ref is not None else np.zeros(3)

    q_err = dyn.quat_mul(dyn.quat_conj(state.q), q_des)
    if q_err[0] < 0:
        q_err = -q_err
    e_att = 2.0 * q_err[1:4]
    omega_cmd = omega_ff + config.att_gain * e_att
    thrust_cmd = float(np.clip(F_des @ z_body, params.thrust_min, params.thrust_max))
    return dyn.RateThrustCmd(omega_cmd, thrust_cmd)


def track_trajectory(
    reference: TrajectoryRef,
    mission: Mission,
    config: SimConfig,
    params: QuadParams,
    settle_time: float = 1.5,
):
    """Fly a sampled reference with the flatness tracker; used for the
    trajectory-optimization and polynomial baselines."""
    state = QuadState(reference.p[0].copy(), reference.v[0].copy(), reference.q[0].copy(), reference.omega[0].copy())
    gains = np.asarray(config.rate_gains)
    rec = _Recorder()
    hover = _HoverDetector(mission.end, config)
    total = reference.duration + settle_time
    steps = int(math.ceil(min(total, config.max_time) / config.dt))
    for k in range(steps):
        t = k * config.dt
        p_r, v_r, a_r, j_r, q_r, w_r, yaw_r = reference.eval(t)
        flat = trans.FlatState(p_r, v_r, a_r, j_r)
        t0 = time.perf_counter()
        cmd = tracking_command(flat, yaw_r, 0.0, state, config, params, q_ref=q_r, omega_ref=w_r)
        rec.latencies.append(time.perf_counter() - t0)
        inp = dyn.rate_loop(cmd, state.omega, gains, params)
        rec.add(t, state, cmd, 0, Phase.POLICY)
        if t > reference.duration and hover.update(state):
            break
        state = dyn.rk4_step(state, inp, config.dt, params)
    flight_log = rec.finish()
    metrics = compute_metrics(flight_log, mission, config.waypoint_tolerance, config)
    return flight_log, metrics


def save_metrics(metrics: FlightMetrics, path: str) -> None:
    with open(path, "w") as f:
        json.dump(metrics.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
