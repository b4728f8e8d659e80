"""Discrete minimum-time trajectory optimization with progress constraints.

The flight task (hover start -> waypoints -> hover end) is transcribed on a
uniform grid of N intervals with total time t as a decision variable
(dt = t / N).  Decision variables:

    t                     total time
    x_1 .. x_{N-1}        13-dim states at interior nodes (boundary fixed)
    u_0 .. u_{N-1}        thrust + body torque, held constant per interval
    mu[j, 0..N-1]         per-waypoint progress decrement, mu >= 0
    nu[j, 0..N-1]         per-waypoint squared-distance slack in [0, d_tol^2]

Remaining progress lambda is derived: lam_k = 1 - sum_{i<k} mu_i, so
lam_0 = 1 and monotone non-increase hold by construction, and the equality
sum_k mu[j, k] = 1 pins lam_N = 0.

Constraints:

    defect    x_{k+1} - rk4(x_k, u_k, dt) = 0          (no quaternion renorm)
    |q_k|^2 - 1 = 0 at interior nodes                  (keeps R(q) orthogonal)
    sum_k mu[j, k] = 1
    |mu[j,k] (||p_k - P_j||^2 (+ wrapped yaw error^2) - nu[j,k])| <= eps
    cumulative progress ordering between consecutive waypoints
    box bounds on inputs, body rates, mu, nu, t

The progress-coupling product may only vanish when either no progress is
spent at node k or the node sits inside the tolerance ball, so driving the
relaxation eps down a schedule (default 1 -> 1e-4) pulls the trajectory
through each waypoint without ever posing an exact (degenerate)
complementarity problem.  Each stage is solved by an augmented-Lagrangian
outer loop with an L-BFGS-B inner minimizer; gradients are analytic via
chained RK4 sensitivities.  Multipliers are carried across stages and into
warm starts, so re-solving from a converged solution terminates in one or
two outer iterations.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import dynamics as dyn
from .auglag import AugLagOptions, solve_auglag
from .dynamics import SP, SQ, SV, SW, QuadParams, QuadState
from .errors import ConfigError, DegenerateMissionError, InvalidInputError

COINCIDENT_TOL = 1e-6


@dataclass
class CpcConfig:
    """Solver configuration; defaults target desk-scale two-waypoint tasks."""

    d_tol: float = 0.2
    nodes_per_meter: float = 10.0
    min_nodes: int = 40
    node_count: Optional[int] = None
    relax_schedule: tuple = (1.0, 1e-1, 1e-2, 1e-3, 1e-4)
    guess_speed: float = 2.0
    t_min: float = 0.1
    time_weight: float = 1.0
    feas_tol: float = 1e-5
    stage_feas_tol: float = 1e-4
    max_outer_stage: int = 3
    max_outer_final: int = 10
    inner_maxiter: int = 150
    inner_maxiter_final: int = 400
    rho_init: float = 10.0
    rho_carry_max: float = 1e4
    v_cap: float = 25.0
    v_scale: float = 5.0
    lbfgs_ftol: float = 1e-10
    lbfgs_pgtol: float = 1e-6

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["relax_schedule"] = list(self.relax_schedule)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CpcConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown cpc config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "relax_schedule" in kwargs:
            kwargs["relax_schedule"] = tuple(float(e) for e in kwargs["relax_schedule"])
        return cls(**kwargs)


@dataclass
class CpcProblem:
    start_state: QuadState
    end_state: QuadState
    waypoints: np.ndarray              # (W, 3)
    headings: np.ndarray               # (W,), NaN = free heading
    node_count: int
    d_tol: float
    params: QuadParams
    config: CpcConfig

    def __post_init__(self):
        if self.node_count < 10:
            raise InvalidInputError("node_count must be >= 10")
        if self.d_tol <= 0:
            raise InvalidInputError("d_tol must be positive")
        if len(self.waypoints) == 0:
            raise InvalidInputError("waypoints must be non-empty")


@dataclass
class CpcNode:
    p: np.ndarray
    v: np.ndarray
    q: np.ndarray
    omega: np.ndarray
    u: dyn.ControlInput
    lam: np.ndarray
    mu: np.ndarray
    nu: np.ndarray


@dataclass
class CpcSolution:
    t_total: float
    dt: float
    states: np.ndarray                 # (N+1, 13)
    inputs: np.ndarray                 # (N+1, 4); row N is hover
    lam: np.ndarray                    # (W, N+1)
    mu: np.ndarray                     # (W, N+1); column N is zero
    nu: np.ndarray                     # (W, N+1)
    waypoints: np.ndarray
    headings: np.ndarray
    residuals: dict
    converged: bool
    solve_time: float
    n_outer: int
    n_evals: int
    config_hash: str = ""
    multipliers: Optional[dict] = field(default=None, repr=False)

    @property
    def node_count(self) -> int:
        return self.states.shape[0] - 1

    @property
    def nodes(self) -> list:
        out = []
        for k in range(self.states.shape[0]):
            x = self.states[k]
            out.append(
                CpcNode(
                    p=x[SP], v=x[SV], q=x[SQ], omega=x[SW],
                    u=dyn.ControlInput(self.inputs[k, 0], self.inputs[k, 1:4]),
                    lam=self.lam[:, k], mu=self.mu[:, k], nu=self.nu[:, k],
                )
            )
        return out

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.states.shape[0]) * self.dt


@dataclass
class FeasibilityReport:
    max_dynamics_defect: float
    max_complementarity: float
    max_bound_violation: float
    max_quat_norm_error: float
    min_waypoint_distance: np.ndarray
    lambda_monotone: bool
    saturation_fraction: float
    passed: bool


# ---------------------------------------------------------------------------
# Problem construction
# ---------------------------------------------------------------------------

def build_problem(
    start,
    waypoints,
    end,
    params: QuadParams,
    config: CpcConfig,
    headings: Optional[Sequence[Optional[float]]] = None,
    start_heading: float = 0.0,
    end_heading: float = 0.0,
) -> CpcProblem:
    """Assemble a hover-to-hover task through ``waypoints``.

    The node count follows max(min_nodes, nodes_per_meter * polyline length)
    unless ``config.node_count`` overrides it.  The final waypoint may
    coincide with ``end`` (the usual terminal-hover-waypoint pattern); any
    other pair of coincident consecutive points is degenerate.
    """
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    wps = np.atleast_2d(np.asarray(waypoints, dtype=float))
    if not (np.all(np.isfinite(start)) and np.all(np.isfinite(end)) and np.all(np.isfinite(wps))):
        raise InvalidInputError("non-finite mission point")

    pts = [start] + [w for w in wps]
    if np.linalg.norm(wps[-1] - end) > COINCIDENT_TOL:
        pts.append(end)
    pts = np.asarray(pts)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    if seg.size == 0 or np.any(seg <= COINCIDENT_TOL):
        raise DegenerateMissionError("coincident consecutive mission points")
    length = float(seg.sum())

    n = config.node_count or max(config.min_nodes, int(round(config.nodes_per_meter * length)))

    hvec = np.full(len(wps), np.nan)
    if headings is not None:
        for j, psi in enumerate(headings):
            if psi is not None and not (isinstance(psi, float) and np.isnan(psi)):
                hvec[j] = dyn.wrap_angle(float(psi))

    return CpcProblem(
        start_state=QuadState.hover(start, yaw=start_heading),
        end_state=QuadState.hover(end, yaw=end_heading),
        waypoints=wps,
        headings=hvec,
        node_count=int(n),
        d_tol=config.d_tol,
        params=params,
        config=config,
    )


def polyline_points(problem: CpcProblem) -> np.ndarray:
    pts = [problem.start_state.p] + [w for w in problem.waypoints]
    if np.linalg.norm(problem.waypoints[-1] - problem.end_state.p) > COINCIDENT_TOL:
        pts.append(problem.end_state.p)
    return np.asarray(pts)


# ---------------------------------------------------------------------------
# Transcription
# ---------------------------------------------------------------------------

class _Transcription:
    def __init__(self, problem: CpcProblem):
        self.prob = problem
        self.params = problem.params
        self.N = problem.node_count
        self.W = len(problem.waypoints)
        N, W, p = self.N, self.W, self.params

        self.s_x = np.concatenate(
            [np.ones(3), np.full(3, problem.config.v_scale), np.ones(4), np.full(3, p.omega_max)]
        )
        self.s_u = np.concatenate([[p.thrust_max], np.full(3, p.torque_max)])
        self.s_nu = problem.d_tol ** 2

        self.off_x = 1
        self.off_u = 1 + 13 * (N - 1)
        self.off_mu = self.off_u + 4 * N
        self.off_nu = self.off_mu + W * N
        self.n = self.off_nu + W * N

        self.x0 = problem.start_state.as_vector()
        self.xN = problem.end_state.as_vector()

        self.n_eq = 13 * N + (N - 1) + W
        self.n_ord = (W - 1) * N
        self.n_in = 2 * W * N + self.n_ord

        self.P = problem.waypoints
        self.head_mask = np.isfinite(problem.headings)
        self.psi_w = np.where(self.head_mask, problem.headings, 0.0)

        cfg = problem.config
        t_guess = max(cfg.t_min, float(np.sum(np.linalg.norm(np.diff(polyline_points(problem), axis=0), axis=1))) / cfg.guess_speed)
        self.t_max = max(10.0, 3.0 * t_guess)

        lb = np.empty(self.n)
        ub = np.empty(self.n)
        lb[0], ub[0] = cfg.t_min, self.t_max
        xlb = np.concatenate([np.full(3, -1e3), np.full(3, -cfg.v_cap / cfg.v_scale), np.full(4, -1.2), np.full(3, -1.0)])
        xub = -xlb
        lb[self.off_x:self.off_u] = np.tile(xlb, N - 1)
        ub[self.off_x:self.off_u] = np.tile(xub, N - 1)
        ulb = np.array([p.thrust_min / p.thrust_max, -1.0, -1.0, -1.0])
        uub = np.array([1.0, 1.0, 1.0, 1.0])
        lb[self.off_u:self.off_mu] = np.tile(ulb, N)
        ub[self.off_u:self.off_mu] = np.tile(uub, N)
        lb[self.off_mu:self.off_nu] = 0.0
        ub[self.off_mu:self.off_nu] = 1.0
        lb[self.off_nu:] = 0.0
        ub[self.off_nu:] = 1.0
        self.bounds = (lb, ub)

    # -- packing -----------------------------------------------------------

    def pack(self, t, X, U, MU, NU) -> np.ndarray:
        z = np.empty(self.n)
        z[0] = t
        z[self.off_x:self.off_u] = (X[1:self.N] / self.s_x).ravel()
        z[self.off_u:self.off_mu] = (U / self.s_u).ravel()
        z[self.off_mu:self.off_nu] = MU.ravel()
        z[self.off_nu:] = (NU / self.s_nu).ravel()
        return z

    def unpack(self, z):
        N, W = self.N, self.W
        t = float(z[0])
        X = np.empty((N + 1, 13))
        X[0] = self.x0
        X[N] = self.xN
        X[1:N] = z[self.off_x:self.off_u].reshape(N - 1, 13) * self.s_x
        U = z[self.off_u:self.off_mu].reshape(N, 4) * self.s_u
        MU = z[self.off_mu:self.off_nu].reshape(W, N)
        NU = z[self.off_nu:].reshape(W, N) * self.s_nu
        return t, X, U, MU, NU

    # -- initial guess ------------------------------------------------------

    def initial_z(self) -> np.ndarray:
        """Dynamically consistent warm start.

        A rest-to-rest minimum-jerk spline through the mission polyline at
        the guess speed provides smooth flat outputs; the flatness map
        turns them into attitudes, body rates, and thrust, and torques come
        from inverse rotational dynamics.  Progress decrements start as
        normalized triangular bumps around each waypoint's passage node.
        """
        from .polytraj import flat_to_attitude, min_jerk_spline

        prob, cfg = self.prob, self.prob.config
        N, W = self.N, self.W
        params = self.params
        pts = polyline_points(prob)
        seg_len = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        durations = np.maximum(seg_len / cfg.guess_speed, 0.05)
        spline = min_jerk_spline(pts, durations)
        t0 = max(2.0 * cfg.t_min, spline.total_time)
        ts = np.linspace(0.0, spline.total_time, N + 1)
        p, v, a, jerk = spline.eval(ts)

        yaw0 = dyn.quat_yaw(prob.start_state.q)
        yaw1 = yaw0 + dyn.wrap_angle(dyn.quat_yaw(prob.end_state.q) - yaw0)
        yaws = yaw0 + (yaw1 - yaw0) * np.linspace(0, 1, N + 1)
        yaw_rate = np.full(N + 1, (yaw1 - yaw0) / t0)
        q, thrust, omega = flat_to_attitude(v, a, jerk, yaws, yaw_rate, params)

        X = np.empty((N + 1, 13))
        X[:, SP] = p
        X[:, SV] = np.clip(v, -0.9 * cfg.v_cap, 0.9 * cfg.v_cap)
        X[:, SQ] = q
        X[:, SW] = np.clip(omega, -0.9 * params.omega_max, 0.9 * params.omega_max)
        X[0] = self.x0
        X[N] = self.xN

        h = t0 / N
        omdot = np.diff(X[:, SW], axis=0) / h
        J = params.inertia_diag
        tau = J * omdot + np.cross(X[:N, SW], J * X[:N, SW])
        U = np.empty((N, 4))
        U[:, 0] = np.clip(thrust[:N], params.thrust_min, params.thrust_max)
        U[:, 1:] = np.clip(tau, -0.9 * params.torque_max, 0.9 * params.torque_max)

        MU = np.zeros((W, N))
        NU = np.zeros((W, N))
        pass_times = np.cumsum(durations)
        half = max(3, N // 20)
        for j in range(W):
            kj = int(round(pass_times[j] / spline.total_time * N))
            kj = min(max(kj, 0), N - 1)
            ks = np.arange(max(0, kj - half), min(N, kj + half + 1))
            wgt = half + 1 - np.abs(ks - kj)
            MU[j, ks] = wgt / wgt.sum()
            d2 = np.sum((X[:N, SP] - prob.waypoints[j]) ** 2, axis=1)
            NU[j] = np.minimum(d2, prob.d_tol ** 2)
        return self.pack(t0, X, U, MU, NU)

    def z_from_solution(self, sol: CpcSolution) -> np.ndarray:
        return self.pack(sol.t_total, sol.states, sol.inputs[: self.N], sol.mu[:, : self.N], sol.nu[:, : self.N])

    # -- constraint evaluation ----------------------------------------------

    def residual_blocks(self, z, eps):
        """Raw (unweighted) constraint blocks; used by the solver report."""
        _, _, _, c_eq, g_in = self._evaluate(z, eps, need_grad=False)
        return c_eq, g_in

    def make_fused(self, eps: float, time_weight: Optional[float] = None):
        w_t = self.prob.config.time_weight if time_weight is None else time_weight

        def fused(z, y_eq, y_in, rho):
            val, grad, parts, c_eq, g_in = self._evaluate(z, eps, need_grad=True, y_eq=y_eq, y_in=y_in, rho=rho, w_t=w_t)
            return val, grad, c_eq, g_in

        return fused

    def _evaluate(self, z, eps, need_grad, y_eq=None, y_in=None, rho=None, w_t=1.0):
        N, W = self.N, self.W
        prob = self.prob
        t, X, U, MU, NU = self.unpack(z)
        h = t / N

        Phi, A, B, dPhi_dh = dyn.rk4_sens_batch(X[:N], U, h, self.params)

        c_dyn = (X[1:] - Phi) / self.s_x
        q_int = X[1:N, SQ]
        c_qn = np.einsum("ki,ki->k", q_int, q_int) - 1.0
        c_sum = MU.sum(axis=1) - 1.0
        c_eq = np.concatenate([c_dyn.ravel(), c_qn, c_sum])

        Xp = X[:N, SP]
        dvec = Xp[None, :, :] - self.P[:, None, :]
        d2 = np.einsum("wkd,wkd->wk", dvec, dvec)
        if self.head_mask.any():
            yaw = dyn.quat_yaw(X[:N, SQ])
            err = np.where(
                self.head_mask[:, None],
                np.arctan2(np.sin(yaw[None, :] - self.psi_w[:, None]), np.cos(yaw[None, :] - self.psi_w[:, None])),
                0.0,
            )
            d2 = d2 + err ** 2
        hcomp = MU * (d2 - NU)
        g_plus = hcomp - eps
        g_minus = -hcomp - eps
        if W > 1:
            C = np.cumsum(MU, axis=1)
            g_ord = (C[1:] - C[:-1]).ravel()
        else:
            g_ord = np.zeros(0)
        g_in = np.concatenate([g_plus.ravel(), g_minus.ravel(), g_ord])

        if not need_grad:
            return None, None, None, c_eq, g_in

        w_eq = y_eq + rho * c_eq
        t_in = np.maximum(0.0, y_in + rho * g_in)
        val = (
            w_t * t
            + float(y_eq @ c_eq)
            + 0.5 * rho * float(c_eq @ c_eq)
            + float(t_in @ t_in - y_in @ y_in) / (2.0 * rho)
        )

        gX = np.zeros((N + 1, 13))
        gU = np.zeros((N, 4))
        gMU = np.zeros((W, N))
        gNU = np.zeros((W, N))
        g_t = w_t

        wd = w_eq[: 13 * N].reshape(N, 13) / self.s_x
        gX[1:] += wd
        gX[:N] -= np.einsum("kij,ki->kj", A, wd)
        gU -= np.einsum("kij,ki->kj", B, wd)
        g_t -= float(np.einsum("ki,ki->", dPhi_dh, wd)) / N

        w_qn = w_eq[13 * N: 13 * N + (N - 1)]
        gX[1:N, SQ] += 2.0 * w_qn[:, None] * q_int

        w_sum = w_eq[13 * N + (N - 1):]
        gMU += w_sum[:, None]

        a_plus = t_in[: W * N].reshape(W, N)
        a_minus = t_in[W * N: 2 * W * N].reshape(W, N)
        alpha = a_plus - a_minus
        gMU += alpha * (d2 - NU)
        gNU -= alpha * MU
        coef = alpha * MU
        gX[:N, SP] += 2.0 * np.einsum("wk,wkd->kd", coef, dvec)
        if self.head_mask.any():
            q = X[:N, SQ]
            w_, x_, y_, z_ = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
            s = 2 * (w_ * z_ + x_ * y_)
            c = 1 - 2 * (y_ * y_ + z_ * z_)
            den = s * s + c * c
            dpsi = np.stack(
                [
                    (c * 2 * z_) / den,
                    (c * 2 * y_) / den,
                    (c * 2 * x_ + s * 4 * y_) / den,
                    (c * 2 * w_ + s * 4 * z_) / den,
                ],
                axis=-1,
            )
            wsum = np.einsum("wk,wk->k", coef, 2.0 * err)
            gX[:N, SQ] += wsum[:, None] * dpsi

        if W > 1:
            t_ord = t_in[2 * W * N:].reshape(W - 1, N)
            rev = np.cumsum(t_ord[:, ::-1], axis=1)[:, ::-1]
            gMU[1:] += rev
            gMU[:-1] -= rev

        grad = np.empty(self.n)
        grad[0] = g_t
        grad[self.off_x:self.off_u] = (gX[1:N] * self.s_x).ravel()
        grad[self.off_u:self.off_mu] = (gU * self.s_u).ravel()
        grad[self.off_mu:self.off_nu] = gMU.ravel()
        grad[self.off_nu:] = (gNU * self.s_nu).ravel()
        return val, grad, None, c_eq, g_in


# ---------------------------------------------------------------------------
# Solving
# ---------------------------------------------------------------------------

def _solution_from_z(tr: _Transcription, z, residuals, converged, solve_time, n_outer, n_evals, multipliers) -> CpcSolution:
    N, W = tr.N, tr.W
    prob = tr.prob
    t, X, U, MU, NU = tr.unpack(z)

    inputs = np.vstack([U, [np.concatenate([[tr.params.hover_thrust], np.zeros(3)])]])
    lam = np.empty((W, N + 1))
    lam[:, 0] = 1.0
    lam[:, 1:] = 1.0 - np.cumsum(MU, axis=1)
    mu = np.hstack([MU, np.zeros((W, 1))])
    d2_end = np.sum((X[N, SP] - prob.waypoints) ** 2, axis=1)
    nu = np.hstack([NU, np.minimum(d2_end, prob.d_tol ** 2)[:, None]])

    return CpcSolution(
        t_total=t,
        dt=t / N,
        states=X,
        inputs=inputs,
        lam=lam,
        mu=mu,
        nu=nu,
        waypoints=prob.waypoints.copy(),
        headings=prob.headings.copy(),
        residuals=residuals,
        converged=converged,
        solve_time=solve_time,
        n_outer=n_outer,
        n_evals=n_evals,
        multipliers=multipliers,
    )


def _residual_summary(tr: _Transcription, z, eps_final) -> dict:
    c_eq, g_in = tr.residual_blocks(z, eps_final)
    N, W = tr.N, tr.W
    c_dyn = np.abs(c_eq[: 13 * N])
    c_qn = np.abs(c_eq[13 * N: 13 * N + (N - 1)]) if N > 1 else np.zeros(1)
    c_sum = np.abs(c_eq[13 * N + (N - 1):])
    comp = np.abs(g_in[: W * N] + eps_final)  # |h| = g_plus + eps
    bound_viol = float(np.max(np.maximum(g_in[2 * W * N:], 0.0))) if g_in.size > 2 * W * N else 0.0
    return {
        "dynamics": float(c_dyn.max() if c_dyn.size else 0.0),
        "quat_norm": float(c_qn.max() if c_qn.size else 0.0),
        "progress_sum": float(c_sum.max() if c_sum.size else 0.0),
        "complementarity": float(comp.max() if comp.size else 0.0),
        "ordering": bound_viol,
    }


def solve(problem: CpcProblem, initial_guess: Optional[CpcSolution] = None) -> CpcSolution:
    """Minimize total time subject to dynamics and progress constraints.

    Returns the best iterate with a residual report even when not
    converged; hard numerical failure raises ``SolverFailureError``.
    """
    cfg = problem.config
    tr = _Transcription(problem)
    t_start = time.perf_counter()

    schedule = list(cfg.relax_schedule)
    eps_final = schedule[-1]

    y_eq = None
    y_in = None
    rho = None
    start_stage = 0
    warm = False
    if initial_guess is not None:
        z = tr.z_from_solution(initial_guess)
        if initial_guess.multipliers is not None:
            m = initial_guess.multipliers
            if m["y_eq"].shape == (tr.n_eq,) and m["y_in"].shape == (tr.n_in,):
                y_eq, y_in, rho = m["y_eq"].copy(), m["y_in"].copy(), m["rho"]
                warm = True
        comp0 = _residual_summary(tr, z, eps_final)["complementarity"]
        for si, eps in enumerate(schedule):
            if comp0 <= eps * (1 + 1e-9):
                start_stage = si
        # Start at the tightest stage whose relaxation the guess already meets.
    else:
        z = tr.initial_z()

    n_outer = 0
    n_evals = 0
    converged = False

    if not warm:
        # Feasibility projection: settle onto the dynamics manifold near the
        # guess before any time pressure is applied.
        opts = AugLagOptions(
            rho_init=cfg.rho_init,
            feas_tol=cfg.feas_tol,
            max_outer=cfg.max_outer_stage,
            inner_maxiter=cfg.inner_maxiter,
            ftol=cfg.lbfgs_ftol,
            pgtol=cfg.lbfgs_pgtol,
        )
        res = solve_auglag(
            tr.make_fused(schedule[0], time_weight=0.0), z, tr.bounds, tr.n_eq, tr.n_in, opts
        )
        z = res.z
        n_outer += res.n_outer
        n_evals += res.n_evals

    for si in range(start_stage, len(schedule)):
        eps = schedule[si]
        last = si == len(schedule) - 1
        feas = cfg.feas_tol if last else max(cfg.feas_tol, cfg.stage_feas_tol)
        opts = AugLagOptions(
            rho_init=(rho if warm and rho is not None else cfg.rho_init),
            feas_tol=feas,
            max_outer=cfg.max_outer_final if last else cfg.max_outer_stage,
            inner_maxiter=cfg.inner_maxiter_final if last else cfg.inner_maxiter,
            ftol=cfg.lbfgs_ftol,
            pgtol=cfg.lbfgs_pgtol,
        )
        # Tighten the relaxation handed to the subproblem so the reported
        # residual lands strictly inside the schedule value even with the
        # allowed AL feasibility overshoot.
        eps_eff = max(0.5 * eps, eps - 4.0 * feas)
        res = solve_auglag(
            tr.make_fused(eps_eff), z, tr.bounds, tr.n_eq, tr.n_in, opts,
            y_eq0=y_eq if warm else None, y_in0=y_in if warm else None,
            rho0=rho if warm else None,
        )
        z, y_eq, y_in = res.z, res.y_eq, res.y_in
        rho = min(res.rho, cfg.rho_carry_max)
        warm = False  # multipliers are re-estimated at each new relaxation level
        n_outer += res.n_outer
        n_evals += res.n_evals
        if last:
            converged = res.converged

    if not converged:
        # Feasibility epilogue: freeze the optimized time and project the
        # iterate onto the constraint manifold (multipliers continue at the
        # final relaxation level).  Cheap because the time pressure is gone.
        lb, ub = tr.bounds
        lb2, ub2 = lb.copy(), ub.copy()
        lb2[0] = ub2[0] = z[0]
        feas = cfg.feas_tol
        eps_eff = max(0.5 * eps_final, eps_final - 4.0 * feas)
        opts = AugLagOptions(
            rho_init=max(cfg.rho_init * 10.0, rho if rho is not None else 0.0),
            feas_tol=feas,
            max_outer=cfg.max_outer_final,
            inner_maxiter=cfg.inner_maxiter_final,
            ftol=cfg.lbfgs_ftol,
            pgtol=cfg.lbfgs_pgtol,
        )
        res = solve_auglag(
            tr.make_fused(eps_eff, time_weight=0.0), z, (lb2, ub2), tr.n_eq, tr.n_in, opts,
            y_eq0=y_eq, y_in0=y_in,
        )
        z, y_eq, y_in = res.z, res.y_eq, res.y_in
        rho = min(res.rho, cfg.rho_carry_max)
        n_outer += res.n_outer
        n_evals += res.n_evals
        converged = res.converged

    solve_time = time.perf_counter() - t_start
    residuals = _residual_summary(tr, z, eps_final)
    multipliers = {"y_eq": y_eq, "y_in": y_in, "rho": rho}
    return _solution_from_z(tr, z, residuals, converged, solve_time, n_outer, n_evals, multipliers)


def solve_with_heading(problem: CpcProblem, initial_guess: Optional[CpcSolution] = None) -> CpcSolution:
    """Solve with per-waypoint yaw targets folded into the tolerance ball."""
    if not np.any(np.isfinite(problem.headings)):
        raise InvalidInputError("solve_with_heading requires at least one waypoint heading")
    wrapped = np.where(np.isfinite(problem.headings), dyn.wrap_angle(problem.headings), np.nan)
    return solve(replace(problem, headings=wrapped), initial_guess)


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

def verify(
    solution: CpcSolution,
    problem: CpcProblem,
    tol: float = 1e-4,
    sat_threshold: float = 0.01,
    sat_min_frac: float = 0.3,
) -> FeasibilityReport:
    """Independent feasibility audit of a solution against its problem."""
    N = solution.node_count
    X = solution.states
    U = solution.inputs[:N]
    h = solution.t_total / N
    p = problem.params

    Phi = dyn.rk4_batch(X[:N], U, h, p)
    defect = float(np.max(np.abs(X[1:] - Phi)))
    qn = float(np.max(np.abs(np.linalg.norm(X[:, SQ], axis=1) - 1.0)))

    lam, mu, nu = solution.lam, solution.mu, solution.nu
    d2 = np.sum((X[:, SP][None, :, :] - problem.waypoints[:, None, :]) ** 2, axis=2)
    if np.any(np.isfinite(problem.headings)):
        yaw = dyn.quat_yaw(X[:, SQ])
        mask = np.isfinite(problem.headings)
        err = np.zeros_like(d2)
        err[mask] = dyn.wrap_angle(yaw[None, :] - problem.headings[mask][:, None])
        d2 = d2 + err ** 2
    comp = float(np.max(np.abs(mu * (d2 - nu))))

    bound_viol = max(
        float(np.max(np.maximum(U[:, 0] - p.thrust_max, 0.0), initial=0.0)),
        float(np.max(np.maximum(p.thrust_min - U[:, 0], 0.0), initial=0.0)),
        float(np.max(np.abs(U[:, 1:]) - p.torque_max, initial=0.0)),
        float(np.max(np.abs(X[:, SW]) - p.omega_max, initial=0.0)),
        float(np.max(-mu, initial=0.0)),
        float(np.max(nu - problem.d_tol ** 2, initial=0.0)),
        float(np.max(-nu, initial=0.0)),
        float(np.max(np.abs(mu.sum(axis=1) - 1.0), initial=0.0)),
    )

    monotone = bool(np.all(np.diff(lam, axis=1) <= 1e-9))
    dist = np.sqrt(np.sum((X[:, SP][None, :, :] - problem.waypoints[:, None, :]) ** 2, axis=2))
    min_dist = dist.min(axis=1)

    thr_span = p.thrust_max - p.thrust_min
    sat_T = (U[:, 0] >= p.thrust_max - sat_threshold * thr_span) | (U[:, 0] <= p.thrust_min + sat_threshold * thr_span)
    sat_tau = np.max(np.abs(U[:, 1:]), axis=1) >= (1 - sat_threshold) * p.torque_max
    sat_w = np.max(np.abs(X[:N, SW]), axis=1) >= (1 - sat_threshold) * p.omega_max
    sat_frac = float(np.mean(sat_T | sat_tau | sat_w))

    passed = (
        defect <= tol
        and comp <= max(tol, problem.config.relax_schedule[-1])
        and bound_viol <= tol
        and monotone
        and bool(np.all(min_dist <= problem.d_tol + 1e-6))
        and sat_frac >= sat_min_frac
    )
    return FeasibilityReport(
        max_dynamics_defect=defect,
        max_complementarity=comp,
        max_bound_violation=bound_viol,
        max_quat_norm_error=qn,
        min_waypoint_distance=min_dist,
        lambda_monotone=monotone,
        saturation_fraction=sat_frac,
        passed=passed,
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_solution(sol: CpcSolution, base_path: str, config_hash: str = "", seed: int = 0) -> None:
    """Write ``<base>.csv`` (one row per node) and ``<base>.json`` sidecar.

    Timing is deliberately kept out of both files so that re-runs are
    byte-identical; wall-clock numbers live in the run-level timing file.
    """
    from . import __version__

    N = sol.node_count
    W = sol.waypoints.shape[0]
    cols = ["t", "px", "py", "pz", "vx", "vy", "vz", "qw", "qx", "qy", "qz", "wx", "wy", "wz", "thrust", "taux", "tauy", "tauz"]
    for j in range(W):
        cols += [f"lam{j}", f"mu{j}", f"nu{j}"]
    rows = np.hstack(
        [sol.times[:, None], sol.states, sol.inputs]
        + [np.column_stack([sol.lam[j], sol.mu[j], sol.nu[j]]) for j in range(W)]
    )
    with open(base_path + ".csv", "w") as f:
        f.write(",".join(cols) + "\n")
        for r in rows:
            f.write(",".join(repr(float(v)) for v in r) + "\n")

    meta = {
        "t_total": sol.t_total,
        "dt": sol.dt,
        "node_count": N,
        "waypoints": sol.waypoints.tolist(),
        "headings": [None if not np.isfinite(h) else float(h) for h in sol.headings],
        "residuals": sol.residuals,
        "converged": sol.converged,
        "n_outer": sol.n_outer,
        "config_hash": config_hash or sol.config_hash,
        "seed": seed,
        "version": __version__,
    }
    with open(base_path + ".json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def load_solution(base_path: str) -> CpcSolution:
    with open(base_path + ".json") as f:
        meta = json.load(f)
    data = np.loadtxt(base_path + ".csv", delimiter=",", skiprows=1)
    N = meta["node_count"]
    W = len(meta["waypoints"])
    states = data[:, 1:14]
    inputs = data[:, 14:18]
    lam = np.stack([data[:, 18 + 3 * j] for j in range(W)])
    mu = np.stack([data[:, 19 + 3 * j] for j in range(W)])
    nu = np.stack([data[:, 20 + 3 * j] for j in range(W)])
    headings = np.array([np.nan if h is None else h for h in meta["headings"]])
    return CpcSolution(
        t_total=meta["t_total"],
        dt=meta["dt"],
        states=states,
        inputs=inputs,
        lam=lam,
        mu=mu,
        nu=nu,
        waypoints=np.asarray(meta["waypoints"], dtype=float),
        headings=headings,
        residuals=meta["residuals"],
        converged=meta["converged"],
        solve_time=0.0,
        n_outer=meta["n_outer"],
        n_evals=0,
        config_hash=meta.get("config_hash", ""),
    )
