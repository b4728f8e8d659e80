"""Augmented-Lagrangian solver with an L-BFGS-B inner minimizer.

Handles problems of the form

    min f(z)   s.t.  c(z) = 0,  g(z) <= 0,  lb <= z <= ub

via the classic method of multipliers: the inner subproblem

    min f + y_eq.c + rho/2 |c|^2 + 1/(2 rho) (max(0, y_in + rho g)^2 - y_in^2)

is minimized over the box by scipy's L-BFGS-B, after which multipliers are
updated (y_eq += rho c, y_in = max(0, y_in + rho g)) when feasibility
improved, and rho is increased otherwise (LANCELOT-style switch).

The problem supplies one fused callback so expensive shared work
(constraint values and Jacobian-transpose products) is done in a single
pass:

    fused(z, y_eq, y_in, rho) -> (al_value, al_grad, c_eq, g_in)

The callback owns the AL formula; this module owns the outer loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from .errors import SolverFailureError

FusedEval = Callable[[np.ndarray, np.ndarray, np.ndarray, float], tuple]


@dataclass
class AugLagOptions:
    rho_init: float = 10.0
    rho_factor: float = 5.0
    rho_max: float = 1e6
    feas_tol: float = 1e-6
    max_outer: int = 12
    inner_maxiter: int = 300
    improvement_ratio: float = 0.5
    lbfgs_m: int = 30
    pgtol: float = 1e-8
    ftol: float = 1e-12


@dataclass
class AugLagResult:
    z: np.ndarray
    y_eq: np.ndarray
    y_in: np.ndarray
    rho: float
    n_outer: int
    n_evals: int
    max_eq_violation: float
    max_in_violation: float
    converged: bool
    history: list = field(default_factory=list)


def _feasibility(c_eq: np.ndarray, g_in: np.ndarray) -> tuple[float, float]:
    eq = float(np.max(np.abs(c_eq))) if c_eq.size else 0.0
    ineq = float(np.max(np.maximum(g_in, 0.0))) if g_in.size else 0.0
    return eq, ineq


def solve_auglag(
    fused: FusedEval,
    z0: np.ndarray,
    bounds: tuple[np.ndarray, np.ndarray],
    n_eq: int,
    n_in: int,
    options: AugLagOptions | None = None,
    y_eq0: np.ndarray | None = None,
    y_in0: np.ndarray | None = None,
    rho0: float | None = None,
) -> AugLagResult:
    opts = options or AugLagOptions()
    z = np.asarray(z0, dtype=float).copy()
    y_eq = np.zeros(n_eq) if y_eq0 is None else np.asarray(y_eq0, float).copy()
    y_in = np.zeros(n_in) if y_in0 is None else np.asarray(y_in0, float).copy()
    rho = opts.rho_init if rho0 is None else float(rho0)
    lb, ub = bounds
    bound_pairs = list(zip(lb, ub))

    evals = 0

    def inner_obj(zz):
        nonlocal evals
        evals += 1
        val, grad, _, _ = fused(zz, y_eq, y_in, rho)
        if not np.isfinite(val) or not np.all(np.isfinite(grad)):
            raise SolverFailureError("non-finite value in augmented-Lagrangian inner problem")
        return val, grad

    history = []
    prev_feas = np.inf
    converged = False
    n_outer = 0

    for n_outer in range(1, opts.max_outer + 1):
        res = minimize(
            inner_obj,
            z,
            jac=True,
            method="L-BFGS-B",
            bounds=bound_pairs,
            options={
                "maxiter": opts.inner_maxiter,
                "maxcor": opts.lbfgs_m,
                "gtol": opts.pgtol,
                "ftol": opts.ftol,
            },
        )
        z = res.x
        if not np.all(np.isfinite(z)):
            raise SolverFailureError("non-finite iterate from inner minimizer")

        _, _, c_eq, g_in = fused(z, y_eq, y_in, rho)
        evals += 1
        eq_v, in_v = _feasibility(c_eq, g_in)
        feas = max(eq_v, in_v)
        history.append({"outer": n_outer, "feas": feas, "rho": rho, "inner_iters": res.nit})

        if feas <= opts.feas_tol:
            converged = True
            # Final multiplier refresh so warm starts resume from a KKT-ish point.
            y_eq = y_eq + rho * c_eq
            y_in = np.maximum(0.0, y_in + rho * g_in)
            break

        if feas <= opts.improvement_ratio * prev_feas:
            y_eq = y_eq + rho * c_eq
            y_in = np.maximum(0.0, y_in + rho * g_in)
            prev_feas = feas
        else:
            rho = min(rho * opts.rho_factor, opts.rho_max)

    _, _, c_eq, g_in = fused(z, y_eq, y_in, rho)
    evals += 1
    eq_v, in_v = _feasibility(c_eq, g_in)

    return AugLagResult(
        z=z,
        y_eq=y_eq,
        y_in=y_in,
        rho=rho,
        n_outer=n_outer,
        n_evals=evals,
        max_eq_violation=eq_v,
        max_in_violation=in_v,
        converged=converged,
        history=history,
    )


def make_fused_from_parts(
    objective: Callable[[np.ndarray], tuple[float, np.ndarray]],
    eq_cons: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]] | None,
    in_cons: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]] | None,
) -> FusedEval:
    """Build a fused callback from separate dense-Jacobian pieces.

    Convenience for small problems and tests; the trajectory transcription
    implements its own fused callback with structured Jacobian products.
    Constraint callables return ``(values, jacobian)`` with jacobian shape
    ``(m, n)``.
    """

    def fused(z, y_eq, y_in, rho):
        f, gf = objective(z)
        val = f
        grad = gf.copy()
        c = np.zeros(0)
        g = np.zeros(0)
        if eq_cons is not None:
            c, Jc = eq_cons(z)
            w = y_eq + rho * c
            val += float(y_eq @ c + 0.5 * rho * (c @ c))
            grad += Jc.T @ w
        if in_cons is not None:
            g, Jg = in_cons(z)
            t = np.maximum(0.0, y_in + rho * g)
            val += float((t @ t - y_in @ y_in) / (2.0 * rho))
            grad += Jg.T @ t
        return val, grad, c, g

    return fused
