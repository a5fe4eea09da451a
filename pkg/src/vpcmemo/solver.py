"""Warm-startable constrained minimizer: bounds plus smooth inequality constraints.

Backed by SciPy's SLSQP. The wrapper owns the contract: warm starts are
clipped into the bounds, success requires both solver convergence and
feasibility within ``feasibility_tol``, and a returned feasible point is
never worse than a feasible warm start by more than ``optimality_tol``
(the warm start itself is handed back if the solver drifted uphill).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize as scipy_minimize

from .errors import NumericalFailure


@dataclass(frozen=True)
class SolverConfig:
    optimality_tol: float = 1e-3
    max_iterations: int = 10
    feasibility_tol: float = 1e-6
    finite_diff_step: float = 1e-6

    def __post_init__(self):
        if min(self.optimality_tol, self.feasibility_tol, self.finite_diff_step) <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class SolverResult:
    solution: np.ndarray
    cost: float
    success: bool
    iterations: int
    solve_time: float
    max_violation: float
    message: str = ""


def finite_diff_gradient(f: Callable[[np.ndarray], float], x: np.ndarray,
                         step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient with a relative step per coordinate."""
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for i in range(x.size):
        h = step * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fp, fm = f(xp), f(xm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalFailure(f"non-finite objective near coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def _constraint_violation(residuals: Optional[np.ndarray]) -> float:
    if residuals is None or residuals.size == 0:
        return 0.0
    return float(max(0.0, -np.min(residuals)))


def minimize(objective: Callable[[np.ndarray], float],
             gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None,
             bounds: Optional[Sequence[tuple[float, float]]] = None,
             ineq_constraints: Optional[Callable[[np.ndarray], np.ndarray]] = None,
             warm_start: np.ndarray = None,
             cfg: SolverConfig = SolverConfig(),
             ineq_jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None,
             ) -> SolverResult:
    """Minimize the objective subject to bounds and residual >= 0 constraints.

    ``ineq_jacobian`` is an optional analytic Jacobian of the residual vector;
    without it (or without ``gradient``) central differences are used.
    Deterministic: identical inputs give identical results.
    """
    x0 = np.asarray(warm_start, dtype=float).copy()
    if bounds is not None:
        lo = np.array([b[0] for b in bounds])
        hi = np.array([b[1] for b in bounds])
        x0 = np.clip(x0, lo, hi)

    def fun(x):
        val = float(objective(x))
        if not np.isfinite(val):
            raise NumericalFailure("objective evaluated to a non-finite value")
        return val

    if gradient is not None:
        def jac(x):
            g = np.asarray(gradient(x), dtype=float)
            if not np.all(np.isfinite(g)):
                raise NumericalFailure("gradient evaluated to a non-finite value")
            return g
    else:
        def jac(x):
            return finite_diff_gradient(fun, x, cfg.finite_diff_step)

    constraints = []
    if ineq_constraints is not None:
        con = {"type": "ineq", "fun": lambda x: np.asarray(ineq_constraints(x), dtype=float)}
        if ineq_jacobian is not None:
            con["jac"] = lambda x: np.asarray(ineq_jacobian(x), dtype=float)
        constraints.append(con)

    f0 = fun(x0)
    t0 = time.perf_counter()
    res = scipy_minimize(fun, x0, jac=jac, bounds=bounds, constraints=constraints,
                         method="SLSQP",
                         options={"maxiter": cfg.max_iterations,
                                  "ftol": cfg.optimality_tol})
    elapsed = time.perf_counter() - t0

    x = np.asarray(res.x, dtype=float)
    if bounds is not None:
        x = np.clip(x, lo, hi)  # SLSQP can overshoot bounds by rounding noise
    violation = _constraint_violation(
        np.asarray(ineq_constraints(x), dtype=float) if ineq_constraints is not None else None)
    cost = fun(x)
    success = bool(res.status == 0) and violation <= cfg.feasibility_tol
    message = res.message

    # Monotone-improvement safeguard: never hand back a feasible point that is
    # worse than a feasible warm start.
    warm_violation = _constraint_violation(
        np.asarray(ineq_constraints(x0), dtype=float) if ineq_constraints is not None else None)
    if (warm_violation <= cfg.feasibility_tol
            and violation <= cfg.feasibility_tol
            and cost > f0 + cfg.optimality_tol):
        x, cost, violation = x0, f0, warm_violation
        success = False
        message = "solver drifted above the warm start; warm start returned"

    return SolverResult(solution=x, cost=cost, success=success,
                        iterations=int(res.nit), solve_time=elapsed,
                        max_violation=violation, message=message)
