"""Receding-horizon loop: measure, pick a warm-start strategy, solve, apply.

Each control cycle solves the preview-window problem once. Far from the
visibility constraints the previous-iteration solution warm-starts the solver
and the final target is the goal; close to a keep-out, memory-based
strategies query the trajectory store for a warm start and a way point that
temporarily replaces the goal in the cost.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from . import camera, regress, solver
from .camera import CameraPose, Twist
from .errors import NonPositiveDepth, NumericalFailure
from .model import (ControlSequence, FeatureModel, desired_features,
                    max_violation_px, min_distance_to_regions,
                    stacked_visibility_jacobian, stacked_visibility_residuals,
                    vpc_cost_and_gradient, visual_config_vector)
from .scenario import Scenario
from .solver import SolverConfig, SolverResult

# Solver exits more violating than this (in pixel-comparable residual units)
# are replaced by the feasible warm start when one exists.
VIOLATION_FALLBACK_PX = 1.0

# Constraint tightening for the preview problem: predicted states must keep
# this much clearance (same units), absorbing the first-order model error so
# the measured path does not graze its way into a region.
SOLVER_MARGIN_PX = 3.0


class VpcProblem:
    """Solver-facing view of one control cycle's optimization problem.

    All four callbacks (cost, gradient, residuals, residual Jacobian) share a
    single rollout, memoized on the last evaluated point.
    """

    def __init__(self, s_k: np.ndarray, target: np.ndarray, scenario: Scenario,
                 horizon: int, n_free: int, r_scale: float = 1.0,
                 epsilon: Optional[np.ndarray] = None):
        self.s_k = np.asarray(s_k, dtype=float)
        self.s_d = (desired_features(target, epsilon) if epsilon is not None
                    else np.asarray(target, dtype=float))
        self.model = FeatureModel(scenario.intrinsics, scenario.goal_depths, scenario.Ts)
        self.regions = scenario.regions()
        self.weights = scenario.weights
        self.horizon = horizon
        self.n_free = n_free
        self.r_scale = r_scale
        # Tighten every constraint to a safety margin, but never beyond what
        # the measured state already satisfies: a zero command stays feasible
        # whether the state is clear, grazing, or slightly inside.
        current = stacked_visibility_residuals(self.s_k[None, :], self.regions)
        self.shifts = np.minimum(SOLVER_MARGIN_PX, current) if current.size else None
        # Two memo tiers: line-search points only need values, so the
        # Jacobian work is done once per accepted iterate.
        self._key_v: Optional[bytes] = None
        self._val_v: tuple = ()
        self._key_f: Optional[bytes] = None
        self._val_f: tuple = ()

    def _seq(self, z: np.ndarray) -> ControlSequence:
        return ControlSequence.from_flat(np.asarray(z, dtype=float),
                                         z.size // self.n_free, self.horizon)

    def _values(self, z: np.ndarray):
        z = np.asarray(z, dtype=float)
        key = z.tobytes()
        if key == self._key_v:
            return self._val_v
        controls = self._seq(z).expanded()
        states = self.model.rollout(self.s_k, controls)
        err = self.s_d - states
        cost = float(np.einsum("ij,jk,ik->", err, self.weights.Q, err))
        R_eff = self.r_scale * self.weights.R
        cost += float(np.einsum("ij,jk,ik->", controls, R_eff, controls))
        res = stacked_visibility_residuals(states, self.regions, self.shifts)
        self._key_v, self._val_v = key, (cost, res)
        return self._val_v

    def _full(self, z: np.ndarray):
        z = np.asarray(z, dtype=float)
        key = z.tobytes()
        if key == self._key_f:
            return self._val_f
        cost, grad, states, jacs = vpc_cost_and_gradient(
            z, self.s_k, self.s_d, self.model, self.weights,
            self.horizon, self.n_free, self.r_scale)
        res = stacked_visibility_residuals(states, self.regions, self.shifts)
        jac = stacked_visibility_jacobian(states, jacs, self.regions)
        self._key_f, self._val_f = key, (cost, grad, res, jac)
        self._key_v, self._val_v = key, (cost, res)
        return self._val_f

    def cost(self, z):
        return self._values(z)[0]

    def gradient(self, z):
        return self._full(z)[1]

    def residuals(self, z):
        return self._values(z)[1]

    def residuals_jacobian(self, z):
        return self._full(z)[3]


def _feasible_warm_start(problem: VpcProblem, warm: np.ndarray, tol: float) -> np.ndarray:
    """Backtrack the warm start toward zero until its rollout is feasible.

    An SQP started on an infeasible rollout (e.g. the previous command now
    punches through a keep-out) often terminates infeasible; shrinking the
    command is cheap and deterministic. Kept as-is when even a zero command
    is infeasible (the current state itself violates).
    """
    if problem.residuals(warm).min(initial=0.0) >= -tol:
        return warm
    for alpha in (0.7, 0.5, 0.3, 0.15, 0.0):
        candidate = alpha * warm
        if problem.residuals(candidate).min(initial=0.0) >= -tol:
            return candidate
    return warm


def solve_vpc(s_meas: np.ndarray, target: np.ndarray, warm_flat: np.ndarray,
              scenario: Scenario, cfg: SolverConfig, horizon: Optional[int] = None,
              n_free: Optional[int] = None, r_scale: Optional[float] = None,
              epsilon: Optional[np.ndarray] = None
              ) -> tuple[SolverResult, ControlSequence]:
    """One constrained solve of the preview problem; returns result + sequence.

    r_scale defaults to the scenario's effort ramp evaluated at the current
    goal error, so effort fades out near convergence for every caller.
    """
    horizon = horizon or scenario.Np
    n_free = n_free or scenario.Nc
    if r_scale is None:
        r_scale = scenario.weights.r_scale(rms_error(s_meas, scenario.s_star))
    problem = VpcProblem(s_meas, target, scenario, horizon, n_free, r_scale, epsilon)
    warm = _feasible_warm_start(problem, np.asarray(warm_flat, dtype=float).copy(),
                                cfg.feasibility_tol)
    result = solver.minimize(
        objective=problem.cost, gradient=problem.gradient,
        bounds=scenario.control_bounds(n_free),
        ineq_constraints=problem.residuals, ineq_jacobian=problem.residuals_jacobian,
        warm_start=warm, cfg=cfg)
    # Never hand the plant a clearly violating command while a feasible one
    # is available: fall back to the conditioned warm start.
    if (result.max_violation > VIOLATION_FALLBACK_PX
            and problem.residuals(warm).min(initial=0.0) >= -cfg.feasibility_tol):
        result = SolverResult(
            solution=warm, cost=problem.cost(warm), success=False,
            iterations=result.iterations, solve_time=result.solve_time,
            max_violation=float(max(0.0, -problem.residuals(warm).min(initial=0.0))),
            message="infeasible solver exit; feasible warm start applied")
    seq = ControlSequence.from_flat(result.solution, scenario.q, horizon)
    return result, seq


class FailureReason(str, enum.Enum):
    NONE = "none"
    CONSTRAINT_VIOLATION = "constraint_violation"
    TIMEOUT = "timeout"
    SOLVER_ABORT = "solver_abort"
    DEPTH_FAULT = "depth_fault"


VARIANTS = ("prev_iteration", "knn_memory", "gpr_memory")


@dataclass
class Strategy:
    """Warm-start policy for the on-line loop.

    memory (a trajectory store) is required for the knn variant; gpr (a
    fitted regression model) for the gpr variant. trigger_distance is the
    pixel proximity to a keep-out border at which the memory is queried.
    """

    variant: str = "prev_iteration"
    trigger_distance: float = 20.0
    memory: Any = None
    gpr: Any = None
    knn_k: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown strategy variant {self.variant!r}")
        if self.variant != "prev_iteration" and self.trigger_distance <= 0:
            raise ValueError("memory strategies need trigger_distance > 0")
        if self.variant == "knn_memory" and self.memory is None:
            raise ValueError("knn_memory strategy needs a memory store")
        if self.variant == "gpr_memory" and self.gpr is None:
            raise ValueError("gpr_memory strategy needs a fitted gpr model")


@dataclass
class StepDiagnostics:
    cost: float
    solve_time: float
    iterations: int
    solver_success: bool
    memory_active: bool
    distance: float
    waypoint: Optional[np.ndarray] = None
    message: str = ""


@dataclass
class EpisodeResult:
    feature_trajectory: list   # measured s_k per cycle, incl. initial state
    command_trajectory: list   # applied twist vectors, one per executed cycle
    solve_times: list
    step_costs: list
    memory_active: list
    waypoints: list            # way point per cycle, None when memory inactive
    success: bool
    failure_reason: FailureReason
    final_rms: float
    sim_time: float

    @property
    def steps(self) -> int:
        return len(self.command_trajectory)


def rms_error(s: np.ndarray, s_star: np.ndarray) -> float:
    return float(np.sqrt(np.mean((np.asarray(s) - np.asarray(s_star)) ** 2)))


def vpc_step(s_meas: np.ndarray, prev_solution: Optional[ControlSequence],
             strategy: Strategy, scenario: Scenario, cfg: SolverConfig,
             model_offset: Optional[np.ndarray] = None
             ) -> tuple[Twist, ControlSequence, StepDiagnostics]:
    """One control cycle: pick target and warm start, solve, return first control.

    model_offset, when given, plays the role of a measured-vs-previewed
    feature discrepancy; the model state is otherwise re-initialized from the
    measurement each cycle, which makes the offset identically zero.
    """
    q, n_f = scenario.q, scenario.n_f
    horizon, n_free = scenario.Np, scenario.Nc
    distance = min_distance_to_regions(s_meas, scenario.keepouts)
    memory_active = (strategy.variant != "prev_iteration"
                     and distance < strategy.trigger_distance)

    waypoint = None
    if memory_active:
        x_hat = visual_config_vector(s_meas)
        if strategy.variant == "knn_memory":
            y_hat = regress.knn_query(strategy.memory, x_hat, strategy.knn_k).y_hat
        else:
            y_hat = regress.gpr_query(strategy.gpr, x_hat).y_hat
        warm = regress.assemble_warm_start(y_hat, q, horizon, n_free).as_flat()
        waypoint = regress.extract_way_point(y_hat, q, n_f)
        target = waypoint
    else:
        if prev_solution is None:
            prev_solution = ControlSequence.zero(q, horizon, n_free)
        warm = prev_solution.as_flat()
        target = scenario.s_star

    result, seq = solve_vpc(s_meas, target, warm, scenario, cfg,
                            horizon, n_free, epsilon=model_offset)
    diag = StepDiagnostics(cost=result.cost, solve_time=result.solve_time,
                           iterations=result.iterations,
                           solver_success=result.success,
                           memory_active=memory_active, distance=distance,
                           waypoint=waypoint, message=result.message)
    return seq.first_control(), seq, diag


def run_episode(scenario: Scenario, strategy: Strategy, s0_pose: CameraPose,
                time_limit: Optional[float] = None,
                cfg: Optional[SolverConfig] = None) -> EpisodeResult:
    """Simulate one servoing episode at the scenario's sampling rate.

    Ends on convergence (rms pixel error below conv_tol), on a constraint
    violation beyond the scoring tolerance, on a plant fault, or at the time
    limit. All failures are reported in the result, never raised.
    """
    cfg = cfg or SolverConfig()
    time_limit = time_limit if time_limit is not None else scenario.time_limit
    max_steps = int(round(time_limit / scenario.Ts))
    regions = scenario.regions()

    features, commands, solve_times, costs, mem_flags, waypoints = [], [], [], [], [], []
    reason = FailureReason.TIMEOUT
    pose = s0_pose
    try:
        s = camera.measure(scenario, pose)
    except NonPositiveDepth:
        return EpisodeResult([], [], [], [], [], [], False,
                             FailureReason.DEPTH_FAULT, math.inf, 0.0)
    features.append(s)

    if max_violation_px(s, regions) > scenario.violation_tol:
        return EpisodeResult(features, [], [], [], [], [], False,
                             FailureReason.CONSTRAINT_VIOLATION,
                             rms_error(s, scenario.s_star), 0.0)

    prev: Optional[ControlSequence] = None
    for _ in range(max_steps):
        if rms_error(s, scenario.s_star) < scenario.conv_tol:
            reason = FailureReason.NONE
            break
        try:
            applied, prev, diag = vpc_step(s, prev, strategy, scenario, cfg)
        except NumericalFailure:
            reason = FailureReason.SOLVER_ABORT
            break
        pose = camera.integrate_twist(pose, applied, scenario.Ts)
        try:
            s = camera.measure(scenario, pose)
        except NonPositiveDepth:
            commands.append(applied.as_vector())
            solve_times.append(diag.solve_time)
            costs.append(diag.cost)
            mem_flags.append(diag.memory_active)
            waypoints.append(diag.waypoint)
            reason = FailureReason.DEPTH_FAULT
            break
        features.append(s)
        commands.append(applied.as_vector())
        solve_times.append(diag.solve_time)
        costs.append(diag.cost)
        mem_flags.append(diag.memory_active)
        waypoints.append(diag.waypoint)
        if max_violation_px(s, regions) > scenario.violation_tol:
            reason = FailureReason.CONSTRAINT_VIOLATION
            break
    else:
        if rms_error(s, scenario.s_star) < scenario.conv_tol:
            reason = FailureReason.NONE

    return EpisodeResult(
        feature_trajectory=features, command_trajectory=commands,
        solve_times=solve_times, step_costs=costs, memory_active=mem_flags,
        waypoints=waypoints, success=(reason == FailureReason.NONE),
        failure_reason=reason, final_rms=rms_error(s, scenario.s_star),
        sim_time=len(commands) * scenario.Ts)
