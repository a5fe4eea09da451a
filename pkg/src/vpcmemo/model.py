"""Preview-window mathematics: feature prediction, cost, and visibility constraints.

The prediction model is the local linear one: features advance by
``s <- s + Ts * L(s) @ v`` with the interaction matrix ``L`` rebuilt at each
predicted feature vector but with constant depths (the depths at the target,
known in advance). The plant in :mod:`vpcmemo.camera` uses exact projective
geometry instead; the mismatch between the two is deliberate and absorbed by
the receding-horizon loop.

Constraint sign convention throughout: residual >= 0 means satisfied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence, Union

import numpy as np
from scipy.optimize import minimize_scalar

from .camera import Intrinsics, Twist
from .errors import DegeneratePolygon, DimensionMismatch, NonPositiveDepth


# ---------------------------------------------------------------------------
# interaction matrix and prediction
# ---------------------------------------------------------------------------

def interaction_matrix(s: np.ndarray, depths: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Image Jacobian mapping a camera twist to pixel-feature velocity.

    Per point with normalized coordinates x=(u-cu)/fu, y=(v-cv)/fv and depth Z
    the 2x6 block is the standard point-feature form

        [[-1/Z, 0, x/Z,  x*y, -(1+x^2),  y],
         [0, -1/Z, y/Z, 1+y^2,   -x*y,  -x]]

    with the first row scaled by fu and the second by fv (pixel units).
    """
    s = np.asarray(s, dtype=float)
    depths = np.asarray(depths, dtype=float)
    n_pts = s.size // 2
    if depths.size != n_pts:
        raise DimensionMismatch(f"{n_pts} points but {depths.size} depths")
    if np.any(depths <= 0):
        raise NonPositiveDepth("interaction matrix needs strictly positive depths")
    x = (s[0::2] - intr.cu) / intr.fu
    y = (s[1::2] - intr.cv) / intr.fv
    iz = 1.0 / depths
    L = np.empty((2 * n_pts, 6))
    L[0::2, 0] = -intr.fu * iz
    L[0::2, 1] = 0.0
    L[0::2, 2] = intr.fu * x * iz
    L[0::2, 3] = intr.fu * x * y
    L[0::2, 4] = -intr.fu * (1.0 + x * x)
    L[0::2, 5] = intr.fu * y
    L[1::2, 0] = 0.0
    L[1::2, 1] = -intr.fv * iz
    L[1::2, 2] = intr.fv * y * iz
    L[1::2, 3] = intr.fv * (1.0 + y * y)
    L[1::2, 4] = -intr.fv * x * y
    L[1::2, 5] = -intr.fv * x
    return L


def predict_features(s_prev: np.ndarray, v: np.ndarray, Ts: float, L: np.ndarray) -> np.ndarray:
    """One first-order prediction step: s_prev + Ts * L @ v."""
    v = v.as_vector() if isinstance(v, Twist) else np.asarray(v, dtype=float)
    return np.asarray(s_prev, dtype=float) + Ts * (L @ v)


def desired_features(s_star: np.ndarray, epsilon: np.ndarray) -> np.ndarray:
    """Reference features corrected by the measured-vs-previewed offset."""
    s_star = np.asarray(s_star, dtype=float)
    epsilon = np.asarray(epsilon, dtype=float)
    if s_star.shape != epsilon.shape:
        raise DimensionMismatch("s_star and epsilon must have equal length")
    return s_star - epsilon


# ---------------------------------------------------------------------------
# feature pattern geometry
# ---------------------------------------------------------------------------

def pattern_area_angle(s: np.ndarray) -> tuple[float, float]:
    """Area and orientation of the polygon whose vertices are the features.

    Area is the absolute shoelace sum over the vertices in stored order;
    orientation is the atan2 of the vector from the vertex centroid to the
    first feature point, in (-pi, pi].

    Raises DegeneratePolygon below 1 px^2; the exception carries the tiny
    area and a fallback angle taken from the first edge direction.
    """
    s = np.asarray(s, dtype=float)
    if s.size < 6 or s.size % 2 != 0:
        raise DimensionMismatch("polygon needs at least 3 (u, v) vertices")
    pts = s.reshape(-1, 2)
    u, v = pts[:, 0], pts[:, 1]
    area = 0.5 * abs(float(np.dot(u, np.roll(v, -1)) - np.dot(np.roll(u, -1), v)))
    if area < 1.0:
        edge = pts[1] - pts[0]
        raise DegeneratePolygon(area, math.atan2(edge[1], edge[0]))
    d = pts[0] - pts.mean(axis=0)
    return area, math.atan2(d[1], d[0])


def visual_config_vector(s: np.ndarray) -> np.ndarray:
    """Regression input (s, area, angle); degenerate polygons fall back to
    the first-edge angle so the sample is still usable."""
    s = np.asarray(s, dtype=float)
    try:
        area, angle = pattern_area_angle(s)
    except DegeneratePolygon as exc:
        area, angle = exc.area, exc.angle
    return np.concatenate([s, [area, angle]])


# ---------------------------------------------------------------------------
# visibility regions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KeepInBox:
    """Axis-aligned pixel box the features must stay inside."""

    u_min: float
    v_min: float
    u_max: float
    v_max: float

    def __post_init__(self):
        if not (self.u_min < self.u_max and self.v_min < self.v_max):
            raise ValueError("keep-in box must have positive extent")


@dataclass(frozen=True)
class KeepOutRegion:
    """Superellipse the features must stay outside of.

    Membership test: |(u-cu0)/au|^p + |(v-cv0)/av|^p <= 1 is inside.
    Exponent p >= 2 keeps the region convex with smooth boundary gradients.
    """

    cu0: float
    cv0: float
    au: float
    av: float
    p_exp: float = 4.0

    def __post_init__(self):
        if self.au <= 0 or self.av <= 0:
            raise ValueError("semi-axes must be positive")
        if self.p_exp < 2:
            raise ValueError("superellipse exponent must be >= 2")

    def residual(self, u, v):
        return (
            np.abs((u - self.cu0) / self.au) ** self.p_exp
            + np.abs((v - self.cv0) / self.av) ** self.p_exp
            - 1.0
        )

    @property
    def solver_scale(self) -> float:
        # Pixel-comparable weight for the dimensionless residual; without it
        # an SQP merit function treats deep keep-out penetrations as cheap
        # next to pixel-valued box residuals.
        return min(self.au, self.av)

    def residual_gradient(self, u, v) -> np.ndarray:
        """d(residual)/d(u, v); vectorized, shape (..., 2)."""
        du = (np.asarray(u) - self.cu0) / self.au
        dv = (np.asarray(v) - self.cv0) / self.av
        p = self.p_exp
        return np.stack(
            [
                p / self.au * np.sign(du) * np.abs(du) ** (p - 1.0),
                p / self.av * np.sign(dv) * np.abs(dv) ** (p - 1.0),
            ],
            axis=-1,
        )

    @cached_property
    def _boundary(self) -> np.ndarray:
        # Dense polyline used to bracket the closest boundary point. Radial
        # parametrization (polar angle of the boundary point itself): unlike
        # the trigonometric one it does not degenerate on the flat sides at
        # large exponents.
        phi = np.linspace(0.0, 2.0 * math.pi, 512, endpoint=False)
        return np.stack([self._boundary_point(t) for t in phi])

    def _boundary_point(self, phi: float) -> np.ndarray:
        c, s = math.cos(phi), math.sin(phi)
        r = (abs(c / self.au) ** self.p_exp + abs(s / self.av) ** self.p_exp) ** (-1.0 / self.p_exp)
        return np.array([self.cu0 + r * c, self.cv0 + r * s])

    def boundary_distance(self, u: float, v: float) -> float:
        """Euclidean pixel distance from (u, v) to the boundary curve."""
        p = np.array([u, v])
        d2 = np.sum((self._boundary - p) ** 2, axis=1)
        k = int(np.argmin(d2))
        step = 2.0 * math.pi / len(self._boundary)
        lo, hi = (k - 1) * step, (k + 1) * step

        def dist(phi):
            return float(np.linalg.norm(self._boundary_point(phi) - p))

        res = minimize_scalar(dist, bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-10})
        return float(min(res.fun, math.sqrt(d2[k])))


VisibilityRegion = Union[KeepInBox, KeepOutRegion]


def visibility_residuals(s: np.ndarray, regions: Sequence[VisibilityRegion]) -> np.ndarray:
    """Stacked constraint residuals for one feature vector (>= 0 satisfied).

    Keep-in boxes contribute four per-axis residuals per point; keep-out
    superellipses contribute one residual per point.
    """
    s = np.asarray(s, dtype=float)
    u, v = s[0::2], s[1::2]
    parts = []
    for region in regions:
        if isinstance(region, KeepInBox):
            parts.extend([u - region.u_min, region.u_max - u,
                          v - region.v_min, region.v_max - v])
        else:
            parts.append(region.residual(u, v))
    if not parts:
        return np.empty(0)
    return np.concatenate(parts)


def residuals_per_state(regions: Sequence[VisibilityRegion], n_points: int) -> int:
    return sum(4 * n_points if isinstance(r, KeepInBox) else n_points for r in regions)


def visibility_jacobian(s: np.ndarray, J_s: np.ndarray,
                        regions: Sequence[VisibilityRegion]) -> np.ndarray:
    """Jacobian of visibility_residuals w.r.t. the free variables.

    J_s is d(features)/d(variables) for the same state, shape (n_f, n_vars).
    """
    s = np.asarray(s, dtype=float)
    u, v = s[0::2], s[1::2]
    rows_u = J_s[0::2]
    rows_v = J_s[1::2]
    parts = []
    for region in regions:
        if isinstance(region, KeepInBox):
            parts.extend([rows_u, -rows_u, rows_v, -rows_v])
        else:
            g = region.residual_gradient(u, v)  # (n_pts, 2)
            parts.append(g[:, :1] * rows_u + g[:, 1:] * rows_v)
    if not parts:
        return np.empty((0, J_s.shape[1]))
    return np.vstack(parts)


def stacked_visibility_residuals(states: np.ndarray,
                                 regions: Sequence[VisibilityRegion],
                                 shifts: np.ndarray | None = None) -> np.ndarray:
    """Solver-facing residual stack for a whole rollout (region-major order).

    Same sign convention as visibility_residuals, but keep-out rows are
    scaled into pixel-comparable units so all residuals share a scale.
    ``shifts`` (one entry per residual of a single state, <= 0) relaxes each
    constraint by the violation already present at the measured state, so a
    slightly penetrated constraint forbids getting deeper instead of making
    the whole problem infeasible.
    """
    U, V = states[:, 0::2], states[:, 1::2]
    parts = []
    for region in regions:
        if isinstance(region, KeepInBox):
            parts.extend([(U - region.u_min).ravel(), (region.u_max - U).ravel(),
                          (V - region.v_min).ravel(), (region.v_max - V).ravel()])
        else:
            parts.append(region.solver_scale * region.residual(U, V).ravel())
    if not parts:
        return np.empty(0)
    out = np.concatenate(parts)
    if shifts is not None:
        # shifts holds one entry per residual of a single state; every block
        # of the stack is (state, point)-ordered with n_pts points.
        M, n_pts = U.shape
        tiled = np.broadcast_to(shifts.reshape(-1, 1, n_pts),
                                (shifts.size // n_pts, M, n_pts))
        out = out - tiled.ravel()
    return out


def stacked_visibility_jacobian(states: np.ndarray, jacs: np.ndarray,
                                regions: Sequence[VisibilityRegion]) -> np.ndarray:
    """Jacobian matching stacked_visibility_residuals; jacs is (M, n_f, n_vars)."""
    M, n_f, n_vars = jacs.shape
    U, V = states[:, 0::2], states[:, 1::2]
    rows_u = jacs[:, 0::2, :].reshape(-1, n_vars)
    rows_v = jacs[:, 1::2, :].reshape(-1, n_vars)
    parts = []
    for region in regions:
        if isinstance(region, KeepInBox):
            parts.extend([rows_u, -rows_u, rows_v, -rows_v])
        else:
            g = region.solver_scale * region.residual_gradient(U, V).reshape(-1, 2)
            parts.append(g[:, :1] * rows_u + g[:, 1:] * rows_v)
    if not parts:
        return np.empty((0, n_vars))
    return np.vstack(parts)


def min_distance_to_regions(s: np.ndarray, regions: Sequence[VisibilityRegion]) -> float:
    """Smallest pixel distance from any feature to any keep-out boundary.

    Points inside a keep-out count as distance 0. Returns +inf when the
    region list holds no keep-outs, so a proximity trigger never fires.
    """
    s = np.asarray(s, dtype=float)
    u, v = s[0::2], s[1::2]
    best = math.inf
    for region in regions:
        if not isinstance(region, KeepOutRegion):
            continue
        res = region.residual(u, v)
        for i in range(len(u)):
            if res[i] <= 0.0:
                return 0.0
            best = min(best, region.boundary_distance(u[i], v[i]))
    return best


def max_violation_px(s: np.ndarray, regions: Sequence[VisibilityRegion]) -> float:
    """Worst constraint violation in pixel units (0 when all satisfied).

    Keep-in violations are the per-axis overshoot; keep-out violations are
    the penetration depth, i.e. the distance back to the boundary.
    """
    s = np.asarray(s, dtype=float)
    u, v = s[0::2], s[1::2]
    worst = 0.0
    for region in regions:
        if isinstance(region, KeepInBox):
            res = visibility_residuals(s, [region])
            worst = max(worst, float(np.max(-res, initial=0.0)))
        else:
            res = region.residual(u, v)
            for i in range(len(u)):
                if res[i] < 0.0:
                    worst = max(worst, region.boundary_distance(u[i], v[i]))
    return worst


# ---------------------------------------------------------------------------
# weights and control sequence
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Weights:
    """Error weight Q, effort weight R, and the near-convergence R ramp."""

    Q: np.ndarray
    R: np.ndarray
    ramp_radius: float = 50.0
    r_floor: float = 0.0
    ramp_cutoff: float = 12.0

    def __post_init__(self):
        object.__setattr__(self, "Q", np.asarray(self.Q, dtype=float))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float))
        for name, m in (("Q", self.Q), ("R", self.R)):
            if not np.allclose(m, m.T, atol=1e-12):
                raise ValueError(f"{name} must be symmetric")
            if np.min(np.linalg.eigvalsh(m)) < -1e-10:
                raise ValueError(f"{name} must be positive semidefinite")
        if not 0.0 <= self.ramp_cutoff < self.ramp_radius:
            raise ValueError("need 0 <= ramp_cutoff < ramp_radius")

    def r_scale(self, err_rms: float) -> float:
        """Effort scale: 1 beyond ramp_radius, sliding to exactly r_floor at
        ramp_cutoff pixels of rms error.

        The scale must genuinely reach the floor: the weakly actuated feature
        directions (sway pairs of the interaction matrix) carry singular
        values two orders below the strong ones, and any residual effort
        penalty freezes them into a permanent near-goal crawl.
        """
        span = self.ramp_radius - self.ramp_cutoff
        return float(np.clip((err_rms - self.ramp_cutoff) / span, self.r_floor, 1.0))


@dataclass(frozen=True)
class ControlSequence:
    """Optimization variable: Nc free twists, held constant past index Nc-1.

    The expanded sequence has Np-1 applied controls; entries beyond the last
    free control repeat it.
    """

    free: np.ndarray  # (Nc, q)
    horizon: int      # Np

    def __post_init__(self):
        free = np.atleast_2d(np.asarray(self.free, dtype=float))
        object.__setattr__(self, "free", free)
        nc = free.shape[0]
        if not 1 <= nc <= self.horizon - 1:
            raise ValueError(f"need 1 <= Nc <= Np-1, got Nc={nc}, Np={self.horizon}")

    @property
    def n_controls(self) -> int:
        return self.free.shape[0]

    @property
    def q(self) -> int:
        return self.free.shape[1]

    def expanded(self) -> np.ndarray:
        idx = np.minimum(np.arange(self.horizon - 1), self.n_controls - 1)
        return self.free[idx]

    def first_control(self) -> Twist:
        return Twist.from_vector(self.free[0])

    def as_flat(self) -> np.ndarray:
        return self.free.reshape(-1).copy()

    @staticmethod
    def from_flat(z: np.ndarray, q: int, horizon: int) -> "ControlSequence":
        z = np.asarray(z, dtype=float)
        if z.size % q != 0:
            raise DimensionMismatch(f"flat length {z.size} not a multiple of q={q}")
        return ControlSequence(z.reshape(-1, q), horizon)

    @staticmethod
    def zero(q: int, horizon: int, n_controls: int = 1) -> "ControlSequence":
        return ControlSequence(np.zeros((n_controls, q)), horizon)


# ---------------------------------------------------------------------------
# preview rollout and cost
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureModel:
    """Prediction context: intrinsics, constant goal depths, sampling time."""

    intr: Intrinsics
    goal_depths: np.ndarray
    Ts: float

    def __post_init__(self):
        depths = np.asarray(self.goal_depths, dtype=float)
        if np.any(depths <= 0):
            raise NonPositiveDepth("feature model needs strictly positive goal depths")
        object.__setattr__(self, "goal_depths", depths)
        object.__setattr__(self, "_iz", 1.0 / depths)

    def interaction(self, s: np.ndarray) -> np.ndarray:
        return self._interaction_fast(np.asarray(s, dtype=float))

    def _interaction_fast(self, s: np.ndarray) -> np.ndarray:
        # interaction_matrix minus the per-call validation; depths are
        # checked once at construction.
        intr = self.intr
        x = (s[0::2] - intr.cu) / intr.fu
        y = (s[1::2] - intr.cv) / intr.fv
        iz = self._iz
        L = np.empty((s.size, 6))
        L[0::2, 0] = -intr.fu * iz
        L[0::2, 1] = 0.0
        L[0::2, 2] = intr.fu * x * iz
        L[0::2, 3] = intr.fu * x * y
        L[0::2, 4] = -intr.fu * (1.0 + x * x)
        L[0::2, 5] = intr.fu * y
        L[1::2, 0] = 0.0
        L[1::2, 1] = -intr.fv * iz
        L[1::2, 2] = intr.fv * y * iz
        L[1::2, 3] = intr.fv * (1.0 + y * y)
        L[1::2, 4] = -intr.fv * x * y
        L[1::2, 5] = -intr.fv * x
        return L

    def rate_jacobian(self, s: np.ndarray, u: np.ndarray) -> np.ndarray:
        """d(L(s) @ u)/ds: block-diagonal, one 2x2 block per point."""
        s = np.asarray(s, dtype=float)
        x = (s[0::2] - self.intr.cu) / self.intr.fu
        y = (s[1::2] - self.intr.cv) / self.intr.fv
        iz = self._iz
        vz, wx, wy, wz = u[2], u[3], u[4], u[5]
        fu, fv = self.intr.fu, self.intr.fv
        n_f = s.size
        B = np.zeros((n_f, n_f))
        duu = vz * iz + y * wx - 2.0 * x * wy
        duv = (fu / fv) * (x * wx + wz)
        dvu = (fv / fu) * (-y * wy - wz)
        dvv = vz * iz + 2.0 * y * wx - x * wy
        idx = np.arange(len(x))
        B[2 * idx, 2 * idx] = duu
        B[2 * idx, 2 * idx + 1] = duv
        B[2 * idx + 1, 2 * idx] = dvu
        B[2 * idx + 1, 2 * idx + 1] = dvv
        return B

    def rollout(self, s0: np.ndarray, controls: np.ndarray) -> np.ndarray:
        """Predicted feature vectors after each applied control, shape (M, n_f)."""
        s = np.asarray(s0, dtype=float)
        states = np.empty((len(controls), s.size))
        for i, u in enumerate(controls):
            s = s + self.Ts * (self._interaction_fast(s) @ u)
            states[i] = s
        return states

    def rollout_with_jacobians(self, s0: np.ndarray, controls: np.ndarray,
                               n_free: int) -> tuple[np.ndarray, np.ndarray]:
        """Rollout plus d(state)/d(flat free controls) at every step.

        controls is the expanded (M, q) sequence; the i-th applied control is
        free block min(i, n_free-1). Returns (states (M, n_f), jacs (M, n_f, q*n_free)).
        """
        s = np.asarray(s0, dtype=float)
        q = controls.shape[1]
        M = len(controls)
        n_f = s.size
        states = np.empty((M, n_f))
        jacs = np.empty((M, n_f, q * n_free))
        J = np.zeros((n_f, q * n_free))
        for i in range(M):
            u = controls[i]
            L = self._interaction_fast(s)
            B = self.rate_jacobian(s, u)
            J = J + self.Ts * (B @ J)
            c = min(i, n_free - 1)
            J[:, c * q:(c + 1) * q] += self.Ts * L
            s = s + self.Ts * (L @ u)
            states[i] = s
            jacs[i] = J
        return states, jacs


def vpc_cost(seq: ControlSequence, s_k: np.ndarray, target: np.ndarray,
             model: FeatureModel, weights: Weights, r_scale: float = 1.0,
             epsilon: np.ndarray | None = None) -> float:
    """Preview-window cost: one Q-weighted error term per predicted state
    (the last one is the terminal term) plus an R-weighted effort term per
    applied control."""
    s_k = np.asarray(s_k, dtype=float)
    s_d = desired_features(target, epsilon) if epsilon is not None else np.asarray(target, float)
    controls = seq.expanded()
    states = model.rollout(s_k, controls)
    err = s_d - states
    R_eff = r_scale * weights.R
    cost = float(np.einsum("ij,jk,ik->", err, weights.Q, err))
    cost += float(np.einsum("ij,jk,ik->", controls, R_eff, controls))
    return cost


def vpc_cost_and_gradient(z: np.ndarray, s_k: np.ndarray, s_d: np.ndarray,
                          model: FeatureModel, weights: Weights, horizon: int,
                          n_free: int, r_scale: float = 1.0
                          ) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Cost, analytic gradient w.r.t. the flat free controls, states, jacobians.

    The gradient chains through the rollout, including the dependence of the
    interaction matrix on the predicted features.
    """
    q = z.size // n_free
    seq = ControlSequence.from_flat(z, q, horizon)
    controls = seq.expanded()
    states, jacs = model.rollout_with_jacobians(s_k, controls, n_free)
    err = s_d - states
    Qe = err @ weights.Q.T
    cost = float(np.sum(Qe * err))
    grad = -2.0 * np.einsum("ij,ijk->k", Qe, jacs)
    R_eff = r_scale * weights.R
    Ru = controls @ R_eff.T
    cost += float(np.sum(Ru * controls))
    g_eff = 2.0 * Ru  # (M, q); scatter into the free blocks
    for i in range(len(controls)):
        c = min(i, n_free - 1)
        grad[c * q:(c + 1) * q] += g_eff[i]
    return cost, grad, states, jacs
