"""Off-line construction of the memory of motion.

The builder samples random starting camera poses, runs the same
receding-horizon loop used on-line (with a long preview window and strict
solver settings), and stores every step of each successful trajectory as a
(visual configuration -> command, way point) pair. Failed starts feed a
Gaussian mixture that biases later sampling toward the hard regions, and a
fallback cascade of predefined and random warm starts rescues solves that
fail outright.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.mixture import GaussianMixture

from . import camera, regress
from .camera import CameraPose, Twist, quat_from_rotvec, quat_multiply
from .controller import rms_error, solve_vpc
from .errors import FormatError, NonPositiveDepth, SamplingExhausted
from .model import (max_violation_px, min_distance_to_regions,
                    pattern_area_angle, visibility_residuals,
                    visual_config_vector)
from .scenario import Scenario
from .solver import SolverConfig

compute_area_angle = pattern_area_angle


@dataclass(frozen=True)
class VisualConfig:
    """Regression input: features plus the pattern's area and orientation."""

    s: np.ndarray
    area: float
    angle: float

    def as_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.s, dtype=float), [self.area, self.angle]])

    @staticmethod
    def from_features(s: np.ndarray) -> "VisualConfig":
        vec = visual_config_vector(s)
        return VisualConfig(vec[:-2], float(vec[-2]), float(vec[-1]))


@dataclass(frozen=True)
class MemorySample:
    """One stored step: input configuration, command taken, way point ahead."""

    x: VisualConfig
    v: np.ndarray
    waypoint: np.ndarray
    traj_id: int
    step_index: int


@dataclass
class MemoryStore:
    """Row-matrix view of the memory: X rows are inputs, Y rows are outputs.

    Rows are kept sorted by (traj, step); that canonical order is the k-NN
    tie-break. start_poses carries per-trajectory initial camera poses for
    replay verification and is not persisted.
    """

    X: np.ndarray
    Y: np.ndarray
    traj_ids: np.ndarray
    step_ids: np.ndarray
    meta: dict
    start_poses: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        self.traj_ids = np.asarray(self.traj_ids, dtype=int)
        self.step_ids = np.asarray(self.step_ids, dtype=int)
        if self.X.shape[0]:
            order = np.lexsort((self.step_ids, self.traj_ids))
            self.X = self.X[order]
            self.Y = self.Y[order]
            self.traj_ids = self.traj_ids[order]
            self.step_ids = self.step_ids[order]
        self._standardization = None

    @property
    def size(self) -> int:
        return 0 if self.X.size == 0 else self.X.shape[0]

    @property
    def n_f(self) -> int:
        return int(self.meta["n_f"])

    @property
    def q(self) -> int:
        return int(self.meta["q"])

    def standardization(self):
        if self._standardization is None:
            self._standardization = regress.standardize_columns(self.X)
        return self._standardization

    def s_star_estimate(self) -> np.ndarray:
        """Goal features recovered from a terminal way point (the way-point
        tail rule stores s* exactly at the end of every trajectory)."""
        if self.size == 0:
            raise ValueError("empty store has no terminal way point")
        last_of_first = np.max(self.step_ids[self.traj_ids == self.traj_ids[0]])
        row = np.flatnonzero((self.traj_ids == self.traj_ids[0])
                             & (self.step_ids == last_of_first))[0]
        return self.Y[row, self.q:].copy()

    @staticmethod
    def from_samples(samples: list, meta: dict, start_poses: Optional[list] = None
                     ) -> "MemoryStore":
        if samples:
            X = np.stack([s.x.as_vector() for s in samples])
            Y = np.stack([np.concatenate([s.v, s.waypoint]) for s in samples])
            traj = np.array([s.traj_id for s in samples])
            step = np.array([s.step_index for s in samples])
        else:
            n = meta["n_f"] + 2
            p = meta["q"] + meta["n_f"]
            X, Y = np.empty((0, n)), np.empty((0, p))
            traj = step = np.empty(0, dtype=int)
        return MemoryStore(X, Y, traj, step, dict(meta), start_poses or [])


def compute_way_point(traj: list, j: int, n_s: int, s_star: np.ndarray) -> np.ndarray:
    """Features n_s samples ahead on the trajectory, or the goal past the end."""
    L = len(traj) - 1
    if not 0 <= j <= L:
        raise IndexError(f"step {j} outside trajectory of length {L}")
    if j + n_s > L:
        return np.asarray(s_star, dtype=float).copy()
    return np.asarray(traj[j + n_s], dtype=float).copy()


# ---------------------------------------------------------------------------
# start sampling and the failure-driven bias
# ---------------------------------------------------------------------------

@dataclass
class GmmModel:
    """Diagonal-covariance mixture over pose sampling coordinates."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.covariances = np.atleast_2d(np.asarray(self.covariances, dtype=float))
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("component weights must sum to 1")
        if np.any(self.covariances <= 0):
            raise ValueError("covariance entries must be positive")

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        k = rng.choice(len(self.weights), p=self.weights)
        return rng.normal(self.means[k], np.sqrt(self.covariances[k]))


def fit_failure_gmm(failed_starts: list, k_components: int,
                    rng: np.random.Generator) -> Optional[GmmModel]:
    """EM fit (k-means init, diagonal covariances) of the failed-start cloud.

    Returns None with fewer than 3 samples per component, which disables the
    bias rather than fitting garbage.
    """
    data = np.atleast_2d(np.asarray(failed_starts, dtype=float))
    if len(data) < 3 * k_components:
        return None
    gm = GaussianMixture(n_components=k_components, covariance_type="diag",
                         max_iter=100, n_init=1, init_params="kmeans",
                         reg_covar=1e-6,
                         random_state=int(rng.integers(2 ** 31 - 1)))
    gm.fit(data)
    return GmmModel(gm.weights_, gm.means_, gm.covariances_)


def pose_from_params(scenario: Scenario, params: np.ndarray) -> CameraPose:
    """Pose box coordinates -> camera pose: absolute position, goal
    orientation perturbed by a rotation vector."""
    params = np.asarray(params, dtype=float).reshape(6)
    quat = quat_multiply(scenario.goal_pose.quaternion, quat_from_rotvec(params[3:]))
    return CameraPose(params[:3], quat)


def params_from_pose(scenario: Scenario, pose: CameraPose) -> np.ndarray:
    """Inverse of pose_from_params (rotation vector of the goal-relative turn)."""
    g = scenario.goal_pose.quaternion
    g_inv = np.array([g[0], -g[1], -g[2], -g[3]])
    rel = quat_multiply(g_inv, pose.quaternion)
    if rel[0] < 0:
        rel = -rel
    angle = 2.0 * math.atan2(float(np.linalg.norm(rel[1:])), float(rel[0]))
    axis = rel[1:] / max(float(np.linalg.norm(rel[1:])), 1e-300)
    return np.concatenate([pose.position, angle * axis if angle > 1e-12 else np.zeros(3)])


def generate_initial_features(scenario: Scenario, rng: np.random.Generator,
                              bias: Optional[GmmModel] = None,
                              bias_mix: float = 0.5, max_rejects: int = 2000,
                              return_params: bool = False):
    """Rejection-sample a starting pose whose features are all visible.

    Draws uniformly over the scenario's pose box, or with probability
    bias_mix from the failure mixture when one is supplied (clipped back
    into the box). A draw is rejected when any projected feature leaves the
    image or lands inside a keep-out.
    """
    lo, hi = scenario.pose_box.low(), scenario.pose_box.high()
    regions = scenario.regions()
    for _ in range(max_rejects):
        if bias is not None and rng.random() < bias_mix:
            params = np.clip(bias.sample(rng), lo, hi)
        else:
            params = rng.uniform(lo, hi)
        pose = pose_from_params(scenario, params)
        try:
            s = camera.measure(scenario, pose)
        except NonPositiveDepth:
            continue
        if np.min(visibility_residuals(s, regions)) >= 0.0:
            if return_params:
                return s, pose, params
            return s, pose
    raise SamplingExhausted(f"no valid start within {max_rejects} draws")


# ---------------------------------------------------------------------------
# the find-solution cascade
# ---------------------------------------------------------------------------

@dataclass
class BuildConfig:
    """Settings for the off-line build: long window, strict solver."""

    Np: int = 10
    optimality_tol: float = 1e-9
    max_iterations: int = 100
    n_s: int = 5
    n_th: int = 50
    trigger_distance: float = 20.0
    knn_k: int = 1
    gmm_components: int = 3
    refit_every: int = 25
    bias_mix: float = 0.5
    max_rejects: int = 2000
    n_random_fallback: int = 10
    seed: int = 0
    stall_abort_s: float = 1.0    # builder-only early abort of stalled trials
    stall_command_frac: float = 1e-3
    no_progress_s: float = 2.0    # abort when rms stops improving this long
    no_progress_px: float = 1.0

    def solver_config(self) -> SolverConfig:
        return SolverConfig(optimality_tol=self.optimality_tol,
                            max_iterations=self.max_iterations)


def predefined_directions(scenario: Scenario) -> np.ndarray:
    """The 12 fallback warm starts: +/- each twist axis at half its bound."""
    dirs = np.zeros((12, 6))
    for axis in range(6):
        dirs[2 * axis, axis] = 0.5 * scenario.v_max[axis]
        dirs[2 * axis + 1, axis] = 0.5 * scenario.v_min[axis]
    return dirs


def find_solution(s_L: np.ndarray, s_star: np.ndarray, v_prev: np.ndarray,
                  store: Optional[MemoryStore], n_t: int, scenario: Scenario,
                  cfg: BuildConfig, rng: np.random.Generator
                  ) -> tuple[np.ndarray, bool]:
    """Cascade of warm starts for one build-time solve.

    Close to a constraint with a mature store, k-NN supplies warm start and
    way point; otherwise the previous command warm-starts a solve toward the
    goal. On failure, 12 predefined then up to 10 random camera velocity
    directions are tried. Returns (command, success).

    A solve counts as usable when it is feasible (no constraint violated
    beyond the solver's feasibility tolerance); solver-internal convergence
    status is not required, mirroring the on-line loop which applies capped
    or line-search-terminated iterates as long as they are feasible.
    """
    solver_cfg = cfg.solver_config()
    horizon = cfg.Np

    def usable(result) -> bool:
        return result.max_violation <= solver_cfg.feasibility_tol and np.isfinite(result.cost)

    use_memory = (store is not None and store.size > 0 and n_t > cfg.n_th
                  and min_distance_to_regions(s_L, scenario.keepouts) < cfg.trigger_distance)
    if use_memory:
        y_hat = regress.knn_query(store, visual_config_vector(s_L), cfg.knn_k).y_hat
        warm, target = y_hat[:scenario.q], y_hat[scenario.q:]
    else:
        warm, target = np.asarray(v_prev, dtype=float), s_star

    result, seq = solve_vpc(s_L, target, warm, scenario, solver_cfg, horizon, n_free=1)
    if usable(result):
        return seq.free[0], True

    for direction in predefined_directions(scenario):
        result, seq = solve_vpc(s_L, s_star, direction, scenario, solver_cfg, horizon, n_free=1)
        if usable(result):
            return seq.free[0], True

    for _ in range(cfg.n_random_fallback):
        v_rand = rng.uniform(scenario.v_min, scenario.v_max)
        result, seq = solve_vpc(s_L, s_star, v_rand, scenario, solver_cfg, horizon, n_free=1)
        if usable(result):
            return seq.free[0], True

    return seq.free[0], False


# ---------------------------------------------------------------------------
# the build loop
# ---------------------------------------------------------------------------

def _roll_trajectory(scenario: Scenario, s0: np.ndarray, pose0: CameraPose,
                     store: Optional[MemoryStore], n_t: int, cfg: BuildConfig,
                     rng: np.random.Generator):
    """Run one plant-in-the-loop trajectory; returns (features, commands, ok)."""
    max_steps = int(round(scenario.time_limit / scenario.Ts))
    stall_window = max(1, int(round(cfg.stall_abort_s / scenario.Ts)))
    stall_vel = cfg.stall_command_frac * float(np.max(np.abs(scenario.v_max)))
    progress_window = max(1, int(round(cfg.no_progress_s / scenario.Ts)))
    regions = scenario.regions()

    features, commands = [s0], []
    rms_hist = [rms_error(s0, scenario.s_star)]
    pose, s = pose0, s0
    v_prev = np.zeros(scenario.q)
    for _ in range(max_steps):
        if rms_hist[-1] < scenario.conv_tol:
            return features, commands, True
        v, ok = find_solution(s, scenario.s_star, v_prev, store, n_t, scenario, cfg, rng)
        if not ok:
            return features, commands, False
        pose = camera.integrate_twist(pose, Twist.from_vector(v), scenario.Ts)
        try:
            s = camera.measure(scenario, pose)
        except NonPositiveDepth:
            return features, commands, False
        if max_violation_px(s, regions) > scenario.violation_tol:
            return features, commands, False
        features.append(s)
        commands.append(np.asarray(v, dtype=float))
        rms_hist.append(rms_error(s, scenario.s_star))
        v_prev = v
        if len(commands) >= stall_window:
            recent_v = max(float(np.linalg.norm(c)) for c in commands[-stall_window:])
            flat = abs(rms_hist[-1] - rms_hist[-stall_window]) < 1.0
            if recent_v < stall_vel and flat:
                return features, commands, False  # stuck; would time out anyway
        if len(commands) >= progress_window:
            gained = min(rms_hist[:-progress_window]) - min(rms_hist)
            if gained < cfg.no_progress_px:
                # Crawling or sliding without approaching the goal: the
                # memory only wants brisk clean trajectories, so give up now
                # instead of burning the full time limit.
                return features, commands, False
    return features, commands, rms_hist[-1] < scenario.conv_tol


def build_memory(scenario: Scenario, N_t: int, cfg: Optional[BuildConfig] = None,
                 out_path: Optional[str] = None, progress=None) -> MemoryStore:
    """Collect N_t successful trajectories into a memory store.

    Trajectories run on the true plant with the build-time horizon and solver
    settings; only runs that converge without violations are stored. Every
    cfg.refit_every failures the failed starting poses are refit into the
    sampling bias. With out_path set, a SamplingExhausted abort flushes the
    partial store to disk with a resumable marker before propagating.
    """
    cfg = cfg or BuildConfig()
    build_scenario = scenario.with_horizon(cfg.Np, 1)
    rng = np.random.default_rng(cfg.seed)

    meta = {"n_f": scenario.n_f, "q": scenario.q, "n_s": cfg.n_s, "Np": cfg.Np,
            "seed": cfg.seed, "scenario": scenario_digest(scenario)}
    samples: list[MemorySample] = []
    start_poses: list[CameraPose] = []
    failures: list[np.ndarray] = []
    gmm: Optional[GmmModel] = None
    store = MemoryStore.from_samples([], meta)
    n_t = 0

    while n_t < N_t:
        # The failure bias waits for a mature store: hard starts are only
        # worth re-drawing once the k-NN assist can help solve them.
        bias = gmm if n_t > cfg.n_th else None
        try:
            s0, pose0, params = generate_initial_features(
                build_scenario, rng, bias, cfg.bias_mix, cfg.max_rejects,
                return_params=True)
        except SamplingExhausted:
            if out_path is not None:
                save_memory(store, out_path, partial=True)
            raise
        features, commands, ok = _roll_trajectory(
            build_scenario, s0, pose0, store, n_t, cfg, rng)
        if not ok:
            failures.append(params)
            if len(failures) % cfg.refit_every == 0:
                gmm = fit_failure_gmm(failures, cfg.gmm_components, rng)
            continue

        L = len(commands)
        for j in range(L + 1):
            x = VisualConfig.from_features(features[j])
            v = commands[j] if j < L else np.zeros(scenario.q)  # converged: stand still
            wp = compute_way_point(features, j, cfg.n_s, scenario.s_star)
            samples.append(MemorySample(x, v, wp, traj_id=n_t, step_index=j))
        start_poses.append(pose0)
        n_t += 1
        store = MemoryStore.from_samples(samples, meta, start_poses)
        if progress is not None:
            progress(n_t, N_t, len(samples), len(failures))

    if out_path is not None:
        save_memory(store, out_path)
    return store


def scenario_digest(scenario: Scenario) -> str:
    """Physics digest used to tag memory files (see scenario.scenario_hash)."""
    from .scenario import scenario_hash
    doc = {
        "intrinsics": {"fu": scenario.intrinsics.fu, "fv": scenario.intrinsics.fv,
                       "cu": scenario.intrinsics.cu, "cv": scenario.intrinsics.cv,
                       "width": scenario.intrinsics.width, "height": scenario.intrinsics.height},
        "points3d": scenario.points3d.tolist(),
        "goal_pose": {"position": scenario.goal_pose.position.tolist(),
                      "quaternion": scenario.goal_pose.quaternion.tolist()},
        "keepouts": [{"cu0": k.cu0, "cv0": k.cv0, "au": k.au, "av": k.av, "p_exp": k.p_exp}
                     for k in scenario.keepouts],
        "bounds": {"v_lin": float(scenario.v_max[0]), "v_ang": float(scenario.v_max[3])},
        "weights": {"kQ": float(scenario.weights.Q[0, 0]),
                    "R_diag": np.diag(scenario.weights.R).tolist(),
                    "ramp_radius": scenario.weights.ramp_radius,
                    "R_floor": scenario.weights.r_floor},
        "horizon": {"Np": scenario.Np, "Nc": scenario.Nc, "Ts": scenario.Ts},
    }
    return scenario_hash(doc)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_memory(store: MemoryStore, path: str | Path, partial: bool = False) -> None:
    path = Path(path)
    m = store.meta
    header = (f"# vpc-memory v1, n_f={m['n_f']}, q={m['q']}, n_s={m['n_s']}, "
              f"Np={m['Np']}, seed={m['seed']}, scenario={m['scenario']}")
    if partial:
        header += ", partial=1"
    n_f, q = store.n_f, store.q
    columns = (["traj", "step"]
               + [f"s_{i + 1}" for i in range(n_f)] + ["area", "angle"]
               + [f"v_{i + 1}" for i in range(q)]
               + [f"w_{i + 1}" for i in range(n_f)])
    lines = [header, ",".join(columns)]
    for i in range(store.size):
        vals = np.concatenate([store.X[i], store.Y[i]])
        lines.append(f"{store.traj_ids[i]},{store.step_ids[i]},"
                     + ",".join(f"{v:.17g}" for v in vals))
    path.write_text("\n".join(lines) + "\n")


def load_memory(path: str | Path) -> MemoryStore:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("# vpc-memory v1"):
        raise FormatError("missing vpc-memory v1 header", line=1)
    meta: dict = {}
    for item in lines[0][1:].split(",")[1:]:
        try:
            key, val = item.strip().split("=")
        except ValueError as exc:
            raise FormatError(f"bad header entry {item.strip()!r}", line=1) from exc
        meta[key] = val
    try:
        meta = {"n_f": int(meta["n_f"]), "q": int(meta["q"]), "n_s": int(meta["n_s"]),
                "Np": int(meta["Np"]), "seed": int(meta["seed"]),
                "scenario": meta["scenario"],
                **({"partial": True} if meta.get("partial") == "1" else {})}
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad header: {exc}", line=1) from exc
    if len(lines) < 2:
        raise FormatError("missing column header", line=2)
    n_f, q = meta["n_f"], meta["q"]
    n_cols = 2 + n_f + 2 + q + n_f
    if len(lines[1].split(",")) != n_cols:
        raise FormatError(f"expected {n_cols} column names", line=2)

    rows = []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != n_cols:
            raise FormatError(f"expected {n_cols} fields, found {len(parts)}", line=lineno)
        try:
            rows.append((int(parts[0]), int(parts[1]),
                         np.array([float(v) for v in parts[2:]])))
        except ValueError as exc:
            raise FormatError(str(exc), line=lineno) from exc

    n = n_f + 2
    if rows:
        traj = np.array([r[0] for r in rows])
        step = np.array([r[1] for r in rows])
        X = np.stack([r[2][:n] for r in rows])
        Y = np.stack([r[2][n:] for r in rows])
    else:
        traj = step = np.empty(0, dtype=int)
        X, Y = np.empty((0, n)), np.empty((0, q + n_f))
    return MemoryStore(X, Y, traj, step, meta)
