"""Scenario documents: the full problem description for one servoing task.

A scenario is a JSON file carrying camera intrinsics, the 3-D target points,
the goal pose, visibility regions, actuation bounds, cost weights, horizon
settings, tolerances, and the pose box used to sample starting camera poses.
The goal features and goal depths are derived once at load time.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from . import camera
from .camera import CameraPose, Intrinsics
from .errors import NonPositiveDepth, SchemaError, ValidationError
from .model import KeepInBox, KeepOutRegion, Weights


@dataclass(frozen=True)
class PoseBox:
    """Uniform sampling ranges for start poses.

    Positions are absolute world coordinates; orientations are the goal
    orientation composed with a rotation vector drawn from the given range.
    """

    position_min: np.ndarray
    position_max: np.ndarray
    rotvec_min: np.ndarray
    rotvec_max: np.ndarray

    def __post_init__(self):
        for name in ("position_min", "position_max", "rotvec_min", "rotvec_max"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))
        if np.any(self.position_min > self.position_max) or np.any(self.rotvec_min > self.rotvec_max):
            raise ValueError("pose box must have min <= max componentwise")

    def low(self) -> np.ndarray:
        return np.concatenate([self.position_min, self.rotvec_min])

    def high(self) -> np.ndarray:
        return np.concatenate([self.position_max, self.rotvec_max])


@dataclass(frozen=True)
class Scenario:
    intrinsics: Intrinsics
    points3d: np.ndarray
    goal_pose: CameraPose
    keepouts: tuple[KeepOutRegion, ...]
    v_min: np.ndarray
    v_max: np.ndarray
    weights: Weights
    Np: int
    Nc: int
    Ts: float
    conv_tol: float
    violation_tol: float
    time_limit: float
    pose_box: PoseBox
    s_star: np.ndarray = field(init=False)
    goal_depths: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "points3d", np.asarray(self.points3d, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "v_min", np.asarray(self.v_min, dtype=float).reshape(6))
        object.__setattr__(self, "v_max", np.asarray(self.v_max, dtype=float).reshape(6))
        if np.any(self.v_min >= self.v_max):
            raise ValidationError("actuation bounds need v_min < v_max componentwise")
        try:
            s_star = camera.project(self.points3d, self.goal_pose, self.intrinsics)
        except NonPositiveDepth as exc:
            raise ValidationError(f"goal pose puts target points behind the camera: {exc}") from exc
        object.__setattr__(self, "s_star", s_star)
        object.__setattr__(self, "goal_depths",
                           camera.feature_depths(self, self.goal_pose))

    @property
    def n_f(self) -> int:
        return 2 * len(self.points3d)

    @property
    def q(self) -> int:
        return 6

    def image_box(self) -> KeepInBox:
        return KeepInBox(0.0, 0.0, float(self.intrinsics.width), float(self.intrinsics.height))

    def regions(self):
        """All visibility regions: the image keep-in box plus the keep-outs."""
        return (self.image_box(), *self.keepouts)

    def control_bounds(self, n_free: int) -> list[tuple[float, float]]:
        lo = np.tile(self.v_min, n_free)
        hi = np.tile(self.v_max, n_free)
        return list(zip(lo, hi))

    def without_keepouts(self) -> "Scenario":
        """Copy with the occlusion regions removed (image box kept)."""
        return Scenario(self.intrinsics, self.points3d, self.goal_pose, (),
                        self.v_min, self.v_max, self.weights, self.Np, self.Nc,
                        self.Ts, self.conv_tol, self.violation_tol,
                        self.time_limit, self.pose_box)

    def with_horizon(self, Np: int, Nc: int | None = None) -> "Scenario":
        return Scenario(self.intrinsics, self.points3d, self.goal_pose, self.keepouts,
                        self.v_min, self.v_max, self.weights, Np, Nc or self.Nc,
                        self.Ts, self.conv_tol, self.violation_tol,
                        self.time_limit, self.pose_box)


def _get(doc: dict, path: str, typ=None):
    node: Any = doc
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            raise SchemaError(path, "missing required field")
        node = node[part]
    if typ is not None and not isinstance(node, typ):
        raise SchemaError(path, f"expected {typ.__name__ if not isinstance(typ, tuple) else 'number'}")
    return node


def _num(doc: dict, path: str) -> float:
    val = _get(doc, path)
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise SchemaError(path, "expected a number")
    return float(val)


def scenario_hash(doc: dict) -> str:
    """Digest of the physics fields only, so sampling-box variants of one
    geometry share a memory file."""
    physics = {k: doc[k] for k in
               ("intrinsics", "points3d", "goal_pose", "keepouts", "bounds",
                "weights", "horizon") if k in doc}
    blob = json.dumps(physics, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def parse_scenario(doc: dict) -> Scenario:
    """Build and validate a Scenario from a parsed JSON document."""
    intr = Intrinsics(
        fu=_num(doc, "intrinsics.fu"), fv=_num(doc, "intrinsics.fv"),
        cu=_num(doc, "intrinsics.cu"), cv=_num(doc, "intrinsics.cv"),
        width=int(_num(doc, "intrinsics.width")), height=int(_num(doc, "intrinsics.height")))

    points = _get(doc, "points3d", list)
    if len(points) < 3:
        raise SchemaError("points3d", "need at least 3 target points")
    for i, p in enumerate(points):
        if not (isinstance(p, list) and len(p) == 3):
            raise SchemaError(f"points3d[{i}]", "expected [x, y, z]")

    gp = _get(doc, "goal_pose", dict)
    pos = _get({"goal_pose": gp}, "goal_pose.position", list)
    quat = _get({"goal_pose": gp}, "goal_pose.quaternion", list)
    if len(pos) != 3 or len(quat) != 4:
        raise SchemaError("goal_pose", "position needs 3 entries, quaternion 4 (w,x,y,z)")
    goal_pose = CameraPose(np.array(pos, dtype=float), np.array(quat, dtype=float))

    keepouts = []
    for i, ko in enumerate(doc.get("keepouts", [])):
        try:
            keepouts.append(KeepOutRegion(
                cu0=float(ko["cu0"]), cv0=float(ko["cv0"]),
                au=float(ko["au"]), av=float(ko["av"]),
                p_exp=float(ko.get("p_exp", 4.0))))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"keepouts[{i}]", str(exc)) from exc

    v_lin = _num(doc, "bounds.v_lin")
    v_ang = _num(doc, "bounds.v_ang")
    if v_lin <= 0 or v_ang <= 0:
        raise SchemaError("bounds", "velocity bounds must be positive")
    v_max = np.array([v_lin] * 3 + [v_ang] * 3)

    k_q = _num(doc, "weights.kQ")
    r_diag = _get(doc, "weights.R_diag", list)
    if len(r_diag) != 6:
        raise SchemaError("weights.R_diag", "expected 6 entries")
    n_f = 2 * len(points)
    weights = Weights(Q=k_q * np.eye(n_f), R=np.diag([float(r) for r in r_diag]),
                      ramp_radius=_num(doc, "weights.ramp_radius"),
                      r_floor=_num(doc, "weights.R_floor"),
                      ramp_cutoff=float(doc["weights"].get("ramp_cutoff", 12.0)))

    box = _get(doc, "sampling.pose_box", dict)
    try:
        pose_box = PoseBox(np.array(box["position"][0], dtype=float),
                           np.array(box["position"][1], dtype=float),
                           np.array(box["rotvec"][0], dtype=float),
                           np.array(box["rotvec"][1], dtype=float))
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        raise SchemaError("sampling.pose_box", str(exc)) from exc

    Np = int(_num(doc, "horizon.Np"))
    Nc = int(_num(doc, "horizon.Nc"))
    if Np < 2 or not 1 <= Nc <= Np - 1:
        raise SchemaError("horizon", f"need Np >= 2 and 1 <= Nc <= Np-1, got Np={Np}, Nc={Nc}")

    scenario = Scenario(
        intrinsics=intr, points3d=np.array(points, dtype=float), goal_pose=goal_pose,
        keepouts=tuple(keepouts), v_min=-v_max, v_max=v_max, weights=weights,
        Np=Np, Nc=Nc, Ts=_num(doc, "horizon.Ts"),
        conv_tol=_num(doc, "tolerances.conv_px"),
        violation_tol=_num(doc, "tolerances.violation_px"),
        time_limit=_num(doc, "tolerances.time_limit_s"),
        pose_box=pose_box)

    # Goal features must themselves be visible and unoccluded.
    from .model import max_violation_px
    if max_violation_px(scenario.s_star, scenario.regions()) > 0:
        raise ValidationError("goal features violate a visibility region")
    return scenario


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError("<document>", f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError("<document>", "top-level value must be an object")
    return parse_scenario(doc)


def load_scenario_doc(path: str | Path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def builtin_scenario_path(name: str) -> Path:
    """Filesystem path of a bundled scenario (e.g. 'sim_paper', 'stall_case')."""
    fname = name if name.endswith(".json") else f"{name}.json"
    ref = resources.files("vpcmemo") / "scenarios" / fname
    with resources.as_file(ref) as p:
        return Path(p)
