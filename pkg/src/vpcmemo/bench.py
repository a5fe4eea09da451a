"""Seeded benchmark orchestration: shared start lists, statistics, artifacts.

A benchmark draws one list of valid starting poses from the seed and runs
every requested strategy on that identical list, so success rates, solver
times, and normalized costs are directly comparable. Per-trial records and
trajectory CSVs are plain artifacts meant for offline inspection.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .controller import EpisodeResult, Strategy, run_episode
from .errors import EmptyTrialSet, IoError
from .memory import MemoryStore, generate_initial_features
from .regress import GprModel
from .scenario import Scenario
from .solver import SolverConfig


@dataclass(frozen=True)
class StrategySpec:
    """One benchmark row: a strategy variant plus its horizon override."""

    name: str
    variant: str
    Np: Optional[int] = None
    trigger_distance: float = 20.0
    knn_k: int = 1


@dataclass
class BenchmarkStats:
    strategy: str
    success_rate: float        # r, percent
    mean_solve_time: float     # t_c bar, seconds per solver call
    mean_cost: float           # l bar: per-trial mean step cost / Np, averaged
    trials: int
    seed: int


def _pose_record(pose) -> dict:
    return {"position": [float(v) for v in pose.position],
            "quaternion": [float(v) for v in pose.quaternion]}


def _trial_record(index: int, start, episode: EpisodeResult) -> dict:
    mean_cost = float(np.mean(episode.step_costs)) if episode.step_costs else 0.0
    mean_solve = float(np.mean(episode.solve_times)) if episode.solve_times else 0.0
    return {
        "trial": index,
        "start_pose": _pose_record(start),
        "success": episode.success,
        "failure_reason": episode.failure_reason.value,
        "steps": episode.steps,
        "mean_cost": mean_cost,
        "mean_solve_time": mean_solve,
        "final_rms": episode.final_rms,
        "sim_time": episode.sim_time,
    }


def start_list_hash(poses) -> str:
    blob = b"".join(np.concatenate([p.position, p.quaternion]).tobytes() for p in poses)
    return hashlib.sha256(blob).hexdigest()[:12]


def run_benchmark(scenario: Scenario, strategies: list[StrategySpec], trials: int,
                  seed: int, memory: Optional[MemoryStore] = None,
                  gpr_model: Optional[GprModel] = None,
                  solver_cfg: Optional[SolverConfig] = None,
                  traj_dir: Optional[str] = None,
                  progress=None) -> dict:
    """Run every strategy over the same seeded start list; returns the report.

    The report hash-stamps the start list so fairness is checkable, and
    divides each trial's mean step cost by the strategy's horizon before
    averaging into the normalized cost column.
    """
    if trials < 1:
        raise EmptyTrialSet("benchmark needs at least one trial")
    rng = np.random.default_rng(seed)
    starts = [generate_initial_features(scenario, rng)[1] for _ in range(trials)]
    shash = start_list_hash(starts)

    report = {"seed": seed, "trials": trials, "start_list_hash": shash,
              "strategies": []}
    for spec in strategies:
        scn = scenario.with_horizon(spec.Np) if spec.Np else scenario
        strategy = Strategy(variant=spec.variant,
                            trigger_distance=spec.trigger_distance,
                            memory=memory, gpr=gpr_model, knn_k=spec.knn_k)
        records, all_solve_times, norm_costs = [], [], []
        for i, start in enumerate(starts):
            episode = run_episode(scn, strategy, start, cfg=solver_cfg)
            records.append(_trial_record(i, start, episode))
            all_solve_times.extend(episode.solve_times)
            norm_costs.append(records[-1]["mean_cost"] / scn.Np)
            if traj_dir is not None:
                emit_trajectory(episode, Path(traj_dir) / f"{spec.name}_trial{i:03d}.csv",
                                Ts=scn.Ts)
            if progress is not None:
                progress(spec.name, i + 1, trials, records[-1])
        stats = BenchmarkStats(
            strategy=spec.name,
            success_rate=100.0 * sum(r["success"] for r in records) / trials,
            mean_solve_time=float(np.mean(all_solve_times)) if all_solve_times else 0.0,
            mean_cost=float(np.mean(norm_costs)),
            trials=trials, seed=seed)
        report["strategies"].append({
            "name": spec.name, "variant": spec.variant, "Np": scn.Np,
            "trigger_distance": spec.trigger_distance,
            "stats": {"r_percent": stats.success_rate,
                      "mean_solve_time_s": stats.mean_solve_time,
                      "mean_normalized_cost": stats.mean_cost},
            "trials": records})
    return report


def stats_from_report(report: dict) -> list[BenchmarkStats]:
    return [BenchmarkStats(strategy=row["name"],
                           success_rate=row["stats"]["r_percent"],
                           mean_solve_time=row["stats"]["mean_solve_time_s"],
                           mean_cost=row["stats"]["mean_normalized_cost"],
                           trials=report["trials"], seed=report["seed"])
            for row in report["strategies"]]


def format_stats_table(report: dict) -> str:
    lines = [f"{'strategy':<22} {'r (%)':>7} {'t_c (s)':>9} {'l_bar':>9}"]
    for row in report["strategies"]:
        st = row["stats"]
        lines.append(f"{row['name']:<22} {st['r_percent']:>7.1f} "
                     f"{st['mean_solve_time_s']:>9.4f} {st['mean_normalized_cost']:>9.2f}")
    return "\n".join(lines)


def write_report(report: dict, path: str | Path) -> None:
    try:
        Path(path).write_text(json.dumps(report, indent=2) + "\n")
    except OSError as exc:
        raise IoError(str(exc)) from exc


def emit_trajectory(episode: EpisodeResult, path: str | Path, Ts: float) -> None:
    """Per-cycle CSV: time, measured features, applied command, diagnostics.

    The way point columns are blank on cycles where the memory was inactive;
    an episode that converged before its first cycle yields a header-only file.
    """
    path = Path(path)
    n_f = len(episode.feature_trajectory[0]) if episode.feature_trajectory else 0
    q = len(episode.command_trajectory[0]) if episode.command_trajectory else 6
    if n_f == 0 and episode.command_trajectory:
        raise IoError("episode has commands but no features")
    if n_f == 0:
        n_f = 8
    header = (["t"] + [f"s_{i + 1}" for i in range(n_f)]
              + [f"v_{i + 1}" for i in range(q)]
              + ["cost", "solve_time", "memory_active"]
              + [f"waypoint_{i + 1}" for i in range(n_f)])
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for k in range(episode.steps):
                wp = episode.waypoints[k]
                wp_cols = ([f"{v:.17g}" for v in wp] if wp is not None else [""] * n_f)
                writer.writerow(
                    [f"{k * Ts:.17g}"]
                    + [f"{v:.17g}" for v in episode.feature_trajectory[k]]
                    + [f"{v:.17g}" for v in episode.command_trajectory[k]]
                    + [f"{episode.step_costs[k]:.17g}", f"{episode.solve_times[k]:.17g}",
                       str(int(episode.memory_active[k]))]
                    + wp_cols)
    except OSError as exc:
        raise IoError(str(exc)) from exc


# Canonical comparison rows, mirroring the published full-scale study layout.
def standard_strategies(Np_short: int = 3, Np_long: int = 30,
                        trigger: float = 20.0) -> list[StrategySpec]:
    return [
        StrategySpec("previt_np3", "prev_iteration", Np_short),
        StrategySpec(f"previt_np{Np_long}", "prev_iteration", Np_long),
        StrategySpec("knn_np3", "knn_memory", Np_short, trigger),
        StrategySpec("gpr_np3", "gpr_memory", Np_short, trigger),
    ]


# Full-scale reference statistics (100 trials) for trend comparison; never
# asserted, only reported next to desk-scale runs.
REFERENCE_FULL_SCALE = {
    "previt_np3": {"r_percent": 80.0, "mean_solve_time_s": 0.085, "mean_normalized_cost": 49.3},
    "previt_np30": {"r_percent": 83.0, "mean_solve_time_s": 0.550, "mean_normalized_cost": 52.9},
    "knn_np3": {"r_percent": 92.0, "mean_solve_time_s": 0.074, "mean_normalized_cost": 19.6},
    "gpr_np3": {"r_percent": 93.0, "mean_solve_time_s": 0.080, "mean_normalized_cost": 16.4},
}
