"""Command-line entry points: build-memory, fit-gpr, run, query.

Exit codes: 0 success, 2 validation problems (bad files, bad arguments),
3 runtime failures.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import bench, memory, regress
from .errors import (DimensionMismatch, FormatError, SchemaError,
                     ValidationError, VpcError)
from .scenario import Scenario, builtin_scenario_path, load_scenario

STRATEGY_NAMES = {"previt": "prev_iteration", "knn": "knn_memory", "gpr": "gpr_memory"}


def _resolve_scenario(spec: str) -> Scenario:
    path = Path(spec)
    if not path.exists():
        builtin = builtin_scenario_path(spec)
        if builtin.exists():
            path = builtin
        else:
            raise ValidationError(f"scenario file not found: {spec}")
    return load_scenario(path)


@click.group()
def cli():
    """Visual predictive control with a memory of motion."""


@cli.command("build-memory")
@click.option("--scenario", "scenario_spec", required=True,
              help="Scenario JSON path or bundled name (sim_paper, stall_case).")
@click.option("--trajectories", type=int, required=True, help="Successful trajectories to collect.")
@click.option("--np", "np_horizon", type=int, default=10, show_default=True)
@click.option("--ns", type=int, default=5, show_default=True,
              help="Way-point lookahead in samples.")
@click.option("--nth", type=int, default=50, show_default=True,
              help="Trajectories before the build starts querying its own store.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def build_memory_command(scenario_spec, trajectories, np_horizon, ns, nth, seed, out_path):
    """Build a memory of motion and write it as CSV."""
    scenario = _resolve_scenario(scenario_spec)
    cfg = memory.BuildConfig(Np=np_horizon, n_s=ns, n_th=nth, seed=seed)

    def progress(n_t, total, n_samples, n_failures):
        click.echo(f"\r  trajectories {n_t}/{total}  samples {n_samples}  "
                   f"discarded {n_failures}", nl=False)

    store = memory.build_memory(scenario, trajectories, cfg, out_path=out_path,
                                progress=progress)
    click.echo(f"\nwrote {store.size} samples from {trajectories} trajectories to {out_path}")


@cli.command("fit-gpr")
@click.option("--memory", "memory_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--subsample", type=int, default=20, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--scenario", "scenario_spec", default=None,
              help="Optional scenario for the goal features; defaults to the "
                   "store's terminal way point.")
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False),
              help="Defaults to <memory>.gpr.")
def fit_gpr_command(memory_path, subsample, seed, scenario_spec, out_path):
    """Fit the GP regressor over a memory file and persist it."""
    store = memory.load_memory(memory_path)
    s_star = (_resolve_scenario(scenario_spec).s_star if scenario_spec
              else store.s_star_estimate())
    model = regress.gpr_fit(store, subsample, s_star, regress.GprFitConfig(seed=seed))
    out_path = out_path or f"{memory_path}.gpr"
    regress.save_gpr(model, out_path)
    click.echo(f"fitted on {len(model.X)} rows (subsample {subsample}), "
               f"nmll {model.nmll:.3f}; wrote {out_path}")


@cli.command("run")
@click.option("--scenario", "scenario_spec", required=True)
@click.option("--strategy", type=click.Choice(sorted(STRATEGY_NAMES)), required=True)
@click.option("--np", "np_horizon", type=int, default=None,
              help="Preview-window override; defaults to the scenario's value.")
@click.option("--memory", "memory_path", default=None, type=click.Path(dir_okay=False),
              help="Memory CSV; required for knn and gpr strategies.")
@click.option("--trials", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--trigger", type=float, default=20.0, show_default=True,
              help="Memory activation distance from the occlusions, pixels.")
@click.option("--report", "report_path", default=None, type=click.Path(dir_okay=False))
@click.option("--traj-dir", default=None, type=click.Path(file_okay=False))
def run_command(scenario_spec, strategy, np_horizon, memory_path, trials, seed,
                trigger, report_path, traj_dir):
    """Benchmark one strategy over seeded random starts."""
    scenario = _resolve_scenario(scenario_spec)
    variant = STRATEGY_NAMES[strategy]
    store = gpr_model = None
    if variant != "prev_iteration":
        if memory_path is None:
            raise ValidationError(f"strategy {strategy!r} needs --memory")
        store = memory.load_memory(memory_path)
        if variant == "gpr_memory":
            gpr_path = Path(f"{memory_path}.gpr")
            if gpr_path.exists():
                gpr_model = regress.load_gpr(gpr_path)
            else:
                gpr_model = regress.gpr_fit(store, 20, store.s_star_estimate(),
                                            regress.GprFitConfig(seed=seed))
    if traj_dir is not None:
        Path(traj_dir).mkdir(parents=True, exist_ok=True)
    spec = bench.StrategySpec(name=f"{strategy}_np{np_horizon or scenario.Np}",
                              variant=variant, Np=np_horizon,
                              trigger_distance=trigger)
    report = bench.run_benchmark(scenario, [spec], trials, seed, memory=store,
                                 gpr_model=gpr_model, traj_dir=traj_dir)
    click.echo(bench.format_stats_table(report))
    if report_path is not None:
        bench.write_report(report, report_path)
        click.echo(f"report written to {report_path}")


@cli.command("query")
@click.option("--memory", "memory_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--regressor", type=click.Choice(["knn", "gpr"]), required=True)
@click.option("--x", "x_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="JSON query: {\"s\": [...], \"area\": a, \"angle\": al} or {\"x\": [...]}.")
@click.option("--k", type=int, default=1, show_default=True, help="Neighbors for knn.")
def query_command(memory_path, regressor, x_path, k):
    """Query a memory file and print the predicted command and way point."""
    store = memory.load_memory(memory_path)
    doc = json.loads(Path(x_path).read_text())
    if "x" in doc:
        x_hat = np.asarray(doc["x"], dtype=float)
    else:
        try:
            x_hat = np.concatenate([np.asarray(doc["s"], dtype=float),
                                    [float(doc["area"]), float(doc["angle"])]])
        except (KeyError, TypeError) as exc:
            raise SchemaError("x", f"query JSON needs 'x' or 's'+'area'+'angle': {exc}")
    if regressor == "knn":
        result = regress.knn_query(store, x_hat, k)
    else:
        gpr_path = Path(f"{memory_path}.gpr")
        if gpr_path.exists():
            model = regress.load_gpr(gpr_path)
        else:
            model = regress.gpr_fit(store, 20, store.s_star_estimate())
        result = regress.gpr_query(model, x_hat)
    q = store.q
    click.echo(json.dumps({
        "regressor": result.regressor,
        "y_hat": [float(v) for v in result.y_hat],
        "command": [float(v) for v in result.y_hat[:q]],
        "waypoint": [float(v) for v in result.y_hat[q:]],
        "query_time_s": result.query_time}, indent=2))


def main():
    try:
        cli(standalone_mode=False)
    except click.exceptions.Abort:
        sys.exit(130)
    except click.ClickException as exc:
        exc.show()
        sys.exit(2)
    except (SchemaError, ValidationError, FormatError, DimensionMismatch, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    except (VpcError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(3)


if __name__ == "__main__":
    main()
