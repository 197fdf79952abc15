"""``stiffprint`` command line.

Exit codes: 0 success, 2 invalid configuration or input, 3 infeasible
planning problem, 4 numerical failure.
"""

from __future__ import annotations

import functools
import logging
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import __version__
from .beam import SingularWidthError
from .calibration import CalibrationError, SpecimenDataset, calibrate, load_params, save_params, synthesize_dataset
from .config import ConfigError, load_config
from .harness import (
    RUNNERS,
    _write_csv,
    initial_plan,
    read_report,
    record_summary,
    run_monte_carlo,
    save_comparison,
    stiffness_by_stage,
    trial_seed,
    write_manifest,
    write_record,
    write_summary,
)
from .planner import InfeasibleProblemError, MaxIterationsError

EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERICAL = 4


def _guarded(fn):
    """Translate library errors into the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except InfeasibleProblemError as exc:
            click.echo(f"infeasible: {exc}", err=True)
            sys.exit(EXIT_INFEASIBLE)
        except (MaxIterationsError, SingularWidthError, CalibrationError,
                FloatingPointError, np.linalg.LinAlgError) as exc:
            click.echo(f"numerical failure: {exc}", err=True)
            sys.exit(EXIT_NUMERICAL)

    return wrapper


def _load(config: str, seed: int | None = None, trials: int | None = None, jobs: int | None = None):
    cfg = load_config(config)
    overrides = {k: v for k, v in (("seed", seed), ("trials", trials), ("parallelism", jobs)) if v is not None}
    if overrides:
        try:
            cfg = cfg.with_overrides(**overrides)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return cfg


config_option = click.option(
    "--config", "config", default="desk", show_default=True,
    help="TOML config file, or a bundled name (full, desk).",
)
out_option = click.option(
    "--out", "out", type=click.Path(file_okay=False, path_type=Path), required=True,
    help="Output directory.",
)


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", count=True, help="Log more (repeatable).")
def main(verbose: int):
    """Stiffness-targeted width control for printed cantilever beams."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command("calibrate")
@click.argument("dataset", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--layers", type=int, default=250, show_default=True, help="Layers per specimen.")
@click.option("--stiffness-mode", type=click.Choice(["reciprocal_of_mean", "mean_of_reciprocals"]),
              default="reciprocal_of_mean", show_default=True)
@click.option("--sigma-o-form", type=click.Choice(["verbatim", "reading"]), default="verbatim",
              show_default=True, help="sigma_o with the (u+gamma)/alpha factor, or the plain reading-noise std.")
@click.option("--out", "out", type=click.Path(dir_okay=False, path_type=Path), required=True,
              help="Parameter file to write.")
@_guarded
def calibrate_cmd(dataset: Path, layers: int, stiffness_mode: str, sigma_o_form: str, out: Path):
    """Identify model parameters from a specimen dataset CSV."""
    ds = SpecimenDataset.from_csv(dataset, layers)
    result = calibrate(ds, stiffness_mode, verbatim_sigma_o=sigma_o_form == "verbatim")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_params(result.params, out, {
        "source": str(dataset),
        "stiffness_mode": stiffness_mode,
        "sigma_o_form": sigma_o_form,
        "slope": result.slope,
        "intercept": result.intercept,
        "residual_norm": result.residual_norm,
    })
    p = result.params
    click.echo(f"alpha={p.alpha:.6g} gamma={p.gamma:.6g} sigma_p={p.sigma_p:.6g} sigma_o={p.sigma_o:.6g}")


@main.command("synthesize")
@click.option("--params", "params_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              default=None, help="Parameter file (default: bundled reference values).")
@click.option("--widths", default="5,10,15,20", show_default=True, help="Comma-separated widths (mm).")
@click.option("--specimens", type=int, default=3, show_default=True)
@click.option("--readings", type=int, default=5, show_default=True)
@click.option("--layers", type=int, default=250, show_default=True)
@click.option("--noise-model", type=click.Choice(["exact", "linearized"]), default="exact", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out", type=click.Path(dir_okay=False, path_type=Path), required=True,
              help="Dataset CSV to write.")
@_guarded
def synthesize_cmd(params_path, widths, specimens, readings, layers, noise_model, seed, out):
    """Simulate a calibration dataset."""
    try:
        w = tuple(float(x) for x in widths.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad --widths: {exc}") from exc
    params = load_params(params_path)
    ds = synthesize_dataset(params, w, specimens, readings, layers, seed, noise_model)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.to_csv(out)
    click.echo(f"wrote {out}")


@main.command("plan")
@config_option
@out_option
@_guarded
def plan_cmd(config: str, out: Path):
    """Write the open-loop width profile planned after the foundation."""
    cfg = _load(config)
    problem, plan = initial_plan(cfg)
    base = cfg.geometry.base_layers
    rows = [(k, cfg.geometry.base_width_mm) for k in range(1, base + 1)]
    rows += [(base + i, float(u)) for i, u in enumerate(plan.widths, start=1)]
    _write_csv(out / "plan.csv", ["stage", "u_mm"], rows)
    write_manifest(out / "manifest.json", cfg, {
        "kind": "plan",
        "cost": plan.cost,
        "predicted_final_compliance": plan.predicted_final_compliance,
        "weights": {"material": problem.weights.material, "smooth": problem.weights.smooth,
                    "variance": problem.weights.variance},
        "solver_stats": plan.stats,
    })
    click.echo(f"predicted final stiffness {1.0 / plan.predicted_final_compliance:.6g} g/mm "
               f"(target {cfg.target_stiffness:.6g})")


@main.command("run")
@config_option
@click.option("--seed", type=int, default=None, help="Base seed (overrides the config).")
@click.option("--trial", type=int, default=0, show_default=True, help="Trial index; matches `compare`.")
@click.option("--mode", type=click.Choice(list(RUNNERS)), default="closed", show_default=True)
@out_option
@_guarded
def run_cmd(config: str, seed: int | None, trial: int, mode: str, out: Path):
    """Simulate one print and write its record files."""
    cfg = _load(config, seed=seed)
    rec = RUNNERS[mode](cfg, trial_seed(cfg.seed, trial))
    write_record(rec, out, mode)
    write_manifest(out / "manifest.json", cfg, {"kind": "run", "trial": trial, "run": record_summary(rec)})
    click.echo(f"{mode}: final stiffness {rec.final_stiffness:.6g} g/mm, error {rec.pct_error:.3f}%")


@main.command("compare")
@config_option
@click.option("--seed", type=int, default=None, help="Base seed (overrides the config).")
@click.option("--trials", type=int, default=None, help="Paired trials (overrides the config).")
@click.option("--jobs", type=int, default=None, help="Worker processes (overrides the config).")
@out_option
@_guarded
def compare_cmd(config: str, seed, trials, jobs, out: Path):
    """Paired open-loop vs closed-loop Monte-Carlo comparison."""
    cfg = _load(config, seed=seed, trials=trials, jobs=jobs)
    table, results = run_monte_carlo(cfg)
    save_comparison(cfg, table, results, out)
    _echo_summary(table.aggregates())


@main.command("report")
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@_guarded
def report_cmd(run_dir: Path):
    """Regenerate summary tables and plot-ready CSV from a `compare` directory."""
    if not (run_dir / "report.csv").is_file():
        raise ConfigError(f"{run_dir} has no report.csv")
    table = read_report(run_dir)
    write_summary(table, run_dir)
    _write_csv(run_dir / "stiffness_by_stage.csv",
               ["trial", "mode", "stage", "readings", "mean_stiffness", "std_stiffness"],
               stiffness_by_stage(run_dir))
    _echo_summary(table.aggregates())


def _echo_summary(agg: dict) -> None:
    for mode, a in agg.items():
        click.echo(f"{mode:>6}: trials={a['trials']} mean={a['mean_stiffness']:.4f} g/mm "
                   f"std={a['std_stiffness']:.4f} mean|err|={a['mean_abs_error']:.4f} "
                   f"({a['mean_pct_error']:.2f}%)")


if __name__ == "__main__":
    main()
