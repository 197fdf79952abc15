"""Open-loop and closed-loop print experiments and their Monte-Carlo comparison."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .beam import final_compliance_split
from .config import RunConfig
from .estimator import (
    EstimatorState,
    init_foundation,
    measurement_update,
    no_measurement,
    process_update,
)
from .planner import (
    InfeasibleProblemError,
    MaxIterationsError,
    Plan,
    PlanProblem,
    PlanWeights,
    normalized_weights,
    solve,
)
from .sim import NoiseStream, PrintState, Reading, deposit_layer, take_readings

log = logging.getLogger(__name__)

MODES = ("open", "closed")


@dataclass
class StageRow:
    stage: int
    commanded_u: float
    realized_w: float
    readings: int = 0
    mean_observed: float = math.nan
    predicted_final_compliance: float = math.nan
    replanned: bool = False
    fallback: bool = False


@dataclass
class RunRecord:
    mode: str
    seed: int
    target_compliance: float
    rows: list[StageRow] = field(default_factory=list)
    readings: list[Reading] = field(default_factory=list)
    final_compliance: float = math.nan
    solver_stats: list[dict] = field(default_factory=list)
    redraws: int = 0

    @property
    def target_stiffness(self) -> float:
        return 1.0 / self.target_compliance

    @property
    def final_stiffness(self) -> float:
        return 1.0 / self.final_compliance

    @property
    def abs_error(self) -> float:
        return abs(self.final_stiffness - self.target_stiffness)

    @property
    def pct_error(self) -> float:
        return 100.0 * self.abs_error / self.target_stiffness

    @property
    def commanded(self) -> np.ndarray:
        return np.array([r.commanded_u for r in self.rows])

    @property
    def realized(self) -> np.ndarray:
        return np.array([r.realized_w for r in self.rows])

    @property
    def fallbacks(self) -> int:
        return sum(r.fallback for r in self.rows)

    @property
    def invalid_readings(self) -> int:
        return sum(not r.valid for r in self.readings)


def trial_seed(base_seed: int, trial: int) -> int:
    return int(np.random.SeedSequence([base_seed, trial]).generate_state(1, np.uint64)[0])


# -- planning helpers -------------------------------------------------------


def _problem(config: RunConfig, est: EstimatorState, prev_width: float, weights: PlanWeights) -> PlanProblem:
    return PlanProblem(
        stage=est.stage + 1,
        horizon_end=config.geometry.total_layers,
        prefix_mean=est.mean,
        params=config.believed,
        u_min=config.u_min,
        u_max=config.u_max,
        target_compliance=config.target_compliance,
        weights=weights,
        prev_width=prev_width,
    )


def initial_plan(config: RunConfig) -> tuple[PlanProblem, Plan]:
    """Plan from the foundation-only estimate; shared by both modes.

    Weights are normalised here once and reused by every later re-plan, so
    re-solving a deterministic problem reproduces the tail of this plan.
    """
    est = init_foundation(config.geometry, config.believed)
    problem = _problem(config, est, config.geometry.base_width_mm, config.weights)
    if config.normalize_weights:
        problem = _problem(config, est, config.geometry.base_width_mm,
                           normalized_weights(problem, config.weights))
    return problem, solve(problem, config.solver)


def _print_foundation(config: RunConfig, noise: NoiseStream, record: RunRecord) -> PrintState:
    state = PrintState(config.truth, noise_model=config.noise_model)
    u = config.geometry.base_width_mm
    for _ in range(config.geometry.base_layers):
        state = deposit_layer(state, u, noise)
        record.rows.append(StageRow(state.stage, u, state.realized_widths_mm[-1]))
    return state


def _log_readings(row: StageRow, readings: list[Reading]) -> None:
    valid = [r.compliance for r in readings if r.valid]
    row.readings = len(valid)
    if valid:
        row.mean_observed = float(np.mean(valid))


def _finish(record: RunRecord, state: PrintState, noise: NoiseStream) -> RunRecord:
    record.final_compliance = state.true_compliance()
    record.redraws = noise.redraws
    return record


def run_open_loop(config: RunConfig, seed: int) -> RunRecord:
    """Plan once after the foundation and print the whole plan blind.

    Readings are still taken at the scheduled stops for logging; they are
    never fed back.
    """
    noise = NoiseStream(seed)
    record = RunRecord("open", seed, config.target_compliance)
    state = _print_foundation(config, noise, record)
    problem, plan = initial_plan(config)
    record.solver_stats.append({"stage": problem.stage, **plan.stats})
    est = init_foundation(config.geometry, config.believed)
    base = config.geometry.base_layers
    widths = plan.widths
    for i, u in enumerate(widths, start=1):
        state = deposit_layer(state, u, noise)
        est = process_update(est, u)
        row = StageRow(state.stage, float(u), state.realized_widths_mm[-1])
        row.predicted_final_compliance = final_compliance_split(
            est.mean, widths[i:], config.believed, config.geometry.total_layers)
        if config.schedule.is_stop(i):
            readings = take_readings(state, config.schedule.readings_per_stop, noise)
            record.readings.extend(readings)
            _log_readings(row, readings)
        record.rows.append(row)
    assert state.stage == base + widths.size
    return _finish(record, state, noise)


def run_closed_loop(config: RunConfig, seed: int) -> RunRecord:
    """Print with measurement stops; re-estimate and re-plan the remainder at each stop."""
    noise = NoiseStream(seed)
    record = RunRecord("closed", seed, config.target_compliance)
    state = _print_foundation(config, noise, record)
    problem, plan = initial_plan(config)
    weights = problem.weights
    record.solver_stats.append({"stage": problem.stage, **plan.stats})
    est = init_foundation(config.geometry, config.believed)
    total = config.geometry.total_layers
    remaining = list(plan.widths)
    i = 0
    while remaining:
        u = float(remaining.pop(0))
        i += 1
        state = deposit_layer(state, u, noise)
        est = process_update(est, u)
        row = StageRow(state.stage, u, state.realized_widths_mm[-1])
        if config.schedule.is_stop(i):
            readings = take_readings(state, config.schedule.readings_per_stop, noise)
            record.readings.extend(readings)
            _log_readings(row, readings)
            for r in readings:
                if r.valid:
                    est = measurement_update(est, r.compliance)
            if remaining:
                remaining, row.replanned, row.fallback = _replan(config, est, u, weights, remaining, record)
        else:
            est = no_measurement(est)
        row.predicted_final_compliance = final_compliance_split(est.mean, remaining, config.believed, total)
        record.rows.append(row)
    return _finish(record, state, noise)


def _replan(config, est, prev_u, weights, remaining, record) -> tuple[list, bool, bool]:
    problem = _problem(config, est, prev_u, weights)
    try:
        plan = solve(problem, config.solver, x0=np.asarray(remaining))
    except InfeasibleProblemError as exc:
        log.info("stage %d: re-plan infeasible (%s); keeping previous plan", problem.stage, exc)
        record.solver_stats.append({"stage": problem.stage, "infeasible": True})
        return remaining, False, True
    except MaxIterationsError as exc:
        log.warning("stage %d: re-plan did not converge; keeping previous plan", problem.stage)
        record.solver_stats.append({"stage": problem.stage, "max_iterations": True, **(exc.best.stats if exc.best else {})})
        return remaining, False, True
    record.solver_stats.append({"stage": problem.stage, **plan.stats})
    return list(plan.widths), True, False


RUNNERS = {"open": run_open_loop, "closed": run_closed_loop}


# -- Monte Carlo --------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    trial: int
    mode: str
    final_stiffness: float
    abs_error: float
    pct_error: float


@dataclass
class ReportTable:
    target_stiffness: float
    rows: list[ReportRow]

    def aggregates(self) -> dict:
        out = {}
        for mode in MODES:
            rows = [r for r in self.rows if r.mode == mode]
            if not rows:
                continue
            k = np.array([r.final_stiffness for r in rows])
            err = np.array([r.abs_error for r in rows])
            pct = np.array([r.pct_error for r in rows])
            out[mode] = {
                "trials": len(rows),
                "mean_stiffness": float(np.mean(k)),
                # sample std (ddof=1); zero for a single trial
                "std_stiffness": float(np.std(k, ddof=1)) if len(rows) > 1 else 0.0,
                "mean_abs_error": float(np.mean(err)),
                "mean_pct_error": float(np.mean(pct)),
            }
        return out


def _trial(args) -> tuple[int, RunRecord, RunRecord]:
    config, trial = args
    seed = trial_seed(config.seed, trial)
    return trial, run_open_loop(config, seed), run_closed_loop(config, seed)


def run_monte_carlo(config: RunConfig) -> tuple[ReportTable, list[tuple[int, RunRecord, RunRecord]]]:
    """Paired open/closed trials; trial ``i`` of both modes shares one noise seed."""
    jobs = [(config, t) for t in range(config.trials)]
    if config.parallelism > 1:
        with ProcessPoolExecutor(max_workers=config.parallelism) as pool:
            results = list(pool.map(_trial, jobs))
    else:
        results = [_trial(j) for j in jobs]
    rows = []
    for trial, open_rec, closed_rec in results:
        for rec in (open_rec, closed_rec):
            rows.append(ReportRow(trial, rec.mode, rec.final_stiffness, rec.abs_error, rec.pct_error))
    return ReportTable(config.target_stiffness, rows), results


# -- persistence ----------------------------------------------------------------

REPORT_FIELDS = ["trial", "mode", "final_stiffness_g_per_mm", "abs_error", "pct_error"]
SUMMARY_FIELDS = ["mode", "trials", "mean_stiffness", "std_stiffness", "mean_abs_error", "mean_pct_error"]


def _fmt(x) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


def _write_csv(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_record(record: RunRecord, out_dir: Path, prefix: str) -> None:
    out_dir = Path(out_dir)
    _write_csv(out_dir / f"{prefix}_widths.csv", ["stage", "u_mm", "w_mm"],
               ((r.stage, r.commanded_u, r.realized_w) for r in record.rows))
    _write_csv(out_dir / f"{prefix}_measurements.csv",
               ["stage", "reading_index", "compliance_mm_per_g", "valid"],
               ((r.stage, r.reading_index, r.compliance, r.valid) for r in record.readings))
    _write_csv(out_dir / f"{prefix}_stages.csv",
               ["stage", "u_mm", "w_mm", "readings", "mean_observed_compliance",
                "predicted_final_compliance", "replanned", "fallback"],
               ((r.stage, r.commanded_u, r.realized_w, r.readings, r.mean_observed,
                 r.predicted_final_compliance, r.replanned, r.fallback) for r in record.rows))


def record_summary(record: RunRecord) -> dict:
    return {
        "mode": record.mode,
        "seed": record.seed,
        "final_compliance": record.final_compliance,
        "final_stiffness": record.final_stiffness,
        "abs_error": record.abs_error,
        "pct_error": record.pct_error,
        "fallbacks": record.fallbacks,
        "invalid_readings": record.invalid_readings,
        "redraws": record.redraws,
        "solver_stats": record.solver_stats,
    }


def write_report(table: ReportTable, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    _write_csv(out_dir / "report.csv", REPORT_FIELDS,
               ((r.trial, r.mode, r.final_stiffness, r.abs_error, r.pct_error) for r in table.rows))
    write_summary(table, out_dir)


def write_summary(table: ReportTable, out_dir: Path) -> None:
    agg = table.aggregates()
    _write_csv(Path(out_dir) / "summary.csv", SUMMARY_FIELDS,
               ([mode] + [agg[mode][k] for k in SUMMARY_FIELDS[1:]] for mode in agg))


def read_report(out_dir: Path, target_stiffness: float | None = None) -> ReportTable:
    rows = []
    with (Path(out_dir) / "report.csv").open(newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(ReportRow(int(rec["trial"]), rec["mode"], float(rec["final_stiffness_g_per_mm"]),
                                  float(rec["abs_error"]), float(rec["pct_error"])))
    if target_stiffness is None:
        manifest = Path(out_dir) / "manifest.json"
        target_stiffness = json.loads(manifest.read_text())["target_stiffness"] if manifest.exists() else math.nan
    return ReportTable(target_stiffness, rows)


def write_manifest(path: Path, config: RunConfig, payload: dict) -> None:
    doc = {
        "library_version": __version__,
        "config_source": config.source,
        "config": config.to_dict(),
        "target_stiffness": config.target_stiffness,
        **payload,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def save_comparison(config: RunConfig, table: ReportTable, results, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    for trial, open_rec, closed_rec in results:
        for rec in (open_rec, closed_rec):
            write_record(rec, out_dir / "trials", f"trial_{trial:04d}_{rec.mode}")
    write_report(table, out_dir)
    write_manifest(out_dir / "manifest.json", config, {
        "kind": "compare",
        "seeds": {str(t): o.seed for t, o, _ in results},
        "aggregates": table.aggregates(),
        "trials": {str(t): {"open": record_summary(o), "closed": record_summary(c)} for t, o, c in results},
    })


def stiffness_by_stage(out_dir: Path) -> list[tuple]:
    """Per-trial mean and std of the stiffness readings at each stop (plot-ready)."""
    rows = []
    for path in sorted((Path(out_dir) / "trials").glob("trial_*_measurements.csv")):
        _, trial, mode, _ = path.stem.split("_")
        by_stage: dict[int, list[float]] = {}
        with path.open(newline="") as fh:
            for rec in csv.DictReader(fh):
                if rec["valid"] == "1":
                    by_stage.setdefault(int(rec["stage"]), []).append(1.0 / float(rec["compliance_mm_per_g"]))
        for stage in sorted(by_stage):
            k = np.array(by_stage[stage])
            rows.append((int(trial), mode, stage, k.size, float(k.mean()),
                         float(k.std(ddof=1)) if k.size > 1 else 0.0))
    return rows
