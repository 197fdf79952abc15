"""Experiment configuration (TOML)."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .beam import Geometry, ModelParams
from .planner import PlanWeights, SolverOptions
from .sim import NOISE_MODELS, MeasurementSchedule


class ConfigError(ValueError):
    pass


BUNDLED = ("full", "desk")


@dataclass(frozen=True)
class RunConfig:
    geometry: Geometry
    believed: ModelParams
    truth: ModelParams
    u_min: float = 5.0
    u_max: float = 20.0
    target_compliance: float = 0.12
    schedule: MeasurementSchedule = MeasurementSchedule(25, 5)
    weights: PlanWeights = PlanWeights()
    normalize_weights: bool = True
    solver: SolverOptions = SolverOptions()
    trials: int = 5
    seed: int = 0
    parallelism: int = 1
    noise_model: str = "exact"
    source: str = field(default="", compare=False)

    def __post_init__(self):
        if not self.u_min < self.u_max:
            raise ConfigError(f"u_min ({self.u_min}) must be below u_max ({self.u_max})")
        if not self.u_min + self.believed.gamma > 0:
            raise ConfigError("u_min + gamma must be positive")
        if not self.target_compliance > 0:
            raise ConfigError("target compliance must be positive")
        if min(self.weights.material, self.weights.smooth, self.weights.variance) <= 0:
            raise ConfigError("all plan weights must be strictly positive")
        if self.schedule.period is None or self.schedule.period < 1:
            raise ConfigError("schedule period must be >= 1")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        if self.noise_model not in NOISE_MODELS:
            raise ConfigError(f"noise_model must be one of {NOISE_MODELS}")
        if self.geometry.base_layers < 1:
            raise ConfigError("at least one base layer is required")
        if not self.u_min <= self.geometry.base_width_mm:
            raise ConfigError("base width is below u_min; no monotone plan exists")

    @property
    def target_stiffness(self) -> float:
        return 1.0 / self.target_compliance

    def with_overrides(self, **kwargs) -> "RunConfig":
        return replace(self, **kwargs)

    def to_dict(self) -> dict:
        return {
            "geometry": asdict(self.geometry),
            "model": self.believed.to_dict(),
            "truth": {**self.truth.to_dict(), "noise_model": self.noise_model},
            "control": {
                "u_min": self.u_min,
                "u_max": self.u_max,
                "target_compliance": self.target_compliance,
                "normalize_weights": self.normalize_weights,
                "weights": asdict(self.weights),
            },
            "schedule": {
                "period": self.schedule.period,
                "readings_per_stop": self.schedule.readings_per_stop,
            },
            "solver": asdict(self.solver),
            "experiment": {
                "trials": self.trials,
                "seed": self.seed,
                "parallelism": self.parallelism,
            },
        }


def _section(doc: dict, name: str) -> dict:
    value = doc.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"[{name}] must be a table")
    return dict(value)


def from_dict(doc: dict, source: str = "") -> RunConfig:
    doc = copy.deepcopy(doc)
    try:
        geometry = Geometry(**_section(doc, "geometry"))
        model = _section(doc, "model")
        believed = ModelParams.from_dict(model)
        truth_doc = {**model, **_section(doc, "truth")}
        alpha_scale = float(truth_doc.pop("alpha_scale", 1.0))
        noise_model = str(truth_doc.pop("noise_model", "exact"))
        truth = ModelParams.from_dict(truth_doc)
        truth = replace(truth, alpha=truth.alpha * alpha_scale)
        control = _section(doc, "control")
        weights = PlanWeights(**control.pop("weights", {}))
        sched = _section(doc, "schedule")
        schedule = MeasurementSchedule(
            period=int(sched.get("period", 25)),
            readings_per_stop=int(sched.get("readings_per_stop", 5)),
        )
        solver = SolverOptions.from_dict(_section(doc, "solver"))
        exp = _section(doc, "experiment")
        return RunConfig(
            geometry=geometry,
            believed=believed,
            truth=truth,
            u_min=float(control.get("u_min", 5.0)),
            u_max=float(control.get("u_max", 20.0)),
            target_compliance=float(control.get("target_compliance", 0.12)),
            schedule=schedule,
            weights=weights,
            normalize_weights=bool(control.get("normalize_weights", True)),
            solver=solver,
            trials=int(exp.get("trials", 5)),
            seed=int(exp.get("seed", 0)),
            parallelism=int(exp.get("parallelism", 1)),
            noise_model=noise_model,
            source=source,
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration {source}: {exc}") from exc


def load_config(path_or_name: str | Path) -> RunConfig:
    """Load a TOML config from a path, or one of the bundled names ``full``/``desk``."""
    name = str(path_or_name)
    if name in BUNDLED:
        text = resources.files("stiffprint.data").joinpath(f"{name}.toml").read_text()
        source = f"bundled:{name}"
    else:
        path = Path(name)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
        source = str(path)
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {source}: {exc}") from exc
    return from_dict(doc, source)
