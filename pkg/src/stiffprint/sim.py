"""Ground-truth simulator of the printer and the stiffness probe.

The simulator uses the exact noise entry points: the realised width is
``w = u + eps`` and a reading is the reciprocal of a noisy stiffness. The
estimator only ever sees the linearised versions of these, so its model is
deliberately approximate.

``noise_model="linearized"`` swaps both entry points for their first-order
expansions, ``1/(w + gamma) = a (1 - eps a)`` with ``a = 1/(u + gamma)`` and
``o = C (1 - nu C)``. That is the generative model the calibration formulas
are derived from; the realised width is then reported as the effective
width ``1/s - gamma``.

Random draws come from keyed Philox substreams. A draw is addressed by
``(kind, index, ...)`` rather than by its position in a global sequence, so
two runs that deposit layer ``k`` with the same command see the same noise
for that layer no matter what happened in between.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .beam import ModelParams, SingularWidthError, compliance

log = logging.getLogger(__name__)

_PROCESS = 1
_MEASURE = 2

# Rejection sampling guard; with sane parameters a handful of attempts suffices.
MAX_REDRAWS = 10_000

NOISE_MODELS = ("exact", "linearized")


class NoiseStream:
    """Counter-based source of standard normal draws.

    ``draws`` and ``redraws`` count what has been consumed; they are
    diagnostics only and never influence the values produced.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.draws = 0
        self.redraws = 0

    def substream(self, kind: int, index: int, sub: int = 0) -> np.random.Generator:
        bitgen = np.random.Philox(key=self.seed, counter=[0, sub, index, kind])
        return np.random.Generator(bitgen)

    def layer_normals(self, layer_index: int) -> np.random.Generator:
        return self.substream(_PROCESS, layer_index)

    def reading_normal(self, stage: int, reading_index: int) -> float:
        self.draws += 1
        return float(self.substream(_MEASURE, stage, reading_index).standard_normal())


@dataclass(frozen=True)
class PrintState:
    """Realised widths of the partially printed beam (hidden from the controller)."""

    true_params: ModelParams
    realized_widths_mm: tuple = ()
    noise_model: str = "exact"

    def __post_init__(self):
        if self.noise_model not in NOISE_MODELS:
            raise ValueError(f"unknown noise model {self.noise_model!r}")

    @property
    def stage(self) -> int:
        return len(self.realized_widths_mm)

    @property
    def widths(self) -> np.ndarray:
        return np.asarray(self.realized_widths_mm, dtype=np.float64)

    def true_compliance(self) -> float:
        return compliance(self.widths, self.true_params)

    def true_stiffness(self) -> float:
        return 1.0 / self.true_compliance()


@dataclass(frozen=True)
class Reading:
    stage: int
    reading_index: int
    compliance: float  # nan when invalid
    valid: bool


@dataclass(frozen=True)
class MeasurementSchedule:
    """When to stop and measure, counted in layers from the start of a command list.

    ``period=None`` means never.
    """

    period: int | None = 25
    readings_per_stop: int = 5

    def __post_init__(self):
        if self.period is not None and self.period < 1:
            raise ValueError(f"measurement period must be >= 1, got {self.period}")
        if self.readings_per_stop < 0:
            raise ValueError("readings_per_stop must be nonnegative")

    @classmethod
    def never(cls) -> "MeasurementSchedule":
        return cls(period=None, readings_per_stop=0)

    def is_stop(self, layers_done: int) -> bool:
        return (
            self.period is not None
            and self.readings_per_stop > 0
            and layers_done > 0
            and layers_done % self.period == 0
        )


def _width_from_eps(u: float, eps, gamma: float, noise_model: str):
    """Realised width for width error ``eps``; nan where the draw is inadmissible."""
    if noise_model == "exact":
        w = u + eps
        return np.where(w + gamma > 0, w, np.nan)
    a = 1.0 / (u + gamma)
    s = a * (1.0 - eps * a)
    with np.errstate(divide="ignore"):
        return np.where(s > 0, 1.0 / s - gamma, np.nan)


def draw_width(u: float, layer_index: int, params: ModelParams, noise: NoiseStream,
               noise_model: str = "exact") -> float:
    """Realised width of layer ``layer_index`` commanded at ``u``.

    Draws ``eps ~ N(0, sigma_p^2)`` and rejects draws that would give
    ``w + gamma <= 0``.
    """
    if not u + params.gamma > 0:
        raise SingularWidthError(f"commanded width {u} gives u + gamma <= 0")
    if params.sigma_p == 0:
        return float(u)
    rng = noise.layer_normals(layer_index)
    for attempt in range(MAX_REDRAWS):
        noise.draws += 1
        w = float(_width_from_eps(u, params.sigma_p * rng.standard_normal(), params.gamma, noise_model))
        if not np.isnan(w):
            if attempt:
                noise.redraws += attempt
                log.debug("layer %d: %d redraws", layer_index, attempt)
            return w
    raise RuntimeError(f"layer {layer_index}: no admissible width after {MAX_REDRAWS} draws")


def deposit_layer(state: PrintState, u: float, noise: NoiseStream) -> PrintState:
    w = draw_width(u, state.stage + 1, state.true_params, noise, state.noise_model)
    return PrintState(state.true_params, state.realized_widths_mm + (w,), state.noise_model)


def measure_stiffness(state: PrintState, noise: NoiseStream, reading_index: int = 0) -> Reading:
    """One probe reading of the current beam, as a compliance.

    The probe reports stiffness ``1/C + nu`` with ``nu ~ N(0, sigma_o^2)``.
    A non-positive stiffness reading is returned flagged invalid.
    """
    if state.stage < 1:
        raise ValueError("cannot measure an empty beam")
    true_c = state.true_compliance()
    sigma_o = state.true_params.sigma_o
    if sigma_o == 0:
        return Reading(state.stage, reading_index, true_c, True)
    nu = sigma_o * noise.reading_normal(state.stage, reading_index)
    o = _reading_from_nu(true_c, nu, state.noise_model)
    if np.isnan(o):
        log.debug("stage %d reading %d invalid", state.stage, reading_index)
        return Reading(state.stage, reading_index, float("nan"), False)
    return Reading(state.stage, reading_index, float(o), True)


def _reading_from_nu(true_c: float, nu, noise_model: str):
    """Observed compliance for stiffness-reading error ``nu``; nan where non-physical."""
    if noise_model == "exact":
        k = 1.0 / true_c + nu
        with np.errstate(divide="ignore"):
            return np.where(k > 0, 1.0 / k, np.nan)
    o = true_c * (1.0 - nu * true_c)
    return np.where(o > 0, o, np.nan)


def take_readings(state: PrintState, count: int, noise: NoiseStream) -> list[Reading]:
    return [measure_stiffness(state, noise, j) for j in range(count)]


def run_schedule(state: PrintState, commands, schedule: MeasurementSchedule, noise: NoiseStream):
    """Deposit ``commands`` in order, measuring at scheduled stops.

    Returns the final state and the list of readings (invalid ones included).
    """
    commands = list(commands)
    if not commands:
        raise ValueError("commands must be nonempty")
    records: list[Reading] = []
    for i, u in enumerate(commands, start=1):
        state = deposit_layer(state, u, noise)
        if schedule.is_stop(i):
            records.extend(take_readings(state, schedule.readings_per_stop, noise))
    return state, records


def sample_widths(u: float, count: int, params: ModelParams, rng: np.random.Generator,
                  noise_model: str = "exact") -> np.ndarray:
    """Vectorised version of :func:`draw_width` for ``count`` layers at one command.

    Used for calibration specimens, where layers share a command and no
    per-layer addressing is needed.
    """
    if not u + params.gamma > 0:
        raise SingularWidthError(f"commanded width {u} gives u + gamma <= 0")
    out = np.full(count, float(u))
    if params.sigma_p == 0:
        return out
    todo = np.arange(count)
    for _ in range(MAX_REDRAWS):
        draws = _width_from_eps(u, params.sigma_p * rng.standard_normal(todo.size), params.gamma, noise_model)
        ok = ~np.isnan(draws)
        out[todo[ok]] = draws[ok]
        todo = todo[~ok]
        if todo.size == 0:
            return out
    raise RuntimeError("no admissible widths after rejection sampling")
