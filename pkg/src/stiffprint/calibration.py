"""Identification of ``(alpha, gamma, sigma_p, sigma_o)`` from constant-width specimens.

Specimens of ``n`` layers are printed at ``m`` commanded widths, ``p`` per
width, and each is measured ``q`` times. The expected stiffness of a
specimen is affine in its width,

    E[K_i] = (u_i + gamma) / (alpha * S),    S = sum_k c_{n,k} = n^3 / 3,

so a straight-line fit of per-width stiffness against width yields alpha
from the slope and gamma from the intercept. The noise levels come from
plug-in estimators on the within-specimen and between-specimen scatter.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .beam import ModelParams, coeff_sum, coeff_vector
from .sim import NoiseStream, _reading_from_nu, sample_widths


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class SpecimenDataset:
    """Compliance readings ``readings[i, j, l]`` (mm/g) for width ``i``, specimen ``j``, reading ``l``."""

    widths: np.ndarray
    readings: np.ndarray
    layers: int

    def __post_init__(self):
        widths = np.asarray(self.widths, dtype=np.float64).reshape(-1)
        readings = np.asarray(self.readings, dtype=np.float64)
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "readings", readings)
        if widths.size < 2:
            raise CalibrationError("at least two widths are needed for the regression")
        if readings.ndim != 3 or readings.shape[0] != widths.size:
            raise CalibrationError(f"readings must have shape (m, p, q) with m={widths.size}")
        if min(readings.shape[1:]) < 1:
            raise CalibrationError("need at least one specimen and one reading per width")
        if not np.all(readings > 0):
            raise CalibrationError("all compliance readings must be positive")
        if self.layers < 1:
            raise CalibrationError("layers must be >= 1")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.readings.shape

    def specimen_means(self) -> np.ndarray:
        return self.readings.mean(axis=2)

    def to_csv(self, path: Path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["width_mm", "specimen_index", "reading_index", "compliance_mm_per_g"])
            m, p, q = self.shape
            for i in range(m):
                for j in range(p):
                    for l in range(q):
                        writer.writerow([repr(float(self.widths[i])), j, l, repr(float(self.readings[i, j, l]))])

    @classmethod
    def from_csv(cls, path: Path, layers: int) -> "SpecimenDataset":
        groups: dict[float, dict[int, dict[int, float]]] = {}
        with Path(path).open(newline="") as fh:
            for rec in csv.DictReader(fh):
                try:
                    u = float(rec["width_mm"])
                    j = int(rec["specimen_index"])
                    l = int(rec["reading_index"])
                    value = float(rec["compliance_mm_per_g"])
                except (KeyError, ValueError) as exc:
                    raise CalibrationError(f"malformed dataset row {rec}: {exc}") from exc
                groups.setdefault(u, {}).setdefault(j, {})[l] = value
        widths = sorted(groups)
        specimens = {len(groups[u]) for u in widths}
        reads = {len(r) for u in widths for r in groups[u].values()}
        if len(specimens) != 1 or len(reads) != 1:
            raise CalibrationError("dataset must have the same number of specimens and readings per group")
        readings = np.array([
            [[groups[u][j][l] for l in sorted(groups[u][j])] for j in sorted(groups[u])]
            for u in widths
        ])
        return cls(np.array(widths), readings, layers)


@dataclass(frozen=True)
class CalibrationResult:
    params: ModelParams
    slope: float
    intercept: float
    residual_norm: float
    diagnostics: dict = field(default_factory=dict)


def group_stiffness(ds: SpecimenDataset, mode: str = "reciprocal_of_mean") -> np.ndarray:
    """Per-width stiffness estimates.

    ``reciprocal_of_mean`` inverts the mean compliance of the width group;
    ``mean_of_reciprocals`` averages the reciprocals of individual readings.
    """
    flat = ds.readings.reshape(ds.widths.size, -1)
    if mode == "reciprocal_of_mean":
        return 1.0 / flat.mean(axis=1)
    if mode == "mean_of_reciprocals":
        return (1.0 / flat).mean(axis=1)
    raise ValueError(f"unknown stiffness mode {mode!r}")


def estimate_alpha_gamma(ds: SpecimenDataset, mode: str = "reciprocal_of_mean") -> tuple[float, float, dict]:
    if np.ptp(ds.widths) == 0:
        raise CalibrationError("all widths are equal; the regression is degenerate")
    k_hat = group_stiffness(ds, mode)
    design = np.column_stack([ds.widths, np.ones_like(ds.widths)])
    (slope, intercept), *_ = np.linalg.lstsq(design, k_hat, rcond=None)
    if not slope > 0:
        raise CalibrationError(f"stiffness does not increase with width (slope {slope:.4g})")
    residual = float(np.linalg.norm(design @ np.array([slope, intercept]) - k_hat))
    s = coeff_sum(ds.layers)
    alpha = 1.0 / (slope * s)
    gamma = intercept / slope
    return float(alpha), float(gamma), {
        "slope": float(slope),
        "intercept": float(intercept),
        "residual_norm": residual,
        "stiffness_mode": mode,
    }


def estimate_sigma_o(ds: SpecimenDataset, alpha: float, gamma: float, verbatim: bool = True) -> float:
    """Reading-noise level from the scatter of readings around each specimen mean.

    With ``verbatim=True`` each normalised deviation ``(C - C_ij)/C_ij^2`` is
    further multiplied by ``(u_i + gamma)/alpha``. ``verbatim=False`` omits
    that factor and returns the std of the additive stiffness-reading noise
    itself, which is the quantity the simulator's ``sigma_o`` denotes.
    """
    means = ds.specimen_means()
    if np.any(means == 0):
        raise CalibrationError("zero specimen mean compliance")
    dev = (ds.readings - means[:, :, None]) / means[:, :, None] ** 2
    if verbatim:
        dev = dev * ((ds.widths + gamma) / alpha)[:, None, None]
    return float(np.sqrt(np.mean(dev**2)))


def process_noise_sums(ds: SpecimenDataset, alpha: float, gamma: float) -> np.ndarray:
    """Per-specimen ``sum_k c_{n,k} eps_k`` recovered from the specimen mean compliance."""
    shifted = (ds.widths + gamma)[:, None]
    return (ds.specimen_means() * shifted / alpha - coeff_sum(ds.layers)) * shifted


def estimate_sigma_p(ds: SpecimenDataset, alpha: float, gamma: float) -> float:
    """Width-noise level, averaging the single-specimen estimator over all specimens."""
    sums = process_noise_sums(ds, alpha, gamma)
    c2 = float(np.sum(coeff_vector(ds.layers) ** 2))
    return float(np.sqrt(np.mean(sums**2) / c2))


def calibrate(ds: SpecimenDataset, mode: str = "reciprocal_of_mean", verbatim_sigma_o: bool = True) -> CalibrationResult:
    alpha, gamma, diag = estimate_alpha_gamma(ds, mode)
    if not gamma > -ds.widths.min():
        raise CalibrationError(f"gamma={gamma:.4g} makes some specimen width singular")
    if not gamma > 0:
        raise CalibrationError(f"estimated gamma={gamma:.4g} is not positive")
    sigma_o = estimate_sigma_o(ds, alpha, gamma, verbatim=verbatim_sigma_o)
    sigma_p = estimate_sigma_p(ds, alpha, gamma)
    params = ModelParams(alpha=alpha, gamma=gamma, sigma_p=sigma_p, sigma_o=sigma_o)
    return CalibrationResult(params, diag["slope"], diag["intercept"], diag["residual_norm"],
                             {**diag, "verbatim_sigma_o": verbatim_sigma_o})


def _specimen_seed(seed: int, i: int, j: int) -> int:
    return int(np.random.SeedSequence([seed, i, j]).generate_state(1, np.uint64)[0])


def synthesize_dataset(true_params: ModelParams, widths=(5.0, 10.0, 15.0, 20.0), specimens: int = 3,
                       readings: int = 5, layers: int = 250, seed: int = 0,
                       noise_model: str = "exact") -> SpecimenDataset:
    """Print and measure calibration specimens with the simulator's noise models.

    Non-physical readings are repeated, as an operator would.
    """
    widths = np.asarray(widths, dtype=np.float64)
    if specimens < 1 or readings < 1 or layers < 1:
        raise ValueError("protocol sizes must be positive")
    c = coeff_vector(layers)
    out = np.empty((widths.size, specimens, readings))
    for i, u in enumerate(widths):
        for j in range(specimens):
            noise = NoiseStream(_specimen_seed(seed, i, j))
            w = sample_widths(u, layers, true_params, noise.layer_normals(0), noise_model)
            true_c = true_params.alpha * float(np.dot(c, 1.0 / (w + true_params.gamma)))
            rng = noise.substream(2, 0)
            for l in range(readings):
                while True:
                    o = float(_reading_from_nu(true_c, true_params.sigma_o * rng.standard_normal(), noise_model))
                    if not np.isnan(o):
                        break
                out[i, j, l] = o
    return SpecimenDataset(widths, out, layers)


# -- parameter files ----------------------------------------------------------

PARAM_KEYS = ("alpha", "gamma", "sigma_p", "sigma_o")


def save_params(params: ModelParams, path: Path, provenance: dict | None = None) -> None:
    lines = [f"{k} = {getattr(params, k)!r}" for k in PARAM_KEYS]
    if provenance:
        lines += ["", "[provenance]"]
        for key, value in provenance.items():
            if isinstance(value, str):
                value = '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
            elif isinstance(value, bool):
                value = "true" if value else "false"
            else:
                value = repr(value)
            lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_params(path: Path | None = None) -> ModelParams:
    """Read a parameter file; ``None`` loads the bundled reference values."""
    if path is None:
        from importlib import resources

        text = resources.files("stiffprint.data").joinpath("reference_params.toml").read_text()
    else:
        text = Path(path).read_text()
    doc = tomllib.loads(text)
    missing = [k for k in PARAM_KEYS if k not in doc]
    if missing:
        raise CalibrationError(f"parameter file lacks {', '.join(missing)}")
    return ModelParams.from_dict(doc)
