"""Layered cantilever mechanics.

Units are fixed across the package: millimetres for widths, gram-force for
loads, mm/g for compliance and g/mm for stiffness. Young's modulus, the
load and the layer height never appear at runtime; they are folded into
``alpha`` by the affine second-moment model ``I_k ~ (w_k + gamma) / alpha``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from functools import lru_cache

import numpy as np


class SingularWidthError(ValueError):
    """A layer width makes ``w + gamma`` non-positive."""


@dataclass(frozen=True)
class Geometry:
    layer_height_mm: float = 0.2
    total_layers: int = 500
    base_layers: int = 250
    base_width_mm: float = 20.0

    def __post_init__(self):
        if not self.layer_height_mm > 0:
            raise ValueError(f"layer height must be positive, got {self.layer_height_mm}")
        if self.total_layers < 1:
            raise ValueError(f"total_layers must be >= 1, got {self.total_layers}")
        if not 0 <= self.base_layers < self.total_layers:
            raise ValueError(
                f"base_layers must lie in [0, {self.total_layers}), got {self.base_layers}"
            )
        if not self.base_width_mm > 0:
            raise ValueError(f"base width must be positive, got {self.base_width_mm}")

    @property
    def controlled_layers(self) -> int:
        return self.total_layers - self.base_layers


@dataclass(frozen=True)
class ModelParams:
    """Identified print-process parameters.

    alpha : 1/g, scale of the layer flexibility.
    gamma : mm, width offset of the affine second-moment model.
    sigma_p : mm, std of the deposited-width error.
    sigma_o : std of the additive noise on a stiffness reading.
    """

    alpha: float
    gamma: float
    sigma_p: float = 0.0
    sigma_o: float = 0.0

    def __post_init__(self):
        for name in ("alpha", "gamma", "sigma_p", "sigma_o"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.sigma_p < 0 or self.sigma_o < 0:
            raise ValueError("noise levels must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelParams":
        return cls(**{k: float(data[k]) for k in ("alpha", "gamma", "sigma_p", "sigma_o")})

    def noiseless(self) -> "ModelParams":
        return replace(self, sigma_p=0.0, sigma_o=0.0)


# Identified values from a 12-specimen calibration at widths 5-20 mm.
REFERENCE_PARAMS = ModelParams(alpha=1.035e-8, gamma=7.326, sigma_p=19.064, sigma_o=3.907)


def coeff_numerator(n: int, k: int) -> int:
    """Exact integer ``6 * c_{n,k}``."""
    if not 1 <= k <= n:
        raise ValueError(f"layer index k={k} outside [1, {n}]")
    return 3 * (2 * k - 1) * (n - k) + 3 * k * k - 1


def coeff(n: int, k: int) -> float:
    """Influence of layer ``k`` on the tip compliance of an ``n``-layer beam."""
    return coeff_numerator(n, k) / 6.0


@lru_cache(maxsize=64)
def _coeff_vector_cached(n: int) -> np.ndarray:
    k = np.arange(1, n + 1, dtype=np.float64)
    values = (3.0 * (2.0 * k - 1.0) * (n - k) + 3.0 * k * k - 1.0) / 6.0
    values.setflags(write=False)
    return values


def coeff_vector(n: int) -> np.ndarray:
    """Vector ``(c_{n,1}, ..., c_{n,n})`` as a read-only float array."""
    if n < 1:
        raise ValueError(f"stage must be >= 1, got {n}")
    return _coeff_vector_cached(int(n))


def coeff_sum(n: int) -> float:
    """Closed form of ``sum_k c_{n,k}``, the uniform-beam ``n^3 / 3``."""
    return n**3 / 3.0


def _shifted(widths, gamma: float) -> np.ndarray:
    shifted = np.asarray(widths, dtype=np.float64) + gamma
    if np.any(shifted <= 0) or np.any(~np.isfinite(shifted)):
        raise SingularWidthError("every width must satisfy w + gamma > 0")
    return shifted


def compliance(widths, params: ModelParams) -> float:
    """Tip compliance (mm/g) of a beam with layer widths ``w_1..w_n``."""
    widths = np.asarray(widths, dtype=np.float64)
    if widths.ndim != 1 or widths.size == 0:
        raise ValueError("width profile must be a nonempty 1-D sequence")
    shifted = _shifted(widths, params.gamma)
    return float(params.alpha * np.dot(coeff_vector(widths.size), 1.0 / shifted))


def stiffness(widths, params: ModelParams) -> float:
    return 1.0 / compliance(widths, params)


def final_compliance_split(prefix_mean, plan, params: ModelParams, total_layers: int) -> float:
    """Predicted compliance of the finished beam.

    The first ``n-1`` layers enter through their state estimates ``mu_k``
    (estimates of ``1/(w_k + gamma)``), the remaining ones through the
    planned widths ``u_n..u_N``. Both sums use the stage-``N`` coefficients.
    """
    prefix_mean = np.asarray(prefix_mean, dtype=np.float64).reshape(-1)
    plan = np.asarray(plan, dtype=np.float64).reshape(-1)
    if prefix_mean.size + plan.size != total_layers:
        raise ValueError(
            f"prefix ({prefix_mean.size}) + plan ({plan.size}) must cover {total_layers} layers"
        )
    c = coeff_vector(total_layers)
    n_prefix = prefix_mean.size
    total = float(np.dot(c[:n_prefix], prefix_mean))
    if plan.size:
        total += float(np.dot(c[n_prefix:], 1.0 / _shifted(plan, params.gamma)))
    return params.alpha * total


def final_compliance_variance(plan, params: ModelParams, total_layers: int) -> float:
    """Variance of the final compliance contributed by the not-yet-printed layers.

    Uses the linearised process model, under which layer ``k`` adds
    ``alpha^2 sigma_p^2 c_{N,k}^2 / (u_k + gamma)^4``.
    """
    plan = np.asarray(plan, dtype=np.float64).reshape(-1)
    if plan.size > total_layers:
        raise ValueError("plan longer than the beam")
    if plan.size == 0:
        return 0.0
    c = coeff_vector(total_layers)[total_layers - plan.size:]
    shifted = _shifted(plan, params.gamma)
    return float(params.alpha**2 * params.sigma_p**2 * np.sum(c**2 / shifted**4))
