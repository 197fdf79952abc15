"""Recursive estimator of the transformed state ``s_k = 1/(w_k + gamma)``.

The state grows by one entry per deposited layer. Process updates append
the commanded layer with a linearised variance, measurement updates fold in
one scalar compliance reading. The measurement update is carried out in
covariance (gain) form, which is algebraically the information-form update
``Sigma^-1 <- Sigma_bar^-1 + H^T R^-1 H`` with

    H = alpha * C_n^T,    R = alpha^4 sigma_o^2 (C_n^T mu_bar)^4,

but needs no inverse of ``Sigma_bar`` (which is singular when sigma_p = 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .beam import Geometry, ModelParams, SingularWidthError, coeff_vector


@dataclass(frozen=True)
class EstimatorState:
    params: ModelParams
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def empty(cls, params: ModelParams) -> "EstimatorState":
        return cls(params, np.zeros(0), np.zeros((0, 0)))

    @property
    def stage(self) -> int:
        return self.mean.size

    def predicted_compliance(self) -> float:
        """Current-stage compliance implied by the mean, ``alpha * C_n^T mu``."""
        return float(self.params.alpha * np.dot(coeff_vector(self.stage), self.mean))

    def check(self, tol: float = 1e-10) -> None:
        """Raise AssertionError if an invariant is broken."""
        n = self.stage
        assert self.cov.shape == (n, n), "covariance shape does not match stage"
        if n == 0:
            return
        assert np.all(self.mean > 0), "mean entries must be positive"
        assert np.abs(self.cov - self.cov.T).max() <= 1e-12 * np.abs(self.cov).max(), "covariance not symmetric"
        lo = np.linalg.eigvalsh(self.cov).min()
        assert lo >= -tol * abs(np.trace(self.cov)), f"covariance not PSD ({lo})"


def process_update(est: EstimatorState, u: float) -> EstimatorState:
    """Append layer ``n`` commanded at ``u``: new mean ``a = 1/(u + gamma)``, variance ``a^4 sigma_p^2``."""
    shifted = u + est.params.gamma
    if not shifted > 0:
        raise SingularWidthError(f"commanded width {u} gives u + gamma <= 0")
    a = 1.0 / shifted
    n = est.stage
    mean = np.empty(n + 1)
    mean[:n] = est.mean
    mean[n] = a
    cov = np.zeros((n + 1, n + 1))
    cov[:n, :n] = est.cov
    cov[n, n] = a**4 * est.params.sigma_p**2
    return EstimatorState(est.params, mean, cov)


def observation_model(est: EstimatorState) -> tuple[np.ndarray, float]:
    """Linearised observation row ``H`` and noise variance ``R`` at the current mean."""
    c = coeff_vector(est.stage)
    proj = float(np.dot(c, est.mean))
    if not proj > 0:
        raise ValueError("C_n^T mu must be positive for the observation linearisation")
    alpha = est.params.alpha
    return alpha * c, alpha**4 * est.params.sigma_o**2 * proj**4


def measurement_update(est: EstimatorState, observed: float) -> EstimatorState:
    """Fold in one observed compliance ``observed`` (mm/g) taken at the current stage."""
    if est.stage == 0:
        raise ValueError("no state to update")
    if not observed > 0:
        raise ValueError(f"observed compliance must be positive, got {observed}")
    h, r = observation_model(est)
    ph = est.cov @ h
    s = float(h @ ph) + r
    if s <= 0:
        # Neither state uncertainty nor measurement noise: nothing to learn.
        return est
    gain = ph / s
    mean = est.mean + gain * (observed - float(h @ est.mean))
    cov = est.cov - np.outer(ph, ph) / s
    cov = 0.5 * (cov + cov.T)
    return EstimatorState(est.params, mean, cov)


def measurement_updates(est: EstimatorState, observations) -> EstimatorState:
    """Sequential scalar updates, re-linearised after each reading."""
    for o in observations:
        est = measurement_update(est, o)
    return est


def no_measurement(est: EstimatorState) -> EstimatorState:
    return est


def init_foundation(geometry: Geometry, params: ModelParams) -> EstimatorState:
    """State after the fixed-width base has been printed (no measurements)."""
    est = EstimatorState.empty(params)
    for _ in range(geometry.base_layers):
        est = process_update(est, geometry.base_width_mm)
    return est
