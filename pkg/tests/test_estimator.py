import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import coeffs_float, information_form_update
from stiffprint.beam import Geometry, ModelParams, SingularWidthError, coeff_vector, compliance
from stiffprint.estimator import (
    EstimatorState,
    init_foundation,
    measurement_update,
    measurement_updates,
    no_measurement,
    observation_model,
    process_update,
)
from stiffprint.sim import MeasurementSchedule, NoiseStream, PrintState, run_schedule, take_readings

REFERENCE = ModelParams(alpha=1.035e-8, gamma=7.326, sigma_p=19.064, sigma_o=3.907)


def random_state(rng, n, params):
    mean = rng.uniform(0.03, 0.08, n)
    a = rng.normal(size=(n, n))
    cov = (a @ a.T / n + 0.5 * np.eye(n)) * 1e-4
    return EstimatorState(params, mean, cov)


def conditioned_params(rng, est, ratio):
    """Probe noise such that R equals ``ratio`` times the prior output variance."""
    alpha = est.params.alpha
    c = coeff_vector(est.stage)
    signal = alpha**2 * c @ est.cov @ c
    sigma_o = np.sqrt(ratio * signal / (alpha**4 * (c @ est.mean) ** 4))
    return ModelParams(alpha, est.params.gamma, est.params.sigma_p, sigma_o)


def test_process_update_hand_values():
    est = process_update(EstimatorState.empty(REFERENCE), 20.0)
    a = 1 / 27.326
    assert est.mean[0] == pytest.approx(0.0365957, rel=2e-5)
    assert est.mean[0] == 1 / 27.326
    assert est.cov[0, 0] == pytest.approx(a**4 * 19.064**2, rel=1e-12)
    assert est.cov[0, 0] == pytest.approx(6.52e-4, rel=2e-3)


def test_process_update_block_structure():
    est = process_update(process_update(EstimatorState.empty(REFERENCE), 20.0), 20.0)
    a = 1 / 27.326
    np.testing.assert_allclose(est.mean, [a, a])
    np.testing.assert_allclose(est.cov, np.diag([a**4 * 19.064**2] * 2))
    quiet = process_update(EstimatorState.empty(REFERENCE.noiseless()), 10.0)
    assert quiet.cov[0, 0] == 0.0
    with pytest.raises(SingularWidthError):
        process_update(quiet, -REFERENCE.gamma)


def test_init_foundation():
    assert init_foundation(Geometry(base_layers=0), REFERENCE).stage == 0
    est = init_foundation(Geometry(), REFERENCE)
    assert est.stage == 250
    np.testing.assert_allclose(est.mean, 1 / 27.326)
    d = np.diag(est.cov)
    np.testing.assert_allclose(d, d[0])
    assert np.count_nonzero(est.cov - np.diag(d)) == 0


def test_no_measurement_trace_accumulates():
    rng = np.random.default_rng(1)
    est = random_state(rng, 4, REFERENCE)
    trace0 = np.trace(est.cov)
    added = 0.0
    for u in np.linspace(20, 5, 25):
        est = no_measurement(process_update(est, u))
        added += (1 / (u + REFERENCE.gamma)) ** 4 * REFERENCE.sigma_p**2
    assert np.trace(est.cov) == pytest.approx(trace0 + added, rel=1e-12)


def test_never_schedule_matches_pure_process_updates():
    p = ModelParams(alpha=2e-5, gamma=7.0, sigma_p=1.0, sigma_o=0.1)
    cmds = np.linspace(18, 6, 20)
    run_schedule(PrintState(p), cmds, MeasurementSchedule.never(), NoiseStream(0))
    est = EstimatorState.empty(p)
    for u in cmds:
        est = no_measurement(process_update(est, u))
    np.testing.assert_array_equal(est.mean, 1 / (cmds + p.gamma))


def test_two_layer_dense_oracle():
    p = ModelParams(alpha=1.0, gamma=1.0, sigma_p=0.0, sigma_o=1.0)
    est = EstimatorState(p, np.array([1.0, 1.0]), np.eye(2))
    c = np.array([5 / 6, 11 / 6])
    np.testing.assert_allclose(coeff_vector(2), c)
    for observed in (2.0, 2.5, 3.1):
        got = measurement_update(est, observed)
        proj = c @ est.mean
        info = np.eye(2) + np.outer(c, c) / proj**4
        cov = np.linalg.inv(info)
        mean = cov @ (est.mean + observed * c / proj**4)
        np.testing.assert_allclose(got.cov, cov, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(got.mean, mean, rtol=1e-12)


def test_zero_innovation_keeps_mean_and_shrinks_cov():
    rng = np.random.default_rng(3)
    p = ModelParams(alpha=1e-3, gamma=7.0, sigma_p=1.0, sigma_o=2.0)
    est = random_state(rng, 3, p)
    observed = p.alpha * coeff_vector(3) @ est.mean
    post = measurement_update(est, observed)
    np.testing.assert_allclose(post.mean, est.mean, rtol=1e-10)
    c = coeff_vector(3)
    assert c @ post.cov @ c < c @ est.cov @ c
    ref_mean, _ = information_form_update(est.mean, est.cov, p.alpha, p.sigma_o, observed)
    np.testing.assert_allclose(ref_mean, est.mean, rtol=1e-10)


def test_uninformative_measurement_limit():
    rng = np.random.default_rng(4)
    p = ModelParams(alpha=1e-3, gamma=7.0, sigma_p=1.0, sigma_o=1e12)
    est = random_state(rng, 5, p)
    post = measurement_update(est, 0.9 * p.alpha * coeff_vector(5) @ est.mean)
    np.testing.assert_allclose(post.mean, est.mean, rtol=1e-12)
    np.testing.assert_allclose(post.cov, est.cov, rtol=1e-12)


@pytest.mark.parametrize("n", [1, 2, 5, 20, 50])
def test_gain_form_matches_information_form(n):
    rng = np.random.default_rng(n)
    for _ in range(10):
        base = random_state(rng, n, ModelParams(alpha=rng.uniform(1e-5, 1e-3), gamma=7.0, sigma_p=1.0))
        p = conditioned_params(rng, base, 10 ** rng.uniform(-1, 1))
        est = EstimatorState(p, base.mean, base.cov)
        observed = p.alpha * coeff_vector(n) @ est.mean * rng.uniform(0.8, 1.2)
        got = measurement_update(est, observed)
        mean, cov = information_form_update(est.mean, est.cov, p.alpha, p.sigma_o, observed)
        np.testing.assert_allclose(got.mean, mean, rtol=1e-8)
        np.testing.assert_allclose(got.cov, cov, rtol=1e-8, atol=1e-8 * np.abs(cov).max())


def test_singular_prior_is_handled():
    # sigma_p = 0 makes the prior covariance singular; the gain form still works.
    p = ModelParams(alpha=1e-3, gamma=7.0, sigma_p=0.0, sigma_o=1.0)
    est = process_update(process_update(EstimatorState.empty(p), 10.0), 8.0)
    post = measurement_update(est, 1.1 * est.predicted_compliance())
    np.testing.assert_array_equal(post.mean, est.mean)
    np.testing.assert_array_equal(post.cov, est.cov)
    # With state noise but a perfect probe the prior is not singular in C.
    p2 = ModelParams(alpha=1e-3, gamma=7.0, sigma_p=1.0, sigma_o=0.0)
    est2 = process_update(process_update(EstimatorState.empty(p2), 10.0), 8.0)
    observed = 1.01 * est2.predicted_compliance()
    post2 = measurement_update(est2, observed)
    assert post2.predicted_compliance() == pytest.approx(observed, rel=1e-12)


def test_observation_model_values():
    rng = np.random.default_rng(5)
    est = random_state(rng, 6, REFERENCE)
    h, r = observation_model(est)
    np.testing.assert_allclose(h, REFERENCE.alpha * coeffs_float(6))
    assert r == pytest.approx(REFERENCE.alpha**4 * REFERENCE.sigma_o**2 * (coeffs_float(6) @ est.mean) ** 4)


def test_measurement_update_errors():
    with pytest.raises(ValueError):
        measurement_update(EstimatorState.empty(REFERENCE), 1.0)
    est = process_update(EstimatorState.empty(REFERENCE), 10.0)
    with pytest.raises(ValueError):
        measurement_update(est, -1.0)


@given(st.integers(1, 30), st.integers(0, 10_000), st.floats(0.9, 1.1), st.floats(-2, 2))
def test_update_invariants(n, seed, scale, log_ratio):
    rng = np.random.default_rng(seed)
    base = random_state(rng, n, ModelParams(alpha=1e-4, gamma=7.0, sigma_p=2.0))
    est = EstimatorState(conditioned_params(rng, base, 10**log_ratio), base.mean, base.cov)
    post = measurement_update(est, scale * est.predicted_compliance())
    post.check()
    assert np.abs(post.cov - post.cov.T).max() <= 1e-12 * np.abs(post.cov).max()
    diff = est.cov - post.cov
    assert np.linalg.eigvalsh(diff).min() >= -1e-9 * np.trace(est.cov)


def test_sequential_readings_equal_repeated_single_updates():
    rng = np.random.default_rng(8)
    p = ModelParams(alpha=1e-4, gamma=7.0, sigma_p=2.0, sigma_o=0.5)
    est = random_state(rng, 8, p)
    obs = est.predicted_compliance() * rng.uniform(0.9, 1.1, 5)
    step = est
    for o in obs:
        step = measurement_update(step, o)
    batch = measurement_updates(est, obs)
    np.testing.assert_array_equal(step.mean, batch.mean)


def test_estimate_converges_with_more_readings():
    # Matched parameters, small probe noise: the final-compliance estimate error shrinks with readings.
    p = ModelParams(alpha=2e-5, gamma=7.326, sigma_p=1.0, sigma_o=0.05)
    n = 40
    counts = [0, 1, 2, 4, 8]
    errs = np.zeros((100, len(counts)))
    for trial in range(100):
        noise = NoiseStream(1000 + trial)
        state, _ = run_schedule(PrintState(p), [12.0] * n, MeasurementSchedule.never(), noise)
        truth = compliance(state.widths, p)
        prior = EstimatorState.empty(p)
        for _ in range(n):
            prior = process_update(prior, 12.0)
        readings = [r.compliance for r in take_readings(state, max(counts), noise)]
        for j, k in enumerate(counts):
            est = measurement_updates(prior, readings[:k])
            errs[trial, j] = est.predicted_compliance() - truth
    rms = np.sqrt(np.mean(errs**2, axis=0))
    inversions = int(np.sum(np.diff(rms) > 0))
    assert inversions <= 1
    assert rms[-1] < 0.5 * rms[0]
