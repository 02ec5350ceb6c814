import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from nvcohmap.fitting import (
    DEFAULT_BOUNDS,
    FitOptions,
    FitParams,
    RabiFitter,
    brute_force_fit,
    fit_batch,
    fit_trace,
    initial_guess,
    model_and_jacobian,
    sum_squared_residual,
)
from nvcohmap.spin import mhz_to_radns, normalized_pl_model

TAU = np.arange(0.0, 931.0, 10.0)
W5 = mhz_to_radns(5.0)
TRUTH = FitParams(1.0, 0.03, W5, 190.0)
# N noise for 150 x 250 accumulation at ~200 photoelectrons per sequence
PAPER_SIGMA = 5e-4


def trace(p=TRUTH, tau=TAU):
    return normalized_pl_model(tau, *p.to_array())


def random_params(rng):
    lo = np.array([0.8, 0.0, mhz_to_radns(0.5), 50.0])
    hi = np.array([1.2, 0.2, mhz_to_radns(20.0), 5000.0])
    return lo + (hi - lo) * rng.random(4)


def central_difference(tau, p, rel=1e-6):
    J = np.empty((tau.size, 4))
    for i in range(4):
        h = rel * max(abs(p[i]), 1e-3)
        up, dn = p.copy(), p.copy()
        up[i] += h
        dn[i] -= h
        J[:, i] = (normalized_pl_model(tau, *up) - normalized_pl_model(tau, *dn)) / (2 * h)
    return J


def test_jacobian_closed_form_columns():
    f, J = model_and_jacobian(TAU, TRUTH)
    assert np.array_equal(f, trace())
    assert np.all(J[:, 0] == 1.0)
    _, J0 = model_and_jacobian(TAU, FitParams(1.0, 0.0, W5, 190.0))
    assert np.all(J0[:, 2] == 0.0) and np.all(J0[:, 3] == 0.0)
    with pytest.raises(ValueError):
        model_and_jacobian(TAU, [1.0, 0.03, W5, 0.0])


def test_jacobian_matches_finite_differences(rng):
    for _ in range(200):
        p = random_params(rng)
        _, J = model_and_jacobian(TAU, p)
        assert np.max(np.abs(J - central_difference(TAU, p))) <= 1e-6


def test_initial_guess_examples():
    g = initial_guess(trace(FitParams(1.0, 0.03, W5, 1e4)), TAU)
    assert g.omega_prime == pytest.approx(W5, rel=0.1)
    g = initial_guess(trace(), TAU)
    assert 0.015 <= g.c <= 0.06
    assert g.t2_star == pytest.approx(465.0)
    g, flags = initial_guess(np.ones(94), TAU, return_flags=True)
    assert g.a == 1.0 and g.c == 0.0 and "constant" in flags


def test_initial_guess_nonuniform_grid_falls_back():
    tau = np.sort(np.random.default_rng(3).uniform(0, 930, 120))
    y = normalized_pl_model(tau, 1.0, 0.03, W5, 1e4)
    g, flags = initial_guess(y, tau, return_flags=True)
    assert "nonuniform-grid" in flags
    assert g.omega_prime == pytest.approx(W5, rel=0.15)


def test_initial_guess_needs_eight_samples():
    with pytest.raises(ValueError):
        initial_guess(np.ones(5), np.arange(5.0))


@pytest.mark.parametrize("seed", range(5))
def test_noiseless_recovery_from_perturbed_guess(seed):
    rng = np.random.default_rng(seed)
    truth = np.array([1.0, 0.03, mhz_to_radns(rng.uniform(2, 8)), rng.uniform(150, 900)])
    guess = truth * (1 + 0.2 * rng.choice([-1, 1], 4))
    res = fit_trace(normalized_pl_model(TAU, *truth), TAU, guess)
    assert res.converged
    assert np.allclose(res.params.to_array(), truth, rtol=1e-6, atol=0)
    assert res.r_squared == pytest.approx(1.0)


def test_noisy_recovery_monte_carlo():
    y0 = trace()
    t2 = []
    for seed in range(100):
        y = y0 + PAPER_SIGMA * np.random.default_rng(seed).standard_normal(TAU.size)
        res = fit_trace(y, TAU)
        assert res.converged
        t2.append(res.params.t2_star)
    t2 = np.array(t2)
    assert abs(np.mean(t2) / 190.0 - 1) < 0.10
    assert np.mean(np.abs(t2 / 190.0 - 1) < 0.10) >= 0.95


def test_pure_noise_is_flagged():
    from nvcohmap.mapping import CoherenceMap, quality_mask

    y = 1.0 + 1e-3 * np.random.default_rng(1).standard_normal(TAU.size)
    res = fit_trace(y, TAU)
    assert res.converged
    assert res.params.c < 0.005 or res.r_squared < 0.5 or any(res.at_bound)
    one = lambda v: np.full((1, 1), v)  # noqa: E731
    cmap = CoherenceMap(one(res.params.t2_star), one(res.params.omega_prime), one(res.params.c),
                        one(res.params.a), one(res.r_squared), one(res.residual_norm), one(res.iterations),
                        one(res.converged), np.array(res.at_bound).reshape(1, 1, 4), one(True), one(True),
                        DEFAULT_BOUNDS)
    assert not quality_mask(cmap).quality[0, 0]


def test_covariance_symmetric_psd_and_calibrated():
    rng = np.random.default_rng(2)
    y = trace() + PAPER_SIGMA * rng.standard_normal(TAU.size)
    res = fit_trace(y, TAU)
    assert np.allclose(res.covariance, res.covariance.T)
    assert np.all(np.linalg.eigvalsh(res.covariance) >= -1e-18)
    assert 1.0 < res.stderr[3] < 30.0


def test_brute_force_examples():
    grids = [np.linspace(0.98, 1.02, 5), np.linspace(0.0, 0.06, 7),
             mhz_to_radns(np.linspace(3, 7, 5)), np.linspace(100, 300, 5)]
    on_grid = FitParams(grids[0][2], grids[1][3], grids[2][2], grids[3][2])
    assert brute_force_fit(trace(on_grid), TAU, grids) == on_grid
    flat = brute_force_fit(np.ones(TAU.size), TAU, grids)
    assert flat.c == 0.0
    with pytest.raises(ValueError):
        brute_force_fit(trace(), TAU, [grids[0], [0.03], grids[2], grids[3]])


def test_lm_beats_brute_force(rng):
    grids = [np.linspace(0.97, 1.03, 20), np.linspace(0.0, 0.08, 20),
             mhz_to_radns(np.linspace(2, 8, 20)), np.linspace(100, 1000, 20)]
    for _ in range(5):
        p = np.array([1.0, 0.03, mhz_to_radns(rng.uniform(3, 7)), rng.uniform(150, 900)])
        y = normalized_pl_model(TAU, *p) + PAPER_SIGMA * rng.standard_normal(TAU.size)
        lm = fit_trace(y, TAU)
        bf = brute_force_fit(y, TAU, grids)
        assert lm.residual_norm**2 <= sum_squared_residual(y, TAU, bf) * (1 + 1e-12)


@given(st.floats(0.3, 3.0))
def test_scale_invariance(gamma):
    y = trace() + PAPER_SIGMA * np.random.default_rng(4).standard_normal(TAU.size)
    bounds = ((0.1, 5.0), (0.0, 1.0), DEFAULT_BOUNDS[2], DEFAULT_BOUNDS[3])
    opts = FitOptions(bounds=bounds)
    g = initial_guess(y, TAU, bounds).to_array()
    base = fit_trace(y, TAU, g, opts).params.to_array()
    scaled = fit_trace(gamma * y, TAU, g * [gamma, gamma, 1, 1], opts).params.to_array()
    assert scaled[:2] == pytest.approx(gamma * base[:2], rel=1e-9)
    assert scaled[2:] == pytest.approx(base[2:], rel=1e-9)


def test_averaging_detuning_spread_shortens_coherence():
    rng = np.random.default_rng(5)
    delta = mhz_to_radns(rng.normal(0.0, 0.6, 200))
    wp = np.hypot(W5, delta)
    traces = normalized_pl_model(TAU, 1.0, 0.03, wp[:, None], 400.0)
    traces += PAPER_SIGMA * rng.standard_normal(traces.shape)
    per_pixel = [fit_trace(y, TAU).params.t2_star for y in traces]
    averaged = fit_trace(traces.mean(axis=0), TAU).params.t2_star
    assert averaged < np.median(per_pixel)


def test_batch_rows_independent_of_batch_composition():
    rng = np.random.default_rng(6)
    ys = trace() + PAPER_SIGMA * rng.standard_normal((6, TAU.size))
    guesses = np.array([initial_guess(y, TAU).to_array() for y in ys])
    full = fit_batch(TAU, ys, guesses)
    part = fit_batch(TAU, ys[2:4], guesses[2:4])
    assert np.array_equal(full["params"][2:4], part["params"])


def test_weights_accepted():
    y = trace()
    res = fit_trace(y, TAU, weights=np.full(TAU.size, 4.0))
    assert res.params.t2_star == pytest.approx(190.0, rel=1e-6)


def test_iteration_cap_reports_not_converged():
    y = trace() + PAPER_SIGMA * np.random.default_rng(7).standard_normal(TAU.size)
    res = fit_trace(y, TAU, [1.2, 0.2, mhz_to_radns(1.0), 20.0], FitOptions(max_iterations=1))
    assert not res.converged and res.status == "iteration limit"


def test_fit_options_validation():
    with pytest.raises(ValueError):
        FitOptions(rel_tolerance=0.0)
    with pytest.raises(ValueError):
        FitOptions(bounds=((1.0, 0.5),) + DEFAULT_BOUNDS[1:])


def test_rabi_fitter_estimator_api():
    est = RabiFitter(max_iterations=100)
    assert est.get_params()["max_iterations"] == 100
    assert clone(est).get_params() == est.get_params()
    est.fit(TAU.reshape(-1, 1), trace())
    assert est.t2_star_ == pytest.approx(190.0, rel=1e-6)
    assert np.allclose(est.predict(TAU), trace(), atol=1e-12)
    assert est.score(TAU, trace()) == pytest.approx(1.0)
    with pytest.raises(Exception):
        RabiFitter().predict(TAU)
